"""Training of affine editors under the Wasserstein (LW) or classifier (LT) objective.

LW minimizes ``S(edited source, target) + lambda * S_attr(edited source, source)``
where the second divergence uses a cost computed from the latent classifiers
of the non-edited attributes. LT minimizes the cross-entropy of the edited
attribute's classifier, optionally with a paired attribute-preservation
term and an L2 penalty on the edit. Gradients are analytic in both cases.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from .attributes import (
    AttributeModel,
    apply_combination_weights,
    combination_weights,
    default_conditioning,
    train_classifiers,
)
from .dataset import DataError, LatentDataset
from .editor import AffineEditor, init_editor
from .sinkhorn import (
    SinkhornConfig,
    WeightedPointCloud,
    gradient_from_result,
    sinkhorn_divergence,
    squared_euclidean_cost,
)

__all__ = [
    "TrainingConfig",
    "TrainingReport",
    "NumericalError",
    "split_source_target",
    "make_batches",
    "lw_loss",
    "lt_loss",
    "train",
]

log = logging.getLogger(__name__)

MODES = ("lw", "lt")


class NumericalError(FloatingPointError):
    """Non-finite loss or an unconverged solve during training."""


@dataclass(frozen=True)
class TrainingConfig:
    mode: str = "lw"
    lambda_: float = 0.0
    l2_reg: float = 0.0
    alpha_train: float = 1.0
    # over-relaxed sweeps roughly halve training time; the solver falls back
    # to plain sweeps on its own when relaxation stops helping
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(relaxation=1.6))
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    use_weighting: bool = False
    conditioning: tuple | None = None
    increase: bool = True

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.lambda_ < 0 or self.l2_reg < 0:
            raise ValueError("lambda_ and l2_reg must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.conditioning is not None:
            object.__setattr__(self, "conditioning", tuple(int(j) for j in self.conditioning))

    def replace(self, **changes) -> TrainingConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    edit_term: list = field(default_factory=list)
    pres_term: list = field(default_factory=list)
    reg_term: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    initial_val_loss: float = float("nan")
    initial_components: dict = field(default_factory=dict)
    final_components: dict = field(default_factory=dict)
    epsilon: dict = field(default_factory=dict)

    @property
    def best_val_loss(self) -> float:
        if not self.val_loss:
            return self.initial_val_loss
        return float(min(self.val_loss))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "edit_term", "pres_term", "reg_term"])
            for e in range(len(self.val_loss)):
                writer.writerow([
                    e + 1,
                    repr(float(self.train_loss[e])),
                    repr(float(self.val_loss[e])),
                    repr(float(self.edit_term[e])),
                    repr(float(self.pres_term[e])),
                    repr(float(self.reg_term[e])),
                ])


def split_source_target(data: LatentDataset, attribute: int, increase: bool = True):
    """Row indices of the source (label 0) and target (label 1) sides; swapped for decreases."""
    column = data.labels[:, attribute]
    neg = np.flatnonzero(column == 0)
    pos = np.flatnonzero(column == 1)
    source, target = (neg, pos) if increase else (pos, neg)
    if len(source) == 0 or len(target) == 0:
        side = "source" if len(source) == 0 else "target"
        raise DataError(f"attribute {data.attribute_names[attribute]!r}: empty {side} side")
    return source, target


def make_batches(n_source: int, n_target: int, seed=0):
    """Batch plan ``[(source_idx, target_idx), ...]`` for one epoch.

    The batch size is ``min(n_source, n_target)``. The larger side is
    shuffled and chunked; a trailing chunk shorter than half a batch is
    dropped. The smaller side is used whole in every step.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError("both sides need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    B = min(n_source, n_target)
    source_larger = n_source >= n_target
    n_large, n_small = (n_source, n_target) if source_larger else (n_target, n_source)
    perm = rng.permutation(n_large)
    chunks = [perm[i:i + B] for i in range(0, n_large, B)]
    if len(chunks) > 1 and len(chunks[-1]) < B / 2:
        chunks.pop()
    small = np.arange(n_small)
    if source_larger:
        return [(chunk, small) for chunk in chunks]
    return [(small, chunk) for chunk in chunks]


def _edit_parts(W, b, z, alpha):
    delta = alpha * (z @ W.T + b)
    return z + delta, delta


def _chain(G, z, alpha):
    """Gradients w.r.t. (W, b) from the gradient w.r.t. the edited codes."""
    return alpha * G.T @ z, alpha * G.sum(axis=0)


def _others(attr_model: AttributeModel, k: int):
    keep = [j for j in range(attr_model.K) if j != k]
    scale = np.sqrt(1.0 - np.clip(attr_model.gamma[keep, k], 0.0, 1.0))
    return attr_model.coef[keep], attr_model.intercept[keep], scale


def _features(codes, coef, intercept, scale):
    """Scaled classifier outputs, and their derivative factor ``scale * p (1 - p)``."""
    p = expit(codes @ coef.T + intercept)
    return p * scale, scale * p * (1.0 - p)


def _mean_half_sq_dist(x, y) -> float:
    """Unweighted mean of ``0.5 ||x_i - y_j||^2`` without forming the matrix."""
    return float(0.5 * ((x ** 2).sum(axis=1).mean() + (y ** 2).sum(axis=1).mean())
                 - x.mean(axis=0) @ y.mean(axis=0))


class _LWState:
    """Fixed epsilons and warm starts shared by repeated LW evaluations.

    Potentials are stored per dataset row, so a batch drawn from any subset
    of rows starts from the values those rows had in their last solve.
    Target self-terms are cached for exact row sets only.
    """

    CACHE_SIZE = 4
    GAUGE_LIMIT = 1e3

    def __init__(self, n_rows: int, eps_edit=None, eps_pres=None):
        self.n_rows = n_rows
        self.eps_edit = eps_edit
        self.eps_pres = eps_pres
        self._pot = {}
        self._prev = {}
        self._seen = {}
        self._target_self = {}

    def init(self, term, src_rows, tgt_rows):
        """Warm starts for a batch, linearly extrapolated from the last two solves."""
        def take(slot, rows):
            cur = self._pot.get((term, slot))
            if cur is None:
                return None
            prev = self._prev[(term, slot)]
            return 2.0 * cur[rows] - prev[rows]

        out = {}
        f, g = take("cross_f", src_rows), take("cross_g", tgt_rows)
        if f is not None:
            out["cross"] = (f, g)
        u = take("source", src_rows)
        if u is not None:
            out["source"] = (u, u)
        t = take("target", tgt_rows)
        if t is not None:
            out["target"] = (t, t)
        return out

    def store(self, term, src_rows, tgt_rows, res, src_weights, tgt_weights):
        # (f + c, g - c) is the same solution. Extrapolated warm starts let c
        # drift without bound, so it is re-centred once it gets large
        shift = 0.5 * (src_weights @ res.f - tgt_weights @ res.g)
        if abs(shift) <= self.GAUGE_LIMIT * res.epsilon:
            shift = 0.0
        for slot, rows, values in (
            ("cross_f", src_rows, res.f - shift),
            ("cross_g", tgt_rows, res.g + shift),
            ("source", src_rows, res.self_source.f),
            ("target", tgt_rows, res.self_target.f),
        ):
            cur = self._pot.get((term, slot))
            if cur is None:
                cur = self._pot[(term, slot)] = np.zeros(self.n_rows)
                self._prev[(term, slot)] = np.zeros(self.n_rows)
                self._seen[(term, slot)] = np.zeros(self.n_rows, dtype=bool)
            prev, seen = self._prev[(term, slot)], self._seen[(term, slot)]
            # rows solved for the first time have no history to extrapolate from
            prev[rows] = np.where(seen[rows], cur[rows], values)
            cur[rows] = values
            seen[rows] = True
        key = (term, tgt_rows.tobytes())
        self._target_self[key] = res.self_target
        while len(self._target_self) > self.CACHE_SIZE:
            self._target_self.pop(next(iter(self._target_self)))

    def target_self(self, term, tgt_rows):
        return self._target_self.get((term, tgt_rows.tobytes()))


def _resolve_eps(fixed, sk, x, y):
    if fixed is not None:
        return fixed
    if sk.epsilon is not None:
        return sk.epsilon
    scale = _mean_half_sq_dist(x, y)
    return sk.relative_epsilon * scale if scale > 0 else 1.0


def _solve(term, src_cloud, tgt_cloud, eps, sk, st, src_rows, tgt_rows):
    cached = st.target_self(term, tgt_rows) if st is not None else None
    cost = squared_euclidean_cost(src_cloud, tgt_cloud)
    self_costs = (squared_euclidean_cost(src_cloud, src_cloud),
                  None if cached is not None else squared_euclidean_cost(tgt_cloud, tgt_cloud))
    init = st.init(term, src_rows, tgt_rows) if st is not None else None
    used = 0
    for start in (init, None) if init else (None,):
        res = sinkhorn_divergence(src_cloud, tgt_cloud, sk.replace(epsilon=eps), cost=cost,
                                  self_costs=self_costs, init=start, target_self=cached)
        used += res.iters_used
        if res.converged:
            break
    else:
        raise NumericalError(f"{term}-term Sinkhorn did not converge ({used} iterations)")
    if st is not None:
        st.store(term, src_rows, tgt_rows, res, src_cloud.weights, tgt_cloud.weights)
    return res


def lw_loss(editor: AffineEditor, source, target, attr_model: AttributeModel | None,
            cfg: TrainingConfig, *, attribute: int, weights=None, state: _LWState | None = None,
            rows=None, need_grad: bool = True):
    """LW objective value, ``(dW, db)`` gradients and the loss components.

    ``weights`` are source masses (uniform when omitted); zero-mass samples
    are dropped from the edit term. ``state`` pins epsilon and carries warm
    starts between calls; ``rows=(source_rows, target_rows)`` gives the
    dataset row of every sample and is required with ``state``.
    """
    z = np.asarray(source, dtype=float)
    y = np.asarray(target, dtype=float)
    alpha = cfg.alpha_train
    zp, _ = _edit_parts(editor.weight, editor.bias, z, alpha)
    if weights is None:
        weights = np.full(len(z), 1.0 / len(z))
    weights = np.asarray(weights, dtype=float)
    mask = weights > 0
    sk = cfg.sinkhorn
    st = state
    if st is not None:
        if rows is None:
            raise ValueError("rows are required when a state is given")
        src_rows, tgt_rows = (np.asarray(r, dtype=np.intp) for r in rows)
    else:
        src_rows, tgt_rows = np.arange(len(z)), np.arange(len(y))

    src_cloud = WeightedPointCloud(zp[mask], weights[mask] / weights[mask].sum())
    tgt_cloud = WeightedPointCloud.uniform(y)
    eps = _resolve_eps(st.eps_edit if st else None, sk, src_cloud.points, y)
    if st is not None:
        st.eps_edit = eps
    res = _solve("edit", src_cloud, tgt_cloud, eps, sk, st, src_rows[mask], tgt_rows)
    edit_value = res.value
    G = np.zeros_like(z)
    if need_grad:
        G[mask] = gradient_from_result(res, src_cloud.points, y)

    pres_value = 0.0
    if cfg.lambda_ > 0:
        if attr_model is None:
            raise ValueError("lambda_ > 0 needs an attribute model")
        coef, intercept, scale = _others(attr_model, attribute)
        phi_p, dphi = _features(zp, coef, intercept, scale)
        phi, _ = _features(z, coef, intercept, scale)
        eps_p = _resolve_eps(st.eps_pres if st else None, sk, phi, phi)
        if st is not None:
            st.eps_pres = eps_p
        res_p = _solve("pres", WeightedPointCloud.uniform(phi_p), WeightedPointCloud.uniform(phi),
                       eps_p, sk, st, src_rows, src_rows)
        pres_value = res_p.value
        if need_grad:
            G_phi = gradient_from_result(res_p, phi_p, phi)
            G = G + cfg.lambda_ * (G_phi * dphi) @ coef

    loss = edit_value + cfg.lambda_ * pres_value
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite LW loss (edit={edit_value}, pres={pres_value})")
    grads = _chain(G, z, alpha) if need_grad else None
    return loss, grads, {"edit": edit_value, "pres": pres_value, "reg": 0.0}


def lt_loss(editor: AffineEditor, source, attr_model: AttributeModel, cfg: TrainingConfig,
            *, attribute: int, need_grad: bool = True):
    """Classifier-guided objective: cross-entropy toward the target label,
    a paired attribute-preservation term and an L2 penalty on the edit."""
    z = np.asarray(source, dtype=float)
    n = len(z)
    alpha = cfg.alpha_train
    zp, delta = _edit_parts(editor.weight, editor.bias, z, alpha)
    theta = attr_model.coef[attribute]
    s = zp @ theta + attr_model.intercept[attribute]
    goal = 1.0 if cfg.increase else 0.0
    # -log p for goal 1, -log(1 - p) for goal 0
    ce = -log_expit(s) if cfg.increase else -log_expit(-s)
    ce_value = float(ce.mean())
    G = ((expit(s) - goal) / n)[:, None] * theta[None, :]

    pres_value = 0.0
    if cfg.lambda_ > 0:
        coef, intercept, scale = _others(attr_model, attribute)
        phi_p, dphi = _features(zp, coef, intercept, scale)
        phi, _ = _features(z, coef, intercept, scale)
        diff = phi_p - phi
        pres_value = float(0.5 * (diff ** 2).sum(axis=1).mean())
        G = G + cfg.lambda_ * ((diff * dphi) / n) @ coef

    reg_value = 0.0
    if cfg.l2_reg > 0:
        reg_value = float((delta ** 2).sum(axis=1).mean())
        G = G + cfg.l2_reg * 2.0 * delta / n

    loss = ce_value + cfg.lambda_ * pres_value + cfg.l2_reg * reg_value
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite LT loss (ce={ce_value}, pres={pres_value}, reg={reg_value})")
    grads = _chain(G, z, alpha) if need_grad else None
    return loss, grads, {"edit": ce_value, "pres": pres_value, "reg": reg_value}


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _split(rows, val_fraction, rng):
    rows = rng.permutation(rows)
    n_val = max(1, int(round(val_fraction * len(rows))))
    if n_val >= len(rows):
        raise DataError(f"cannot hold out {n_val} of {len(rows)} samples for validation")
    return np.sort(rows[n_val:]), np.sort(rows[:n_val])


def _fixed_epsilon_states(ed, data, src_rows, tgt_rows, weights, attr_model, cfg, k):
    """Training and validation states sharing epsilons fixed at the initial edit.

    Epsilon is resolved once from the mean cost on the full training split so
    the objective does not change scale between batches or epochs.
    """
    sk = cfg.sinkhorn
    z = data.codes[src_rows]
    if weights is not None:
        z = z[weights > 0]
    zp, _ = _edit_parts(ed.weight, ed.bias, z, cfg.alpha_train)
    eps_edit = _resolve_eps(None, sk, zp, data.codes[tgt_rows])
    eps_pres = None
    if cfg.lambda_ > 0:
        coef, intercept, scale = _others(attr_model, k)
        phi, _ = _features(data.codes[src_rows], coef, intercept, scale)
        eps_pres = _resolve_eps(None, sk, phi, phi)
    return (_LWState(data.n, eps_edit, eps_pres), _LWState(data.n, eps_edit, eps_pres))


def train(data: LatentDataset, attribute, cfg: TrainingConfig | None = None,
          attr_model: AttributeModel | None = None, editor: AffineEditor | None = None,
          callback=None):
    """Fit an editor for one attribute; returns ``(editor, report)``.

    Validation loss is evaluated after every epoch on a held-out split of
    both sides; training stops after ``patience`` epochs without improvement
    and the parameters of the best epoch are returned. ``callback(epoch,
    editor, report)`` runs after each epoch with the current parameters.
    """
    cfg = cfg or TrainingConfig()
    k = data.attribute_index(attribute)
    name = data.attribute_names[k]
    rng = np.random.default_rng([cfg.seed, 4])
    source, target = split_source_target(data, k, cfg.increase)
    src_train, src_val = _split(source, cfg.val_fraction, rng)
    tgt_train, tgt_val = _split(target, cfg.val_fraction, rng)

    needs_classifiers = cfg.mode == "lt" or cfg.lambda_ > 0
    if attr_model is None and needs_classifiers:
        attr_model = train_classifiers(data)

    w_train = w_val = None
    if cfg.mode == "lw" and cfg.use_weighting:
        # decrease editors: source/target roles swap, labels stay
        conditioning = list(cfg.conditioning) if cfg.conditioning is not None else \
            default_conditioning(data.labels[np.concatenate([src_train, tgt_train])], k)
        if k in conditioning:
            raise ValueError("conditioning attributes must exclude the edited attribute")
        if conditioning:
            table = combination_weights(data.labels[src_train], data.labels[tgt_train], conditioning)
            w_train = apply_combination_weights(data.labels[src_train], conditioning, table)
            w_val = apply_combination_weights(data.labels[src_val], conditioning, table)

    ed = (editor or init_editor(data.dim, cfg.seed, name)).copy()
    ed.attribute_name = name
    params = [ed.weight, ed.bias]
    opt = _Adam(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = val_state = None
    if cfg.mode == "lw":
        state, val_state = _fixed_epsilon_states(ed, data, src_train, tgt_train, w_train,
                                                 attr_model, cfg, k)

    def objective(z_rows, y_rows, w, st, need_grad):
        if cfg.mode == "lw":
            return lw_loss(ed, data.codes[z_rows], data.codes[y_rows], attr_model, cfg,
                           attribute=k, weights=w, state=st, rows=(z_rows, y_rows),
                           need_grad=need_grad)
        return lt_loss(ed, data.codes[z_rows], attr_model, cfg, attribute=k, need_grad=need_grad)

    def validate():
        loss, _, parts = objective(src_val, tgt_val, w_val, val_state, False)
        return loss, parts

    report = TrainingReport()
    init_val, init_parts = validate()
    report.initial_val_loss = init_val
    report.initial_components = dict(init_parts)
    report.final_components = dict(init_parts)
    if state is not None:
        report.epsilon = {"edit": state.eps_edit, "pres": state.eps_pres}
    best = (init_val, ed.weight.copy(), ed.bias.copy())
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        batches = make_batches(len(src_train), len(tgt_train), rng)
        losses = []
        for si, ti in batches:
            w = None
            if w_train is not None:
                w = w_train[si]
                if w.sum() <= 0:
                    continue
                w = w / w.sum()
            loss, grads, _ = objective(src_train[si], tgt_train[ti], w, state, True)
            opt.step(params, grads)
            losses.append(loss)
        val, parts = validate()
        report.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
        report.val_loss.append(val)
        report.edit_term.append(parts["edit"])
        report.pres_term.append(parts["pres"])
        report.reg_term.append(parts["reg"])
        report.stopped_epoch = epoch
        if callback is not None:
            callback(epoch, ed, report)
        if val < best[0]:
            best = (val, ed.weight.copy(), ed.bias.copy())
            report.best_epoch = epoch
            report.final_components = dict(parts)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break

    ed.weight[...] = best[1]
    ed.bias[...] = best[2]
    ed.training_meta = {
        "mode": cfg.mode,
        "lambda": cfg.lambda_,
        "l2_reg": cfg.l2_reg,
        "epsilon": state.eps_edit if state is not None else None,
        "seed": cfg.seed,
        "epochs_run": report.stopped_epoch,
        "best_epoch": report.best_epoch,
        "increase": cfg.increase,
    }
    return ed, report
