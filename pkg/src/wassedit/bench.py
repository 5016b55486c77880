"""Synthetic latent benchmarks with known attribute and identity structure.

Codes are built as ``sum_k s_k * (separation / 2) * dir_k + U @ xi + noise``
with orthonormal attribute axes ``dir_k`` and an identity basis ``U`` spanning
a subspace orthogonal to every attribute axis. Because the structure is
exact, attribute change and identity preservation can be measured with
oracles instead of learned predictors.

The ``"count"`` layout mimics a number-of-objects attribute: one axis holds
``K + 1`` ordered clusters and attribute ``j`` means "count >= j + 2", i.e.
nested half-spaces along that single axis.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass

import numpy as np

from .attributes import LogisticModel, fit_logistic
from .dataset import LatentDataset

__all__ = [
    "BenchmarkSpec",
    "generate",
    "oracle_attribute",
    "oracle_identity_similarity",
    "misspecified_classifier",
    "boundary_angle",
    "toy_decode",
]

LAYOUTS = ("independent", "count")
# relative rounding allowance of the oracle projection
ROUNDOFF = 64 * np.finfo(float).eps


@dataclass(frozen=True)
class BenchmarkSpec:
    dim: int = 32
    K: int = 4
    n: int = 4000
    separation: float = 6.0
    identity_dim: int = 16
    noise: float = 0.5
    # (l, k, strength): correlate the sign draws of attributes l and k
    bias: tuple | None = None
    # std of the isotropic jitter applied to codes seen by the
    # mis-specified guidance classifier
    margin_noise: float = 0.5
    seed: int = 0
    layout: str = "independent"
    attribute_names: tuple | None = None

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.dim < 1 or self.n < 2:
            raise ValueError("dim must be >= 1 and n >= 2")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.identity_dim < 0:
            raise ValueError("identity_dim must be >= 0")
        n_axes = 1 if self.layout == "count" else self.K
        if n_axes + self.identity_dim > self.dim:
            raise ValueError(
                f"{n_axes} attribute axes + identity_dim {self.identity_dim} exceed dim {self.dim}"
            )
        if self.separation <= 0 or self.noise < 0 or self.margin_noise < 0:
            raise ValueError("separation must be positive; noise and margin_noise non-negative")
        if self.bias is not None:
            if len(self.bias) != 3:
                raise ValueError("bias must be (l, k, strength)")
            l, k, strength = self.bias
            if self.layout == "count":
                raise ValueError("bias is not supported for the count layout")
            if not (0 <= int(l) < self.K and 0 <= int(k) < self.K and int(l) != int(k)):
                raise ValueError(f"bias attributes {l}, {k} invalid for K={self.K}")
            if not -1 <= float(strength) <= 1:
                raise ValueError("bias strength must lie in [-1, 1]")
            object.__setattr__(self, "bias", (int(l), int(k), float(strength)))
        if self.attribute_names is not None:
            if len(self.attribute_names) != self.K:
                raise ValueError("attribute_names must have K entries")
            object.__setattr__(self, "attribute_names", tuple(self.attribute_names))

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSpec:
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown benchmark fields: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("bias") is not None:
            kw["bias"] = tuple(kw["bias"])
        if kw.get("attribute_names") is not None:
            kw["attribute_names"] = tuple(kw["attribute_names"])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["bias"] is not None:
            d["bias"] = list(d["bias"])
        if d["attribute_names"] is not None:
            d["attribute_names"] = list(d["attribute_names"])
        return d

    def names(self) -> list[str]:
        if self.attribute_names is not None:
            return list(self.attribute_names)
        if self.layout == "count":
            return [f"count_ge_{k + 2}" for k in range(self.K)]
        return [f"attr{k}" for k in range(self.K)]

    @functools.cached_property
    def _basis(self):
        rng = np.random.default_rng([self.seed, 0])
        n_axes = 1 if self.layout == "count" else self.K
        draws = rng.standard_normal((self.dim, n_axes + self.identity_dim))
        q, r = np.linalg.qr(draws)
        # fix column signs so the basis does not depend on LAPACK conventions
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        axes = q[:, :n_axes].T
        identity_basis = q[:, n_axes:].T
        if self.layout == "count":
            axes = np.repeat(axes, self.K, axis=0)
        return axes, identity_basis

    @property
    def attribute_directions(self) -> np.ndarray:
        """``(K, dim)``; orthonormal rows except in the count layout (shared axis)."""
        return self._basis[0]

    @property
    def identity_basis(self) -> np.ndarray:
        """``(identity_dim, dim)`` orthonormal rows, orthogonal to every attribute axis."""
        return self._basis[1]

    @property
    def offsets(self) -> np.ndarray:
        """Oracle thresholds along each attribute axis."""
        if self.layout == "count":
            centre = (self.K + 2) / 2.0
            return (np.arange(self.K) + 1.5 - centre) * self.separation
        return np.zeros(self.K)


def _draw_signs(spec: BenchmarkSpec, rng) -> np.ndarray:
    signs = rng.choice([-1.0, 1.0], size=(spec.n, spec.K))
    if spec.bias is not None:
        l, k, strength = spec.bias
        # P(s_k == s_l) = (1 + strength) / 2 gives corr(s_l, s_k) = strength
        agree = rng.random(spec.n) < (1.0 + abs(strength)) / 2.0
        coupled = np.where(agree, signs[:, l], -signs[:, l])
        signs[:, k] = coupled if strength >= 0 else -coupled
    return signs


def generate(spec: BenchmarkSpec) -> LatentDataset:
    rng = np.random.default_rng([spec.seed, 1])
    axes, identity_basis = spec.attribute_directions, spec.identity_basis
    if spec.layout == "count":
        count = rng.integers(1, spec.K + 2, size=spec.n)
        centre = (spec.K + 2) / 2.0
        position = (count - centre) * spec.separation
        signal = position[:, None] * axes[0][None, :]
        labels = (count[:, None] >= np.arange(spec.K)[None, :] + 2).astype(np.uint8)
    else:
        signs = _draw_signs(spec, rng)
        signal = (signs * (spec.separation / 2.0)) @ axes
        labels = ((signs + 1) / 2).astype(np.uint8)
    xi = rng.standard_normal((spec.n, spec.identity_dim))
    codes = signal + xi @ identity_basis + spec.noise * rng.standard_normal((spec.n, spec.dim))
    return LatentDataset(
        codes=codes,
        labels=labels,
        identity=xi,
        attribute_names=spec.names(),
        meta={"spec": spec.to_dict()},
    )


def oracle_attribute(spec: BenchmarkSpec, codes) -> np.ndarray:
    """Ground-truth labels: attribute ``k`` is present iff ``<z, dir_k> > offset_k``.

    The comparison is strict up to the rounding error of the projection, so a
    code lying exactly on a boundary (e.g. one purely in the identity
    subspace) reads as absent.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    if codes.shape[1] != spec.dim:
        raise ValueError(f"codes have dim {codes.shape[1]}, benchmark has {spec.dim}")
    roundoff = ROUNDOFF * np.linalg.norm(codes, axis=1, keepdims=True)
    return (codes @ spec.attribute_directions.T - spec.offsets[None, :] > roundoff).astype(np.uint8)


def oracle_identity_similarity(spec: BenchmarkSpec, codes_before, codes_after,
                               return_degenerate: bool = False):
    """Cosine similarity between identity-subspace projections, row by row.

    Rows whose projection has zero norm get similarity 0; pass
    ``return_degenerate=True`` to also receive the boolean mask of such rows.
    """
    before = np.atleast_2d(np.asarray(codes_before, dtype=float))
    after = np.atleast_2d(np.asarray(codes_after, dtype=float))
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    p = before @ spec.identity_basis.T
    q = after @ spec.identity_basis.T
    norms = np.linalg.norm(p, axis=1) * np.linalg.norm(q, axis=1)
    degenerate = norms == 0
    sims = np.zeros(before.shape[0])
    ok = ~degenerate
    sims[ok] = np.einsum("ij,ij->i", p[ok], q[ok]) / norms[ok]
    sims = np.clip(sims, -1.0, 1.0)
    if return_degenerate:
        return sims, degenerate
    return sims


def misspecified_classifier(spec: BenchmarkSpec, train_fraction: float = 0.02,
                            seed: int = 0, attribute: int = 0,
                            data: LatentDataset | None = None) -> LogisticModel:
    """Logistic classifier for one attribute whose boundary deviates from ground truth.

    It is fitted on a ``train_fraction`` subsample whose codes are jittered
    with isotropic noise of standard deviation ``margin_noise``,
    so its normal tilts away from the true axis by an amount controlled by
    the subsample size and the jitter.
    """
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must lie in (0, 1]")
    if data is None:
        data = generate(spec)
    rng = np.random.default_rng([seed, 2])
    m = max(2, int(round(train_fraction * data.n)))
    rows = np.sort(rng.choice(data.n, size=m, replace=False))
    y = data.labels[rows, attribute].astype(float)
    if y.min() == y.max():
        raise ValueError(
            f"subsample of {m} rows has a single label for attribute {attribute}"
        )
    x = data.codes[rows]
    if spec.margin_noise > 0:
        x = x + spec.margin_noise * rng.standard_normal(x.shape)
    return fit_logistic(x, y)


def boundary_angle(spec: BenchmarkSpec, model: LogisticModel, attribute: int = 0) -> float:
    """Angle in degrees between a classifier's normal and the true attribute axis."""
    w = np.asarray(model.coef, dtype=float)
    axis = spec.attribute_directions[attribute]
    cos = abs(w @ axis) / np.linalg.norm(w)
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@functools.lru_cache(maxsize=8)
def _decoder(dim: int):
    rng = np.random.default_rng(20220)
    return rng.standard_normal((dim, 64)) / np.sqrt(dim)


def toy_decode(codes) -> np.ndarray:
    """Deterministic linear map to 8x8 grayscale images in [0, 1]."""
    codes = np.atleast_2d(np.asarray(codes, dtype=float))
    pixels = 0.5 + 0.05 * codes @ _decoder(codes.shape[1])
    return np.clip(pixels, 0.0, 1.0).reshape(-1, 8, 8)
