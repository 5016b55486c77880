"""Editing metrics, the alpha sweep with d-calibration, and failure diagnostics.

Attribute labels are judged by an *oracle*: any callable mapping codes to
binary labels, either one column per attribute or a single column for the
edited attribute. On the synthetic benchmark the ground-truth oracle is
``benchmark_oracle(spec)``; ``classifier_judge`` turns a latent classifier
into the same shape of callable, which is how claimed changes are measured.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .bench import BenchmarkSpec, oracle_attribute, oracle_identity_similarity
from .editor import AffineEditor, edit

__all__ = [
    "CalibrationError",
    "EvalReport",
    "target_change_rate",
    "attribute_preservation_rate",
    "identity_preservation_rate",
    "benchmark_oracle",
    "classifier_judge",
    "calibrate_d",
    "sweep",
    "ood_score",
    "adversarial_rate",
]

THRESHOLD = 0.5
N_ALPHA = 10
ALPHA_MAX = 100.0
ALPHA_TOL = 1e-3
SHRINKAGE = 1e-3
CALIBRATION_GRID = 200


class CalibrationError(ValueError):
    """The requested change rate cannot be reached within the alpha range."""


def _binary(labels) -> np.ndarray:
    arr = np.asarray(labels, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr > THRESHOLD


def _column(labels, k) -> np.ndarray:
    arr = _binary(labels)
    return arr[:, 0] if arr.shape[1] == 1 else arr[:, k]


def target_change_rate(before_attrs, after_attrs, k: int, desired: int = 1) -> float:
    """Fraction of rows whose attribute ``k`` went from not-``desired`` to ``desired``.

    Either side may be a full label matrix or the single column of ``k``.
    """
    before, after = _column(before_attrs, k), _column(after_attrs, k)
    if before.shape != after.shape:
        raise ValueError(f"row count mismatch: {before.shape[0]} vs {after.shape[0]}")
    if before.shape[0] == 0:
        return 0.0
    want = bool(desired)
    return float(((before != want) & (after == want)).mean())


def attribute_preservation_rate(before_attrs, after_attrs, k: int) -> float:
    """Mean fraction of the non-``k`` attributes left unchanged, after binarizing at 0.5."""
    before, after = _binary(before_attrs), _binary(after_attrs)
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {before.shape} vs {after.shape}")
    K = before.shape[1]
    if K < 2:
        raise ValueError("attribute preservation needs at least two attributes")
    keep = [j for j in range(K) if j != k]
    return float((before[:, keep] == after[:, keep]).mean())


def identity_preservation_rate(spec: BenchmarkSpec, before_codes, after_codes) -> float:
    return float(oracle_identity_similarity(spec, before_codes, after_codes).mean())


def benchmark_oracle(spec: BenchmarkSpec):
    def oracle(codes):
        return oracle_attribute(spec, codes)

    return oracle


def classifier_judge(model):
    """Oracle-shaped callable from anything with ``predict_proba(codes)``."""

    def judge(codes):
        return (np.asarray(model.predict_proba(codes)) > THRESHOLD).astype(np.uint8)

    return judge


def calibrate_d(editor: AffineEditor, val_codes, oracle, flip_target: float = 0.9, *,
                k: int = 0, desired: int = 1, before=None, alpha_max: float = ALPHA_MAX,
                tol: float = ALPHA_TOL, grid: int = CALIBRATION_GRID) -> float:
    """Smallest alpha (to ``tol``) whose change rate on ``val_codes`` reaches ``flip_target``.

    ``before`` holds the labels of ``val_codes`` prior to editing (the
    judge's own verdicts when omitted). The rate is first scanned on a
    ``grid``-point grid over ``(0, alpha_max]`` and then refined by bisection
    inside the first grid cell that reaches the target; for rates that are
    non-decreasing in alpha, as on the benchmark, this is plain bisection.
    """
    if not 0 < flip_target <= 1:
        raise ValueError(f"flip_target must lie in (0, 1], got {flip_target}")
    codes = np.atleast_2d(np.asarray(val_codes, dtype=float))
    before = oracle(codes) if before is None else before

    def rate(alpha):
        return target_change_rate(before, oracle(edit(editor, codes, alpha)), k, desired)

    lo = 0.0
    best = 0.0
    for hi in np.linspace(0.0, alpha_max, grid + 1)[1:]:
        r = rate(float(hi))
        if r >= flip_target:
            break
        best = max(best, r)
        lo = float(hi)
    else:
        raise CalibrationError(
            f"change rate never reaches flip_target {flip_target} for alpha in "
            f"(0, {alpha_max:g}]; max achieved {best:.4f}"
        )
    hi = float(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rate(mid) >= flip_target:
            hi = mid
        else:
            lo = mid
    return hi


def ood_score(edited_codes, target_codes, shrinkage: float = SHRINKAGE) -> float:
    """Mean Mahalanobis distance of edited codes under the target's Gaussian fit.

    The covariance is shrunk by ``shrinkage * trace / dim`` on the diagonal.
    """
    x = np.atleast_2d(np.asarray(edited_codes, dtype=float))
    t = np.atleast_2d(np.asarray(target_codes, dtype=float))
    if x.shape[1] != t.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {t.shape[1]}")
    dim = t.shape[1]
    mu = t.mean(axis=0)
    cov = np.cov(t, rowvar=False).reshape(dim, dim) if len(t) > 1 else np.zeros((dim, dim))
    ridge = shrinkage * np.trace(cov) / dim
    if not ridge > 0:
        # a single point or a collapsed target: fall back to a unit-scale ridge
        ridge = shrinkage
    chol = np.linalg.cholesky(cov + ridge * np.eye(dim))
    white = np.linalg.solve(chol, (x - mu).T)
    return float(np.sqrt((white ** 2).sum(axis=0)).mean())


def adversarial_rate(edited_codes, guidance, oracle, k: int = 0, desired: int = 1) -> float:
    """Fraction of codes the guidance judge calls ``desired`` while the oracle does not."""
    codes = np.atleast_2d(np.asarray(edited_codes, dtype=float))
    judge = guidance if callable(guidance) else classifier_judge(guidance)
    want = bool(desired)
    claimed = _column(judge(codes), k) == want
    actual = _column(oracle(codes), k) == want
    return float((claimed & ~actual).mean())


@dataclass
class EvalReport:
    attribute: int
    d: float
    alphas: list = field(default_factory=list)
    target_change: list = field(default_factory=list)
    attribute_preservation: list = field(default_factory=list)
    identity_preservation: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    COLUMNS = ("alpha", "target_change_rate", "attribute_preservation_rate",
               "identity_preservation_rate")

    def means(self) -> dict:
        return {
            "target_change_rate": float(np.mean(self.target_change)),
            "attribute_preservation_rate": float(np.mean(self.attribute_preservation)),
            "identity_preservation_rate": float(np.mean(self.identity_preservation)),
        }

    def rows(self):
        return list(zip(self.alphas, self.target_change, self.attribute_preservation,
                        self.identity_preservation))

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "d": self.d,
            "rows": [dict(zip(self.COLUMNS, map(float, row))) for row in self.rows()],
            "means": self.means(),
            "diagnostics": {key: _json_float(v) for key, v in self.diagnostics.items()},
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def to_csv(self, path) -> None:
        means = self.means()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for row in self.rows():
                writer.writerow([_fmt(v) for v in row])
            writer.writerow(["mean"] + [_fmt(means[c]) for c in self.COLUMNS[1:]])

    def to_svg(self, path, title: str = "") -> None:
        """Preservation rates against target change, one polyline per metric."""
        width, height, pad = 480, 360, 48
        curves = [("attribute preservation", self.attribute_preservation, "#1f5fa8"),
                  ("identity preservation", self.identity_preservation, "#b3471d")]

        def px(x):
            return pad + x * (width - 2 * pad)

        def py(y):
            # identity preservation can be negative; the axis spans [-1, 1]
            return height - pad - (y + 1) / 2 * (height - 2 * pad)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
            f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">target change</text>',
            f'<text x="{pad}" y="{pad - 16}" font-size="12">{escape(title)}</text>',
        ]
        for i, (label, ys, colour) in enumerate(curves):
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(self.target_change, ys)
                           if math.isfinite(y))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
            parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
                         f'font-size="11" fill="{colour}">{label}</text>')
        parts.append("</svg>")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(parts) + "\n")


def _fmt(v) -> str:
    return repr(float(v))


def _json_float(v):
    return None if v is None else float(v)


def sweep(editor: AffineEditor, test_codes, spec: BenchmarkSpec, d: float, *, k: int = 0,
          desired: int = 1, n_alpha: int = N_ALPHA, oracle=None, target_codes=None,
          guidance=None, shrinkage: float = SHRINKAGE) -> EvalReport:
    """All three metrics at ``n_alpha`` equally spaced strengths in ``[d, 2d]``.

    Diagnostics are taken at ``alpha = d``: the oracle change rate, the
    Mahalanobis score against ``target_codes`` and, given a ``guidance``
    judge, its claimed rate and the adversarial rate.
    """
    if d < 0:
        raise ValueError(f"d must be non-negative, got {d}")
    oracle = oracle or benchmark_oracle(spec)
    codes = np.atleast_2d(np.asarray(test_codes, dtype=float))
    before = oracle(codes)
    multi = _binary(before).shape[1] >= 2
    report = EvalReport(attribute=k, d=float(d))
    for alpha in np.linspace(d, 2 * d, n_alpha):
        moved = edit(editor, codes, float(alpha))
        after = oracle(moved)
        report.alphas.append(float(alpha))
        report.target_change.append(target_change_rate(before, after, k, desired))
        report.attribute_preservation.append(
            attribute_preservation_rate(before, after, k) if multi else float("nan")
        )
        report.identity_preservation.append(identity_preservation_rate(spec, codes, moved))
    at_d = edit(editor, codes, float(d))
    report.diagnostics["actual_change_at_d"] = target_change_rate(before, oracle(at_d), k, desired)
    if target_codes is not None:
        report.diagnostics["mean_mahalanobis_to_target"] = ood_score(at_d, target_codes, shrinkage)
    if guidance is not None:
        judge = guidance if callable(guidance) else classifier_judge(guidance)
        want = bool(desired)
        report.diagnostics["claimed_at_d"] = float((_column(judge(at_d), k) == want).mean())
        report.diagnostics["adversarial_rate"] = adversarial_rate(at_d, judge, oracle, k, desired)
    return report
