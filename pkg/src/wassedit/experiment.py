"""Benchmark experiments: holdout splits, per-method evaluation and the four-way comparison.

The comparison trains LT and LW each without (``*``) and with the
disentanglement term, every method calibrated to the same oracle change rate before its alpha sweep.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .attributes import AttributeModel, train_classifiers
from .bench import BenchmarkSpec
from .dataset import LatentDataset
from .editor import AffineEditor
from .evaluation import EvalReport, benchmark_oracle, calibrate_d, sweep
from .trainer import TrainingConfig, split_source_target, train

__all__ = [
    "EvalSettings",
    "MethodResult",
    "holdout_split",
    "evaluate_editor",
    "method_configs",
    "compare",
    "write_compare_csv",
    "write_compare_svg",
]


@dataclass(frozen=True)
class EvalSettings:
    flip_target: float = 0.9
    n_alpha: int = 10
    test_fraction: float = 0.25
    shrinkage: float = 1e-3
    split_seed: int = 0

    def __post_init__(self):
        if not 0 < self.flip_target <= 1:
            raise ValueError("flip_target must lie in (0, 1]")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.n_alpha < 1:
            raise ValueError("n_alpha must be >= 1")


def holdout_split(data: LatentDataset, test_fraction: float = 0.25, seed: int = 0):
    """Seeded row split into ``(train, test)`` datasets."""
    rng = np.random.default_rng([seed, 5])
    perm = rng.permutation(data.n)
    n_test = int(round(test_fraction * data.n))
    if not 0 < n_test < data.n:
        raise ValueError(f"test_fraction {test_fraction} leaves an empty side of {data.n} rows")
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def evaluate_editor(editor: AffineEditor, train_data: LatentDataset, test_data: LatentDataset,
                    spec: BenchmarkSpec, attribute: int, settings: EvalSettings | None = None,
                    *, increase: bool = True, judge=None, guidance=None) -> EvalReport:
    """Calibrate ``d`` on the training source codes and sweep on the test source codes.

    ``judge`` decides what counts as a change for calibration (the oracle by
    default); the sweep metrics always use the oracle. The Mahalanobis
    diagnostic is measured against the genuine training target codes.
    """
    settings = settings or EvalSettings()
    oracle = benchmark_oracle(spec)
    desired = 1 if increase else 0
    src_train, tgt_train = split_source_target(train_data, attribute, increase)
    src_test, _ = split_source_target(test_data, attribute, increase)
    # the source side is defined by its labels, so every row starts not-desired
    d = calibrate_d(editor, train_data.codes[src_train], judge or oracle, settings.flip_target,
                    k=attribute, desired=desired, before=train_data.labels[src_train])
    report = sweep(editor, test_data.codes[src_test], spec, d, k=attribute, desired=desired,
                   n_alpha=settings.n_alpha, oracle=oracle,
                   target_codes=train_data.codes[tgt_train], guidance=guidance,
                   shrinkage=settings.shrinkage)
    return report


def method_configs(base: TrainingConfig) -> dict:
    """The four compared methods derived from one base configuration.

    Starred variants drop the disentanglement term (and for LT the L2 term);
    the plain variants use the base ``lambda_``/``l2_reg``.
    """
    return {
        "LT*": base.replace(mode="lt", lambda_=0.0, l2_reg=0.0, use_weighting=False),
        "LW*": base.replace(mode="lw", lambda_=0.0, use_weighting=False),
        "LT": base.replace(mode="lt", l2_reg=base.l2_reg),
        "LW": base.replace(mode="lw"),
    }


@dataclass
class MethodResult:
    name: str
    editor: AffineEditor
    report: EvalReport
    training: object

    def row(self) -> dict:
        means = self.report.means()
        return {
            "method": self.name,
            "d": self.report.d,
            **means,
            "mean_mahalanobis_to_target": self.report.diagnostics.get(
                "mean_mahalanobis_to_target", float("nan")),
            "epochs_run": self.training.stopped_epoch,
        }


COMPARE_COLUMNS = ("method", "d", "target_change_rate", "attribute_preservation_rate",
                   "identity_preservation_rate", "mean_mahalanobis_to_target", "epochs_run")


def compare(data: LatentDataset, spec: BenchmarkSpec, attribute, base: TrainingConfig,
            settings: EvalSettings | None = None,
            attr_model: AttributeModel | None = None) -> list[MethodResult]:
    """Train and evaluate LT*, LW*, LT and LW on a shared holdout split."""
    settings = settings or EvalSettings()
    k = data.attribute_index(attribute)
    train_data, test_data = holdout_split(data, settings.test_fraction, settings.split_seed)
    attr_model = attr_model or train_classifiers(train_data)
    results = []
    for name, cfg in method_configs(base).items():
        editor, training = train(train_data, k, cfg, attr_model)
        report = evaluate_editor(editor, train_data, test_data, spec, k, settings,
                                 increase=cfg.increase)
        results.append(MethodResult(name, editor, report, training))
    return results


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_compare_csv(results, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARE_COLUMNS)
        for res in results:
            row = res.row()
            writer.writerow([_fmt(row[c]) for c in COMPARE_COLUMNS])


def write_compare_svg(results, path) -> None:
    """Attribute preservation against target change over the sweep, one line per method."""
    width, height, pad = 520, 380, 52
    colours = ["#1f5fa8", "#b3471d", "#2e8540", "#6b3fa0"]

    def px(x):
        return pad + x * (width - 2 * pad)

    def py(y):
        return height - pad - y * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 14}" text-anchor="middle" font-size="12">target change</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">attribute preservation</text>',
    ]
    for i, res in enumerate(results):
        colour = colours[i % len(colours)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in
                       zip(res.report.target_change, res.report.attribute_preservation)
                       if np.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{colour}">{res.name}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def settings_from_dict(d: dict) -> EvalSettings:
    fields = {f.name for f in dataclasses.fields(EvalSettings)}
    unknown = set(d) - fields
    if unknown:
        raise ValueError(f"unknown eval settings: {sorted(unknown)}")
    return EvalSettings(**d)
