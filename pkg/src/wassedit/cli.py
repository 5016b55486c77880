"""Command-line entry point.

Every command validates its paths first, writes its artifacts, and records a
``*.manifest.json`` next to them holding the resolved configuration, its
hash, the seeds and the SHA-256 of each input and output file. Failures exit
with a non-zero code and a single JSON line on stderr::

    {"error": "data", "exit_code": 3, "op": "load", "target": "x.lotd", "message": "..."}

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attributes import (
    compute_gamma,
    load_attribute_model,
    save_attribute_model,
    train_classifiers,
)
from .bench import BenchmarkSpec, generate
from .dataset import DataError, LatentDataset, load_csv, load_lotd, save_csv, save_lotd
from .editor import AffineEditor, edit, load_editor, save_editor
from .evaluation import CalibrationError
from .exact import exact_ot_assignment
from .experiment import (
    EvalSettings,
    compare,
    evaluate_editor,
    holdout_split,
    write_compare_csv,
    write_compare_svg,
)
from .sinkhorn import (
    ConvergenceError,
    SinkhornConfig,
    WeightedPointCloud,
    sinkhorn_divergence,
    squared_euclidean_cost,
)
from .trainer import NumericalError, TrainingConfig, train

log = logging.getLogger("wassedit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
_KIND = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERICAL: "numerical"}


class CLIError(Exception):
    def __init__(self, code: int, op: str, target: str, message: str):
        super().__init__(message)
        self.code, self.op, self.target, self.message = code, op, target, message

    def line(self) -> str:
        return json.dumps({"error": _KIND.get(self.code, "error"), "exit_code": self.code,
                           "op": self.op, "target": self.target, "message": self.message},
                          sort_keys=True)


@contextlib.contextmanager
def _stage(op: str, target=""):
    """Translate library exceptions raised inside ``op`` into CLI errors."""
    target = str(target)
    try:
        yield
    except CLIError:
        raise
    except (NumericalError, ConvergenceError, CalibrationError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        raise CLIError(EXIT_NUMERICAL, op, target, str(exc)) from exc
    except (DataError, OSError) as exc:
        raise CLIError(EXIT_DATA, op, target, str(exc)) from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CLIError(EXIT_USAGE if op == "config" else EXIT_DATA, op, target, str(exc)) from exc


# -- configuration ---------------------------------------------------------

_SECTIONS = ("benchmark", "training", "sinkhorn", "eval")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    """Benchmark, training, solver and evaluation settings of one run.

    Parsed from a JSON object with the optional sections ``benchmark``
    (BenchmarkSpec fields), ``training`` (TrainingConfig fields except
    ``sinkhorn``), ``sinkhorn`` (SinkhornConfig fields) and ``eval``
    (EvalSettings fields). Unknown sections or keys are rejected.
    """

    benchmark: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    sinkhorn: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    _ALLOWED = {
        "benchmark": _field_names(BenchmarkSpec),
        "training": _field_names(TrainingConfig) - {"sinkhorn"},
        "sinkhorn": _field_names(SinkhornConfig),
        "eval": _field_names(EvalSettings),
    }

    @classmethod
    def from_dict(cls, doc) -> RunConfig:
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**{s: dict(doc.get(s) or {}) for s in _SECTIONS})
        for section in _SECTIONS:
            cfg._check(section)
        return cfg

    def _check(self, section):
        values = getattr(self, section)
        if not isinstance(values, dict):
            raise ValueError(f"config section {section!r} must be an object")
        unknown = set(values) - self._ALLOWED[section]
        if unknown:
            raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        if section not in _SECTIONS or not key:
            raise ValueError(f"override {dotted!r} must look like section.key "
                             f"with section one of {list(_SECTIONS)}")
        getattr(self, section)[key] = value
        self._check(section)

    def spec(self) -> BenchmarkSpec:
        return BenchmarkSpec.from_dict(self.benchmark)

    def sinkhorn_config(self) -> SinkhornConfig:
        # same solver defaults as TrainingConfig uses
        base = TrainingConfig().sinkhorn
        return base.replace(**self.sinkhorn)

    def training_config(self) -> TrainingConfig:
        kw = dict(self.training)
        if kw.get("conditioning") is not None:
            kw["conditioning"] = tuple(kw["conditioning"])
        return TrainingConfig(sinkhorn=self.sinkhorn_config(), **kw)

    def eval_settings(self) -> EvalSettings:
        return EvalSettings(**self.eval)

    def resolved(self) -> dict:
        """Every setting with defaults filled in; the basis of the config hash."""
        train_cfg = dataclasses.asdict(self.training_config())
        sk = train_cfg.pop("sinkhorn")
        return {"benchmark": self.spec().to_dict(), "training": train_cfg, "sinkhorn": sk,
                "eval": dataclasses.asdict(self.eval_settings())}


def _canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, np.ndarray)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(args) -> RunConfig:
    path = getattr(args, "config", None)
    with _stage("config", path or "<defaults>"):
        doc = {}
        if path:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ValueError(f"invalid JSON ({exc})") from exc
        cfg = RunConfig.from_dict(doc)
        for item in getattr(args, "set", None) or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(key.strip(), _parse_value(value))
        if getattr(args, "seed", None) is not None:
            cfg.benchmark["seed"] = args.seed
            cfg.training["seed"] = args.seed
        if getattr(args, "mode", None) is not None:
            cfg.training["mode"] = args.mode
        if getattr(args, "lambda_", None) is not None:
            cfg.training["lambda_"] = args.lambda_
        if getattr(args, "l2_reg", None) is not None:
            cfg.training["l2_reg"] = args.l2_reg
        if getattr(args, "weighting", None) is not None:
            cfg.training["use_weighting"] = args.weighting == "on"
        if getattr(args, "epsilon", None) is not None:
            cfg.sinkhorn["epsilon"] = args.epsilon
        # build every object once so invalid values fail before any work
        cfg.resolved()
    return cfg


# -- files -----------------------------------------------------------------

def _require_input(path, op):
    p = Path(path)
    if not p.is_file():
        raise CLIError(EXIT_DATA, op, str(path), "input file does not exist")
    if not os.access(p, os.R_OK):
        raise CLIError(EXIT_DATA, op, str(path), "input file is not readable")


def _require_output(path, op, directory=False):
    p = Path(path)
    parent = p if directory and p.exists() else p.parent
    if directory and p.exists() and not p.is_dir():
        raise CLIError(EXIT_DATA, op, str(path), "output path exists and is not a directory")
    if not directory and p.is_dir():
        raise CLIError(EXIT_DATA, op, str(path), "output path is a directory")
    parent = parent if str(parent) else Path(".")
    if not parent.is_dir():
        raise CLIError(EXIT_DATA, op, str(path), f"directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise CLIError(EXIT_DATA, op, str(path), f"directory {parent} is not writable")


def _is_csv(path) -> bool:
    return str(path).lower().endswith(".csv")


def load_dataset(path) -> LatentDataset:
    with _stage("load", path):
        return load_csv(path) if _is_csv(path) else load_lotd(path)


def save_dataset(data: LatentDataset, path) -> None:
    with _stage("save", path):
        (save_csv if _is_csv(path) else save_lotd)(data, path)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, cfg: RunConfig | None, inputs, outputs, seeds=None,
                   extra=None) -> None:
    doc = {"command": command, "version": __version__}
    if cfg is not None:
        resolved = cfg.resolved()
        doc["config"] = resolved
        doc["config_hash"] = hashlib.sha256(_canonical(resolved).encode()).hexdigest()
        doc["seeds"] = {
            "benchmark": resolved["benchmark"]["seed"],
            "training": resolved["training"]["seed"],
            "split": resolved["eval"]["split_seed"],
        }
    if seeds is not None:
        doc["seeds"] = seeds
    doc["inputs"] = {Path(p).name: _sha256(p) for p in inputs}
    doc["outputs"] = {Path(p).name: _sha256(p) for p in outputs}
    if extra:
        doc.update(extra)
    with _stage("save", path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(json.loads(_canonical(doc)), indent=1, sort_keys=True) + "\n")


def _manifest_path(out) -> Path:
    return Path(str(out) + ".manifest.json")


def _emit(doc) -> None:
    print(_canonical(doc))


def _oracle_spec(data: LatentDataset, cfg: RunConfig, path) -> BenchmarkSpec:
    """Ground-truth spec of a benchmark file, falling back to the config's section."""
    stored = data.meta.get("spec")
    with _stage("config", path):
        if stored:
            spec = BenchmarkSpec.from_dict(stored)
        elif cfg.benchmark:
            spec = cfg.spec()
        else:
            raise ValueError("dataset carries no benchmark spec; give one under 'benchmark'")
        if spec.dim != data.dim or spec.K != data.K:
            raise ValueError(f"benchmark spec (dim={spec.dim}, K={spec.K}) does not match "
                             f"the dataset (dim={data.dim}, K={data.K})")
    return spec


def _attribute(data: LatentDataset, value, path) -> int:
    with _stage("attribute", path):
        if value is None:
            raise ValueError("--attribute is required")
        return data.attribute_index(int(value) if str(value).isdigit() else value)


def _sibling(out, suffix) -> Path:
    p = Path(out)
    return p.with_name(p.stem + suffix)


# -- commands --------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_run_config(args)
    _require_output(args.out, "gen")
    with _stage("config", args.config or "<defaults>"):
        spec = cfg.spec()
    with _stage("gen", args.out):
        data = generate(spec)
    save_dataset(data, args.out)
    write_manifest(_manifest_path(args.out), "gen", cfg, [], [args.out])
    _emit({"n": data.n, "dim": data.dim, "K": data.K,
           "gamma": np.round(compute_gamma(data.labels), 6).tolist()})
    return EXIT_OK


def cmd_train_classifiers(args) -> int:
    cfg = load_run_config(args)
    _require_input(args.data, "load")
    _require_output(args.out, "train-classifiers")
    data = load_dataset(args.data)
    with _stage("train-classifiers", args.data):
        model = train_classifiers(data, seed=cfg.training_config().seed)
    with _stage("save", args.out):
        save_attribute_model(model, args.out)
    write_manifest(_manifest_path(args.out), "train-classifiers", cfg, [args.data], [args.out])
    acc = (model.predict_proba(data.codes) > 0.5) == (data.labels > 0)
    _emit({"attributes": model.attribute_names, "train_accuracy": acc.mean(axis=0).tolist()})
    return EXIT_OK


def cmd_train_editor(args) -> int:
    cfg = load_run_config(args)
    _require_input(args.data, "load")
    if args.classifiers:
        _require_input(args.classifiers, "load")
    _require_output(args.out, "train-editor")
    data = load_dataset(args.data)
    k = _attribute(data, args.attribute, args.data)
    attr_model = None
    if args.classifiers:
        with _stage("load", args.classifiers):
            attr_model = load_attribute_model(args.classifiers)
            if attr_model.dim != data.dim or attr_model.K != data.K:
                raise DataError("classifier bundle does not match the dataset dimensions")
    with _stage("config", args.config or "<defaults>"):
        train_cfg = cfg.training_config()
    with _stage("train-editor", args.data):
        editor, report = train(data, k, train_cfg, attr_model)
    with _stage("save", args.out):
        save_editor(editor, args.out)
        history = _sibling(args.out, ".history.csv")
        report.to_csv(history)
    inputs = [args.data] + ([args.classifiers] if args.classifiers else [])
    write_manifest(_manifest_path(args.out), "train-editor", cfg, inputs, [args.out, history])
    _emit({"attribute": editor.attribute_name, "epochs_run": report.stopped_epoch,
           "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss})
    return EXIT_OK


def _load_editor(path, data: LatentDataset) -> AffineEditor:
    with _stage("load", path):
        editor = load_editor(path)
        if editor.dim != data.dim:
            raise DataError(f"editor dim {editor.dim} does not match dataset dim {data.dim}")
    return editor


def cmd_edit(args) -> int:
    _require_input(args.data, "load")
    models = args.model
    for m in models:
        _require_input(m, "load")
    _require_output(args.out, "edit")
    data = load_dataset(args.data)
    codes = data.codes
    # several editors compose by sequential application
    for m in models:
        codes = edit(_load_editor(m, data), codes, args.alpha)
    if not np.all(np.isfinite(codes)):
        raise CLIError(EXIT_NUMERICAL, "edit", args.out, "edited codes are not finite")
    edited = LatentDataset(codes, data.labels, data.identity, list(data.attribute_names),
                           dict(data.meta))
    save_dataset(edited, args.out)
    write_manifest(_manifest_path(args.out), "edit", None, [args.data, *models], [args.out],
                   extra={"alpha": args.alpha})
    _emit({"n": edited.n, "alpha": args.alpha, "editors": len(models)})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    _require_input(args.model, "load")
    _require_input(args.data, "load")
    _require_output(args.out, "eval")
    data = load_dataset(args.data)
    editor = _load_editor(args.model, data)
    spec = _oracle_spec(data, cfg, args.data)
    attr = args.attribute if args.attribute is not None else editor.attribute_name
    k = _attribute(data, attr, args.model)
    with _stage("config", args.config or "<defaults>"):
        settings = cfg.eval_settings()
    with _stage("eval", args.data):
        train_data, test_data = holdout_split(data, settings.test_fraction, settings.split_seed)
        report = evaluate_editor(editor, train_data, test_data, spec, k, settings,
                                 increase=bool(editor.training_meta.get("increase", True)))
    js, svg = _sibling(args.out, ".json"), _sibling(args.out, ".svg")
    with _stage("save", args.out):
        report.to_csv(args.out)
        report.to_json(js)
        report.to_svg(svg, title=editor.attribute_name)
    write_manifest(_manifest_path(args.out), "eval", cfg, [args.model, args.data],
                   [args.out, js, svg])
    _emit({"d": report.d, **report.means()})
    return EXIT_OK


def _clouds(args):
    for p in (args.a, args.b):
        _require_input(p, "load")
    a, b = load_dataset(args.a), load_dataset(args.b)
    if a.dim != b.dim:
        raise CLIError(EXIT_DATA, "load", args.b, f"dim {b.dim} does not match {args.a} dim {a.dim}")
    return WeightedPointCloud.uniform(a.codes), WeightedPointCloud.uniform(b.codes)


def cmd_sinkhorn(args) -> int:
    cfg = load_run_config(args)
    src, tgt = _clouds(args)
    with _stage("config", args.config or "<defaults>"):
        sk = cfg.sinkhorn_config()
    with _stage("sinkhorn", args.a):
        res = sinkhorn_divergence(src, tgt, sk)
        if not res.converged:
            raise ConvergenceError(f"not converged after {res.iters_used} iterations")
        cost = squared_euclidean_cost(src, tgt)
        ot_cost = float((res.plan * cost).sum())
    _emit({"divergence": res.value, "ot_cost": ot_cost, "epsilon": res.epsilon,
           "iters_used": res.iters_used, "converged": bool(res.converged)})
    return EXIT_OK


def cmd_oracle(args) -> int:
    src, tgt = _clouds(args)
    with _stage("oracle", args.a):
        res = exact_ot_assignment(src, tgt)
    _emit({"value": res.value, "method": res.method, "n": src.n})
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_run_config(args)
    _require_input(args.data, "load")
    _require_output(args.out, "compare", directory=True)
    data = load_dataset(args.data)
    k = _attribute(data, args.attribute, args.data)
    spec = _oracle_spec(data, cfg, args.data)
    with _stage("config", args.config or "<defaults>"):
        base, settings = cfg.training_config(), cfg.eval_settings()
    with _stage("compare", args.data):
        results = compare(data, spec, k, base, settings)
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    csv_path, svg_path = out / "compare.csv", out / "compare.svg"
    written = [csv_path, svg_path]
    with _stage("save", out):
        write_compare_csv(results, csv_path)
        write_compare_svg(results, svg_path)
        for res in results:
            stem = res.name.replace("*", "_star")
            report_path = out / f"report_{stem}.csv"
            editor_path = out / f"editor_{stem}.json"
            res.report.to_csv(report_path)
            save_editor(res.editor, editor_path)
            written += [report_path, editor_path]
    write_manifest(out / "manifest.json", "compare", cfg, [args.data], written)
    _emit({"methods": [r.row() for r in results]})
    return EXIT_OK


# -- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CLIError(EXIT_USAGE, "parse", self.prog, message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (value parsed as JSON when possible)")
    common.add_argument("--seed", type=int, help="seed for benchmark generation and training")

    training = _Parser(add_help=False)
    training.add_argument("--mode", choices=("lw", "lt"))
    training.add_argument("--lambda", dest="lambda_", type=float, help="preservation weight")
    training.add_argument("--l2-reg", dest="l2_reg", type=float, help="L2 penalty (LT)")
    training.add_argument("--epsilon", type=float, help="Sinkhorn epsilon")
    training.add_argument("--weighting", choices=("on", "off"), help="source weighting (LW)")

    parser = _Parser(prog="wassedit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a benchmark dataset")
    p.add_argument("--out", required=True, help=".lotd (binary) or .csv")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-classifiers", parents=[common], help="fit latent classifiers")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifiers)

    p = sub.add_parser("train-editor", parents=[common, training], help="fit an editor")
    p.add_argument("data")
    p.add_argument("--attribute", required=True, help="index or name")
    p.add_argument("--classifiers", help="classifier bundle from train-classifiers")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_editor)

    p = sub.add_parser("edit", help="apply editors to a dataset")
    p.add_argument("model", nargs="+", help="editor file(s), applied in order")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", parents=[common], help="calibrate d and run the alpha sweep")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--attribute", help="defaults to the editor's attribute")
    p.add_argument("--out", required=True, help="CSV report; JSON and SVG are written alongside")
    p.set_defaults(func=cmd_eval)

    for name, func, doc in (("sinkhorn", cmd_sinkhorn, "Sinkhorn divergence of two files"),
                            ("oracle", cmd_oracle, "exact OT between two equal-size files")):
        p = sub.add_parser(name, parents=[common] if name == "sinkhorn" else [], help=doc)
        p.add_argument("a")
        p.add_argument("b")
        if name == "sinkhorn":
            p.add_argument("--epsilon", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("compare", parents=[common, training], help="LT*, LW*, LT and LW")
    p.add_argument("data")
    p.add_argument("--attribute", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CLIError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
