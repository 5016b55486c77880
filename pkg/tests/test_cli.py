import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from wassedit import __version__
from wassedit.bench import BenchmarkSpec, generate
from wassedit.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from wassedit.dataset import LatentDataset, load_lotd, save_csv, save_lotd

SMALL = ["--set", "benchmark.n=300", "--set", "benchmark.dim=8", "--set", "benchmark.K=2",
         "--set", "benchmark.identity_dim=4"]
FAST = ["--set", "training.max_epochs=3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def bench_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "small.lotd"
    assert main(["gen", *SMALL, "--out", str(path)]) == EXIT_OK
    return path


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_gen_prints_summary_and_manifest(tmp_path, capsys):
    out = tmp_path / "d.lotd"
    code, stdout, _ = run(capsys, "gen", *SMALL, "--seed", 3, "--out", out)
    assert code == EXIT_OK
    summary = json.loads(stdout)
    assert (summary["n"], summary["dim"], summary["K"]) == (300, 8, 2)
    assert len(summary["gamma"]) == 2
    manifest = json.loads((tmp_path / "d.lotd.manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["version"] == __version__
    assert manifest["seeds"]["benchmark"] == 3 and manifest["seeds"]["training"] == 3
    assert manifest["outputs"]["d.lotd"] == _digest(out)
    assert len(manifest["config_hash"]) == 64


def test_gen_default_file_size(tmp_path, capsys):
    out = tmp_path / "default.lotd"
    assert run(capsys, "gen", "--out", out)[0] == EXIT_OK
    raw = out.read_bytes()
    # 24-byte header, float32 codes, uint8 labels, float32 identity, JSON trailer
    payload_end = 24 + 4000 * 32 * 4 + 4000 * 4 + 4000 * 16 * 4
    trailer = json.loads(raw[payload_end:])
    assert trailer["spec"]["dim"] == 32
    assert len(raw) == payload_end + len(raw[payload_end:])


def test_gen_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.lotd", tmp_path / "b.lotd"
    run(capsys, "gen", *SMALL, "--out", a)
    run(capsys, "gen", *SMALL, "--out", b)
    assert _digest(a) == _digest(b)
    ma = json.loads((tmp_path / "a.lotd.manifest.json").read_text())
    mb = json.loads((tmp_path / "b.lotd.manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"]


def test_gen_rejects_bad_config(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--set", "benchmark.K=0", "--out", tmp_path / "x.lotd")
    assert code == EXIT_USAGE and error_line(err)["op"] == "config"
    assert not (tmp_path / "x.lotd").exists()
    code, _, err = run(capsys, "gen", "--set", "benchmark.size=3", "--out", tmp_path / "x.lotd")
    assert code == EXIT_USAGE and "size" in error_line(err)["message"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"training": {"learning_rate": 1}}))
    code, _, err = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "x.lotd")
    assert code == EXIT_USAGE and error_line(err)["target"] == str(cfg)
    cfg.write_text("{not json")
    assert run(capsys, "gen", "--config", cfg, "--out", tmp_path / "x.lotd")[0] == EXIT_USAGE


def test_usage_errors(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == EXIT_USAGE and error_line(err)["exit_code"] == EXIT_USAGE
    assert run(capsys, "gen")[0] == EXIT_USAGE


def test_missing_input_and_bad_output(tmp_path, capsys, bench_file):
    code, _, err = run(capsys, "train-classifiers", tmp_path / "none.lotd", "--out", tmp_path / "c.json")
    line = error_line(err)
    assert code == EXIT_DATA and line["error"] == "data" and line["target"].endswith("none.lotd")
    code, _, err = run(capsys, "train-classifiers", bench_file, "--out", tmp_path / "no" / "c.json")
    assert code == EXIT_DATA and "does not exist" in error_line(err)["message"]
    junk = tmp_path / "junk.lotd"
    junk.write_bytes(b"nothing here")
    assert run(capsys, "train-classifiers", junk, "--out", tmp_path / "c.json")[0] == EXIT_DATA


def test_train_edit_eval_pipeline(tmp_path, capsys, bench_file):
    before = _digest(bench_file)
    cls = tmp_path / "cls.json"
    assert run(capsys, "train-classifiers", bench_file, "--out", cls)[0] == EXIT_OK
    ed = tmp_path / "ed.json"
    code, stdout, _ = run(capsys, "train-editor", bench_file, "--attribute", 0, "--classifiers", cls,
                          "--lambda", 1.0, *FAST, "--out", ed)
    assert code == EXIT_OK and json.loads(stdout)["epochs_run"] == 3
    assert (tmp_path / "ed.history.csv").exists()
    manifest = json.loads((tmp_path / "ed.json.manifest.json").read_text())
    assert manifest["config"]["training"]["lambda_"] == 1.0
    assert set(manifest["inputs"]) == {"small.lotd", "cls.json"}

    edited = tmp_path / "edited.csv"
    code, stdout, _ = run(capsys, "edit", ed, ed, "--data", bench_file, "--alpha", 0.5, "--out", edited)
    assert code == EXIT_OK and json.loads(stdout)["editors"] == 2
    assert b"\r\n" not in edited.read_bytes()

    report = tmp_path / "report.csv"
    code, stdout, err = run(capsys, "eval", ed, bench_file, "--out", report)
    assert code == EXIT_OK, err
    assert {"d", "target_change_rate"} <= set(json.loads(stdout))
    assert (tmp_path / "report.json").exists() and (tmp_path / "report.svg").exists()
    assert _digest(bench_file) == before


def test_eval_translation_editor(tmp_path, capsys, bench_file):
    from wassedit.editor import AffineEditor, save_editor

    spec = BenchmarkSpec(n=300, dim=8, K=2, identity_dim=4)
    path = tmp_path / "t.json"
    save_editor(AffineEditor(np.zeros((8, 8)), spec.separation * spec.attribute_directions[0], "attr0"), path)
    code, stdout, _ = run(capsys, "eval", path, bench_file, "--attribute", 0, "--out", tmp_path / "r.csv")
    assert code == EXIT_OK
    summary = json.loads(stdout)
    assert summary["target_change_rate"] >= 0.95 and summary["identity_preservation_rate"] == pytest.approx(1.0)
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert len(rows) == 12


def test_unreachable_calibration_is_numerical(tmp_path, capsys, bench_file):
    from wassedit.editor import AffineEditor, save_editor

    path = tmp_path / "zero.json"
    save_editor(AffineEditor(np.zeros((8, 8)), np.zeros(8), "attr0"), path)
    code, _, err = run(capsys, "eval", path, bench_file, "--out", tmp_path / "r.csv")
    assert code == EXIT_NUMERICAL and error_line(err)["op"] == "eval"


def test_editor_dim_mismatch(tmp_path, capsys, bench_file):
    from wassedit.editor import init_editor, save_editor

    path = tmp_path / "wrong.json"
    save_editor(init_editor(5), path)
    code, _, err = run(capsys, "edit", path, "--data", bench_file, "--out", tmp_path / "o.csv")
    assert code == EXIT_DATA and error_line(err)["target"] == str(path)


def _cloud_file(path, codes):
    save_csv(LatentDataset(codes, np.r_[np.zeros((len(codes) - 1, 1)), [[1]]]), path)


def test_sinkhorn_self_and_oracle(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _cloud_file(a, rng.normal(size=(8, 3)))
    _cloud_file(b, rng.normal(size=(8, 3)) + 1.0)
    code, stdout, _ = run(capsys, "sinkhorn", a, a)
    assert code == EXIT_OK and abs(json.loads(stdout)["divergence"]) <= 1e-9
    code, stdout, _ = run(capsys, "sinkhorn", a, b, "--set", "sinkhorn.relative_epsilon=0.001")
    sk = json.loads(stdout)
    code, stdout, _ = run(capsys, "oracle", a, b)
    exact = json.loads(stdout)
    assert code == EXIT_OK and exact["n"] == 8
    assert abs(sk["ot_cost"] - exact["value"]) <= 0.02 * exact["value"]


def test_sinkhorn_failures(tmp_path, capsys):
    rng = np.random.default_rng(1)
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    _cloud_file(a, rng.normal(size=(30, 3)))
    _cloud_file(b, rng.normal(size=(30, 3)) + 4.0)
    _cloud_file(c, rng.normal(size=(30, 2)))
    code, _, err = run(capsys, "sinkhorn", a, b, "--set", "sinkhorn.max_iters=1",
                       "--set", "sinkhorn.relative_epsilon=0.001")
    assert code == EXIT_NUMERICAL and error_line(err)["error"] == "numerical"
    assert run(capsys, "sinkhorn", a, c)[0] == EXIT_DATA
    assert run(capsys, "sinkhorn", a, b, "--epsilon", -1)[0] == EXIT_USAGE


def test_compare_writes_four_methods(tmp_path, capsys):
    data = tmp_path / "d.lotd"
    save_lotd(generate(BenchmarkSpec(n=600, dim=8, K=2, identity_dim=4)), data)
    out = tmp_path / "cmp"
    code, stdout, err = run(capsys, "compare", data, "--attribute", 0, "--lambda", 1, "--l2-reg", 0.1,
                            "--set", "training.max_epochs=30", "--set", "training.lr=0.01", "--out", out)
    assert code == EXIT_OK, err
    rows = list(csv.reader((out / "compare.csv").open()))
    assert len(rows) == 5
    assert [r[0] for r in rows[1:]] == ["LT*", "LW*", "LT", "LW"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert "compare.csv" in manifest["outputs"] and "editor_LW_star.json" in manifest["outputs"]
    assert len(json.loads(stdout)["methods"]) == 4
    # an existing file in place of the output directory is refused
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(capsys, "compare", data, "--attribute", 0, "--out", blocker)[0] == EXIT_DATA


def test_unknown_attribute(tmp_path, capsys, bench_file):
    code, _, err = run(capsys, "train-editor", bench_file, "--attribute", "smile", *FAST,
                       "--out", tmp_path / "e.json")
    assert code in (EXIT_DATA, EXIT_USAGE) and error_line(err)["op"] == "attribute"


def test_lotd_roundtrip_through_cli(tmp_path, capsys, bench_file):
    out = tmp_path / "same.lotd"
    assert run(capsys, "edit", tmp_path / "missing.json", "--data", bench_file, "--out", out)[0] == EXIT_DATA
    from wassedit.editor import AffineEditor, save_editor

    zero = tmp_path / "zero.json"
    save_editor(AffineEditor(np.zeros((8, 8)), np.zeros(8)), zero)
    assert run(capsys, "edit", zero, "--data", bench_file, "--out", out)[0] == EXIT_OK
    np.testing.assert_array_equal(load_lotd(out).codes, load_lotd(bench_file).codes)
