import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wassedit.dataset import DataError
from wassedit.editor import AffineEditor, edit, init_editor, load_editor, save_editor

finite = st.floats(-10, 10, allow_nan=False)


def test_alpha_zero_is_identity():
    ed = init_editor(4, seed=1)
    z = np.random.default_rng(0).normal(size=(6, 4))
    out = edit(ed, z, 0.0)
    assert np.array_equal(out, z)
    assert out is not z


def test_pure_translation():
    v = np.array([1.0, -2.0, 0.5])
    z = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(edit(AffineEditor(np.zeros((3, 3)), v), z, 1.0), z + v)


@settings(max_examples=30)
@given(z=arrays(float, (4, 3), elements=finite), w=arrays(float, (3, 3), elements=finite),
       b=arrays(float, 3, elements=finite))
def test_edit_is_linear_in_alpha(z, w, b):
    ed = AffineEditor(w, b)
    two, one = edit(ed, z, 2.0) - z, edit(ed, z, 1.0) - z
    np.testing.assert_allclose(two, 2.0 * one, atol=1e-12 * (1 + np.abs(two).max()))


def test_negative_alpha_reverses():
    ed = AffineEditor(np.zeros((2, 2)), [1.0, 1.0])
    np.testing.assert_array_equal(edit(ed, np.zeros(2), -2.0), [-2.0, -2.0])


def test_shape_mismatch():
    with pytest.raises(ValueError, match="dim"):
        edit(init_editor(3), np.zeros((2, 4)), 1.0)


def test_invalid_parameters():
    with pytest.raises(ValueError, match="shape"):
        AffineEditor(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ValueError, match="finite"):
        AffineEditor(np.full((2, 2), np.nan), np.zeros(2))
    with pytest.raises(ValueError):
        init_editor(0)


def test_init_deterministic_and_seed_dependent():
    a, b, c = init_editor(5, seed=3), init_editor(5, seed=3), init_editor(5, seed=4)
    assert np.array_equal(a.weight, b.weight)
    assert not np.array_equal(a.weight, c.weight)
    assert np.all(a.bias == 0)


def test_init_is_near_identity():
    ed = init_editor(4, seed=0)
    z = np.random.default_rng(5).normal(size=(100, 4))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    ratio = np.linalg.norm(ed.direction(z), axis=1)
    assert ratio.max() < 0.1


def test_init_scale():
    ed = init_editor(64, seed=0)
    assert ed.weight.std() == pytest.approx(0.01 / 8, rel=0.05)


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(6)
    ed = AffineEditor(rng.normal(size=(3, 3)), rng.normal(size=3), "smile",
                      {"mode": "lw", "lambda": 1.0, "epsilon": 0.1, "seed": 0, "epochs_run": 3})
    path = tmp_path / "ed.json"
    save_editor(ed, path)
    back = load_editor(path)
    z = rng.normal(size=(10, 3))
    assert np.array_equal(edit(back, z, 1.7), edit(ed, z, 1.7))
    assert back.attribute_name == "smile" and back.training_meta["mode"] == "lw"
    doc = json.loads(path.read_text())
    assert set(doc) == {"format_version", "attribute_name", "dim", "weight", "bias",
                        "training_meta"}
    assert b"\r\n" not in path.read_bytes()


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataError, match="invalid JSON"):
        load_editor(bad)
    bad.write_text(json.dumps({"format_version": 1, "dim": 2, "weight": [1, 2], "bias": [0, 0]}))
    with pytest.raises(DataError, match="malformed"):
        load_editor(bad)
    bad.write_text(json.dumps({"format_version": 9}))
    with pytest.raises(DataError, match="format_version"):
        load_editor(bad)
