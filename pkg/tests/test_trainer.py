import csv

import numpy as np
import pytest

from wassedit.attributes import AttributeModel, train_classifiers
from wassedit.bench import BenchmarkSpec, generate
from wassedit.dataset import DataError, LatentDataset
from wassedit.editor import AffineEditor, edit, init_editor
from wassedit.evaluation import ood_score
from wassedit.trainer import (
    NumericalError,
    TrainingConfig,
    lt_loss,
    lw_loss,
    make_batches,
    split_source_target,
    train,
)

# the "2-cluster benchmark": a single attribute splits the codes into two clusters
TWO_CLUSTER = BenchmarkSpec(K=1, n=1000, dim=8, identity_dim=4)


@pytest.fixture(scope="module")
def two_cluster():
    return generate(TWO_CLUSTER)


def _data(labels, dim=2):
    labels = np.asarray(labels, dtype=np.uint8).reshape(len(labels), -1)
    return LatentDataset(np.random.default_rng(0).normal(size=(len(labels), dim)), labels)


def test_split_examples():
    src, tgt = split_source_target(_data([0, 1, 0, 1]), 0)
    assert src.tolist() == [0, 2] and tgt.tolist() == [1, 3]
    src_d, tgt_d = split_source_target(_data([0, 1, 0, 1]), 0, increase=False)
    assert src_d.tolist() == [1, 3] and tgt_d.tolist() == [0, 2]
    with pytest.raises(DataError, match="empty"):
        split_source_target(_data([1, 1, 1]), 0)


def test_split_is_partition():
    labels = np.random.default_rng(3).integers(0, 2, size=(50, 2))
    labels[:2] = [[0, 0], [1, 1]]
    src, tgt = split_source_target(_data(labels), 1)
    assert np.intersect1d(src, tgt).size == 0
    assert np.array_equal(np.sort(np.r_[src, tgt]), np.arange(50))


def test_batches_equal_sides():
    plan = make_batches(100, 100, 0)
    assert len(plan) == 1 and len(plan[0][0]) == 100 and len(plan[0][1]) == 100


def test_batches_half_rule():
    # 250 = 100 + 100 + 50; 50 is not below 100 / 2 so it stays
    plan = make_batches(250, 100, 0)
    assert [len(s) for s, _ in plan] == [100, 100, 50]
    assert all(len(t) == 100 for _, t in plan)
    assert np.array_equal(np.sort(np.concatenate([s for s, _ in plan])), np.arange(250))
    # 249 leaves a trailing 49, which is dropped
    assert [len(s) for s, _ in make_batches(249, 100, 0)] == [100, 100]


def test_batches_target_larger_and_deterministic():
    plan = make_batches(30, 74, 5)
    assert [(len(s), len(t)) for s, t in plan] == [(30, 30), (30, 30)]
    again = make_batches(30, 74, 5)
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(plan, again))
    with pytest.raises(ValueError):
        make_batches(0, 4, 0)


def test_lw_zero_map_on_identical_clouds():
    z = np.random.default_rng(1).normal(size=(40, 3))
    zero = AffineEditor(np.zeros((3, 3)), np.zeros(3))
    loss, _, parts = lw_loss(zero, z, z, None, TrainingConfig(), attribute=0)
    assert abs(loss) <= 1e-9 and parts["pres"] == 0.0


def test_lw_preservation_zero_at_alpha_zero():
    rng = np.random.default_rng(2)
    z, y = rng.normal(size=(30, 4)), rng.normal(size=(30, 4)) + 2.0
    model = AttributeModel(rng.normal(size=(3, 4)), rng.normal(size=3), np.eye(3))
    cfg = TrainingConfig(lambda_=1.0, alpha_train=0.0)
    _, _, parts = lw_loss(init_editor(4, 0), z, y, model, cfg, attribute=0)
    assert abs(parts["pres"]) <= 1e-9
    with pytest.raises(ValueError, match="attribute model"):
        lw_loss(init_editor(4, 0), z, y, None, cfg, attribute=0)


def test_lt_confident_edits_cost_nothing():
    model = AttributeModel([[1.0, 0.0]], [0.0], [[1.0]])
    z = np.random.default_rng(0).normal(size=(20, 2))
    push = AffineEditor(np.zeros((2, 2)), [60.0, 0.0])
    loss, _, parts = lt_loss(push, z, model, TrainingConfig(mode="lt"), attribute=0)
    assert loss < 1e-20 and parts["reg"] == 0.0


def test_lt_heavy_l2_keeps_edit_near_zero(two_cluster):
    model = train_classifiers(two_cluster)
    cfg = TrainingConfig(mode="lt", l2_reg=1e4, lr=1e-2, max_epochs=100)
    ed, _ = train(two_cluster, 0, cfg, model)
    src, _ = split_source_target(two_cluster, 0)
    z = two_cluster.codes[src]
    loose, _ = train(two_cluster, 0, cfg.replace(l2_reg=0.0), model)
    heavy = np.linalg.norm(edit(ed, z, 1.0) - z, axis=1).mean()
    free = np.linalg.norm(edit(loose, z, 1.0) - z, axis=1).mean()
    assert heavy < 0.05 and heavy < 0.01 * free


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_rejected():
    model = AttributeModel([[1.0, 0.0]], [0.0], [[1.0]])
    z = np.full((3, 2), np.inf)
    with pytest.raises(NumericalError):
        lt_loss(init_editor(2, 0), z, model, TrainingConfig(mode="lt"), attribute=0)


def test_zero_epochs_returns_initial_editor(two_cluster):
    ed, report = train(two_cluster, 0, TrainingConfig(max_epochs=0))
    start = init_editor(two_cluster.dim, 0)
    assert np.array_equal(ed.weight, start.weight) and np.array_equal(ed.bias, start.bias)
    assert report.val_loss == [] and report.best_epoch == 0


def test_lw_reduces_edit_term(two_cluster):
    ed, report = train(two_cluster, 0, TrainingConfig(lr=1e-2, max_epochs=300))
    initial = report.initial_components["edit"]
    assert report.final_components["edit"] < 0.05 * initial
    # early stopping contract: best epoch holds the minimum and the later curve never beats it
    best = report.val_loss[report.best_epoch - 1]
    assert best == min(report.val_loss) == report.best_val_loss < report.initial_val_loss
    assert ed.training_meta["best_epoch"] == report.best_epoch
    assert report.stopped_epoch - report.best_epoch <= 20


def test_lt_without_l2_leaves_target_support(two_cluster):
    model = train_classifiers(two_cluster)
    ed, _ = train(two_cluster, 0, TrainingConfig(mode="lt"), model)
    src, tgt = split_source_target(two_cluster, 0)
    moved = edit(ed, two_cluster.codes[src], 1.0)
    assert ood_score(moved, two_cluster.codes[tgt]) > 3.0


def test_bitwise_determinism():
    data = generate(BenchmarkSpec(K=2, n=300, dim=6, identity_dim=2, seed=4))
    cfg = TrainingConfig(lambda_=1.0, max_epochs=5, seed=9)
    a, ra = train(data, 1, cfg)
    b, rb = train(data, 1, cfg)
    assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()
    assert ra.val_loss == rb.val_loss
    c, _ = train(data, 1, cfg.replace(seed=10))
    assert not np.array_equal(a.weight, c.weight)


def test_decrease_editor_and_weighting():
    data = generate(BenchmarkSpec(K=3, n=600, dim=8, identity_dim=2, bias=(0, 1, 0.5), seed=1))
    ed, report = train(data, 0, TrainingConfig(increase=False, use_weighting=True, max_epochs=3))
    assert ed.training_meta["increase"] is False
    assert report.stopped_epoch == 3 and np.isfinite(report.val_loss).all()
    with pytest.raises(ValueError, match="exclude"):
        train(data, 0, TrainingConfig(use_weighting=True, conditioning=(0, 1), max_epochs=1))


def test_report_csv(tmp_path):
    data = generate(BenchmarkSpec(K=1, n=200, dim=4, identity_dim=2))
    _, report = train(data, 0, TrainingConfig(mode="lt", l2_reg=0.1, max_epochs=4))
    path = tmp_path / "history.csv"
    report.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "edit_term", "pres_term", "reg_term"]
    assert len(rows) == 5 and [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert float(rows[4][2]) == report.val_loss[3]


@pytest.mark.parametrize("kw", [{"lambda_": -1}, {"val_fraction": 1.0}, {"patience": 0},
                                {"mode": "gan"}, {"lr": 0.0}, {"max_epochs": -1}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainingConfig(**kw)


def test_warm_start_gauge_is_recentred():
    # cross potentials carry a free constant (f + c, g - c); a drifted c is
    # pulled back so extrapolated warm starts cannot run away
    from wassedit.trainer import _LWState

    rng = np.random.default_rng(5)
    z, y = rng.normal(size=(20, 3)), rng.normal(size=(25, 3)) + 1.0
    state = _LWState(45)
    rows = (np.arange(20), np.arange(20, 45))
    ed = init_editor(3, 0)
    cfg = TrainingConfig()
    for step in range(6):
        ed.bias[:] = 0.1 * step
        value, _, _ = lw_loss(ed, z, y, None, cfg, attribute=0, state=state, rows=rows)
        f = state._pot[("edit", "cross_f")][rows[0]]
        g = state._pot[("edit", "cross_g")][rows[1]]
        assert np.isfinite(value)
        assert abs(f.mean() - g.mean()) <= 2 * _LWState.GAUGE_LIMIT * state.eps_edit
        if step == 3:
            for store in (state._pot, state._prev):
                store[("edit", "cross_f")] += 1e8
                store[("edit", "cross_g")] -= 1e8
