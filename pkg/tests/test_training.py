import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feudal_steering.data import synth_generate
from feudal_steering.errors import ConfigError, ContractError, InsufficientHistory, ParseError, TrainingError
from feudal_steering.networks import PredictionRecord, SubroutineId
from feudal_steering.training import (
    SubroutineTable,
    TrainConfig,
    compare_k,
    epoch_starts,
    evaluate,
    loss,
    read_predictions,
    train_joint,
    train_set_loss,
    write_k_table,
    write_metrics,
    write_predictions,
)

TINY = dict(m=3, seq_len=8, batch_size=4, conv_channels=(2, 2, 3, 2), kernel=(1, 3, 3), feature=4, hidden=4,
            groups=2, manager_channels=(2, 2, 2), manager_feature=4, manager_hidden=4, perplexity=5.0,
            tsne_iterations=100, k=3, lr=1e-3)


@pytest.fixture(scope="module")
def small():
    return synth_generate(160, seed=5, image_size=8).dataset


def tiny(mode, **kw):
    return TrainConfig(mode=mode, **{**TINY, **kw})


# --- loss formulas ------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["mse", "rmse", "mae"])
def test_loss_identity(kind):
    assert loss(kind, [0.3, -1.0], [0.3, -1.0]) == 0.0


def test_loss_hand_values():
    assert loss("mse", [1, -1], [0, 0]) == 1.0
    assert loss("rmse", [1, -1], [0, 0]) == 1.0
    assert loss("mae", [1, -1], [0, 0]) == 1.0
    assert loss("mse", [3, 0], [0, 0]) == 4.5
    assert abs(loss("rmse", [3, 0], [0, 0]) - 2.1213203435596424) < 1e-15
    assert loss("mae", [3, 0], [0, 0]) == 1.5


def test_loss_errors():
    with pytest.raises(ContractError):
        loss("mse", [1, 2], [1])
    with pytest.raises(ContractError):
        loss("mae", [], [])
    with pytest.raises(ConfigError):
        loss("huber", [1], [1])


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-10, 10)),
       st.integers(0, 2**31))
def test_rmse_is_sqrt_mse_and_bounds_mae(preds, seed):
    truths = np.random.default_rng(seed).uniform(-1, 1, preds.shape)
    mse = loss("mse", preds, truths)
    assert loss("rmse", preds, truths) == math.sqrt(mse)
    assert loss("mae", preds, truths) <= loss("rmse", preds, truths) * (1 + 1e-12) + 1e-300


# --- config -----------------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(mode="rl"), dict(m=0), dict(lr=0.0), dict(loss="l1"), dict(k=1),
                                 dict(epochs=-1), dict(betas=(0.9, 1.0)), dict(clip_norm=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.m, cfg.k, cfg.lr, cfg.betas, cfg.loss) == (10, 10, 1e-4, (0.9, 0.999), "mse")


def test_epoch_starts_tile_training_targets():
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = epoch_starts(200, 5, 16, rng)
        assert s.min() >= 10 and s.max() + 16 <= 200
        assert (np.diff(s) == 16).all()


# --- train_joint ---------------------------------------------------------------------------------

def test_zero_epochs_returns_initial_weights(small):
    cfg = tiny("learned", epochs=0)
    res = train_joint(small, cfg)
    fresh = cfg.build_model((3, 8, 8))
    assert len(res.history) == 0
    for a, b in zip(res.model.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


@pytest.mark.parametrize("mode", ["none", "learned", "gt-tsne", "pred-tsne"])
def test_train_all_modes_deterministic(small, mode):
    cfg = tiny(mode, epochs=2)
    a = train_joint(small, cfg)
    b = train_joint(small, cfg)
    assert a.history == b.history
    assert len(a.history) == 2
    assert all(math.isfinite(v) for v in a.history.train_loss)
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    if mode == "gt-tsne":
        assert a.history.test_rmse == [None, None]
    else:
        assert all(v >= w for v, w in zip(a.history.test_rmse, a.history.test_mae))


def test_one_epoch_learned_lowers_train_loss():
    ds = synth_generate(2000, seed=7).dataset
    cfg = TrainConfig(mode="learned", epochs=1, seed=0)
    before = train_set_loss(cfg.build_model((3, 16, 16)), ds, cfg)
    after = train_set_loss(train_joint(ds, cfg).model, ds, cfg)
    assert after < before


def test_pred_tsne_manager_learns_centroids(small):
    cfg = tiny("pred-tsne", epochs=0)
    res = train_joint(small, cfg)
    table = res.table
    frames = small.load_frames()
    targets = np.array([table.lookup(n).as_array() for n in range(6, small.n_train)])

    def centroid_error(model):
        pred = model.manager.predict(frames[6:small.n_train]).data
        return float(np.mean(np.linalg.norm(pred - targets, axis=1)))

    initial = centroid_error(res.model)
    trained = train_joint(small, tiny("pred-tsne", epochs=15), table=table)
    assert centroid_error(trained.model) < initial


def test_subroutine_table_uses_lookup(small):
    cfg = tiny("gt-tsne")
    table = SubroutineTable.build(small.train, cfg)
    goals = table.goals([9, 20], 4)
    assert goals.shape == (2, 4, 2)
    assert tuple(goals[1, 3]) == table.lookup(23).payload
    # whole windows share one id
    assert table.lookup(9) == table.lookup(11)


def test_divergence_reports_context(small):
    cfg = tiny("none", epochs=1)
    model = cfg.build_model((3, 8, 8))
    model.worker.params["head.b"].data[:] = np.inf
    with pytest.raises(TrainingError, match="epoch 1 step 1"):
        train_joint(small, cfg, model=model)


def test_insufficient_data():
    ds = synth_generate(12, seed=0, image_size=8).dataset
    with pytest.raises(InsufficientHistory):
        train_joint(ds, tiny("none", epochs=1, m=5))


# --- evaluate / compare_k ---------------------------------------------------------------------------

def test_evaluate_metrics(small):
    res = train_joint(small, tiny("learned", epochs=1))
    ev = evaluate(res.model, small)
    assert ev.rmse >= ev.mae
    assert [r.n for r in ev.records] == list(range(small.n_train + 6, len(small.records)))
    truths = small.angles()[small.n_train + 6:]
    np.testing.assert_array_equal([r.truth for r in ev.records], truths)


def test_rollout_and_teacher_forced_reported(small):
    cfg = tiny("learned", epochs=2)
    model = train_joint(small, cfg).model
    rolled = evaluate(model, small, cfg)
    forced = evaluate(model, small, cfg, teacher_forcing=True)
    print(f"rollout rmse={rolled.rmse:.5f} teacher-forced rmse={forced.rmse:.5f}")
    assert math.isfinite(rolled.rmse) and math.isfinite(forced.rmse)
    assert [r.n for r in rolled.records] == [r.n for r in forced.records]
    assert [r.predicted for r in rolled.records] != [r.predicted for r in forced.records]


def test_evaluate_errors(small):
    model = tiny("gt-tsne").build_model((3, 8, 8))
    with pytest.raises(ContractError):
        evaluate(model, small)
    empty = synth_generate(40, seed=0, image_size=8, train_fraction=0.99).dataset
    empty.n_train = len(empty.records)
    with pytest.raises(ContractError):
        evaluate(tiny("none").build_model((3, 8, 8)), empty)


@pytest.mark.slow
def test_overfit_memorization():
    ds = synth_generate(200, seed=3, noise=0.0).dataset
    cfg = TrainConfig(mode="none", epochs=100, lr=1e-3, dropout=0.0, augment=False, seed=0, batch_size=4,
                      seq_len=16)
    res = train_joint(ds, cfg)
    assert evaluate(res.model, ds, cfg, split="train").rmse < 0.02


def test_compare_k_single_row_and_reproducible(small, tmp_path):
    cfg = tiny("pred-tsne", epochs=1)
    rows = compare_k(small, [3], cfg)
    assert len(rows) == 1 and rows[0][0] == 3
    write_k_table(tmp_path / "a.csv", rows)
    write_k_table(tmp_path / "b.csv", compare_k(small, [3], cfg))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "k,rmse"


# --- CSV files -------------------------------------------------------------------------------------

def test_metrics_csv(tmp_path, small):
    res = train_joint(small, tiny("gt-tsne", epochs=1))
    write_metrics(tmp_path / "m.csv", res.history)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_rmse,test_mae"
    assert lines[1].startswith("1,") and lines[1].endswith(",,")


def test_predictions_csv_roundtrip(tmp_path):
    recs = [PredictionRecord(20, 0.1, 0.2, SubroutineId.learned(1.5)),
            PredictionRecord(21, -0.1, 0.0, SubroutineId.centroid2d(3.0, -4.0)),
            PredictionRecord(22, 0.0, 0.0, SubroutineId.none())]
    write_predictions(tmp_path / "p.csv", recs)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "n,truth,predicted,sub_id_0,sub_id_1"
    assert lines[1] == "20,0.1,0.2,1.5,"
    assert lines[3] == "22,0.0,0.0,,"
    rows = read_predictions(tmp_path / "p.csv")
    assert [r["sub_id"] for r in rows] == [(1.5,), (3.0, -4.0), ()]


def test_predictions_csv_parse_error(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("n,truth,predicted,sub_id_0,sub_id_1\n1,0.1,0.2,,\n2,zz,0.1,,\n")
    with pytest.raises(ParseError, match="line 3"):
        read_predictions(p)
