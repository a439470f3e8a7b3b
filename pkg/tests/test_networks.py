import numpy as np
import pytest

from feudal_steering import autodiff as ad
from feudal_steering.autodiff import Tensor
from feudal_steering.errors import ConfigError, ContractError, InsufficientHistory, MissingFileError, SchemaError, ShapeError
from feudal_steering.networks import (
    FeudalModel,
    ManagerConfig,
    SubroutineId,
    SubroutineIdNet,
    TsneManagerConfig,
    TsneManagerNet,
    WorkerConfig,
    WorkerNet,
    frame_volume,
    load_checkpoint,
    manager_learned_forward,
    manager_tsne_forward,
    rollout,
    save_checkpoint,
    unroll,
    worker_forward,
)

from helpers import check_grads, sampled_grad_check


def toy_worker_config(goal_dim=0, **kw):
    base = dict(m=2, channels_in=3, height=8, width=8, conv_channels=(2, 2, 3, 2), kernel=(1, 3, 3),
                feature=4, hidden=3, dropout=0.0, groups=2, goal_dim=goal_dim)
    base.update(kw)
    return WorkerConfig(**base)


def toy_manager_config(m=2):
    return ManagerConfig(m=m, conv_channels=(2, 3, 2), feature=4, hidden=3, dropout=0.0, groups=2)


def toy_model(mode, m=2, seed=0):
    wcfg = toy_worker_config(m=m)
    mcfg = None
    if mode == "learned":
        mcfg = toy_manager_config(m)
    elif mode == "pred-tsne":
        mcfg = TsneManagerConfig(3, 8, 8, (2, 2, 2), 4)
    return FeudalModel(mode, wcfg, mcfg, seed=seed)


def frames(n, seed=0, size=8):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, size, size))


# --- SubroutineId --------------------------------------------------------------------

def test_subroutine_id_arity():
    assert SubroutineId.centroid2d(1, 2).payload == (1.0, 2.0)
    assert SubroutineId.learned(-3).dim == 1
    assert SubroutineId.none().dim == 0
    with pytest.raises(ContractError):
        SubroutineId("centroid2d", (1.0,))
    with pytest.raises(ContractError):
        SubroutineId("polar", ())


# --- worker ----------------------------------------------------------------------------

def test_zero_worker_gives_zero():
    w = WorkerNet(WorkerConfig(m=10)).zero_()
    assert worker_forward(w, np.zeros((10, 3, 16, 16)), SubroutineId.none(), 0.0) == 0.0


def test_worker_default_layout():
    w = WorkerNet(WorkerConfig(goal_dim=2))
    assert [w.params[f"conv{s}.w"].shape[0] for s in range(1, 5)] == [8, 16, 24, 32]
    assert {w.params[f"skip{s}.w"].shape[1] for s in range(1, 5)} == {64}
    assert w.params["lstm.wx"].shape == (64 + 2 + 1, 256)
    assert w.params["head.w"].shape == (64 + 64, 1)


def test_worker_config_errors():
    with pytest.raises(ConfigError):
        WorkerNet(WorkerConfig(m=4))  # four depth-2 kernels need m >= 5
    with pytest.raises(ConfigError):
        WorkerNet(WorkerConfig(conv_channels=(8, 8, 8)))
    with pytest.raises(ConfigError):
        WorkerNet(WorkerConfig(feature=30, groups=4))
    with pytest.raises(ConfigError):
        WorkerNet(WorkerConfig(dropout=1.0))


def test_worker_shape_and_tag_errors():
    w = WorkerNet(toy_worker_config(goal_dim=2))
    good = frames(2)
    with pytest.raises(ShapeError):
        w.forward(frames(3), SubroutineId.centroid2d(0, 0), 0.0)
    with pytest.raises(ShapeError):
        w.forward(frames(2, size=6), SubroutineId.centroid2d(0, 0), 0.0)
    with pytest.raises(ContractError):
        w.forward(good, SubroutineId.learned(1.0), 0.0)
    with pytest.raises(ContractError):
        w.forward(good, None, 0.0)


def test_worker_output_finite_and_deterministic():
    w = WorkerNet(WorkerConfig(m=10, goal_dim=1), seed=3)
    f = frames(10, size=16)
    a = worker_forward(w, f, SubroutineId.learned(0.4), 0.1)
    b = worker_forward(w, f, SubroutineId.learned(0.4), 0.1)
    assert np.isfinite(a) and a == b


def test_worker_dropout_uses_rng():
    w = WorkerNet(WorkerConfig(m=10), seed=3)
    f = frames(10, size=16)
    outs = [float(w.forward(f, SubroutineId.none(), 0.0, training=True,
                            rng=np.random.default_rng(s))[0].data) for s in (1, 1, 2)]
    assert outs[0] == outs[1] != outs[2]


def test_worker_gradcheck_first_kernel():
    w = WorkerNet(toy_worker_config(goal_dim=2), seed=1)
    f = frames(2)
    g = SubroutineId.centroid2d(0.3, -0.7)

    def build():
        angle, _ = w.forward(f, g, 0.2)
        return ad.mul(ad.sub(angle, Tensor(0.5)), ad.sub(angle, Tensor(0.5)))

    assert check_grads(build, [w.params["conv1.w"]]) < 1e-4


def test_worker_gradcheck_all_params_and_goal():
    w = WorkerNet(toy_worker_config(goal_dim=2), seed=2)
    f = frames(2, seed=1)
    goal = Tensor(np.array([0.4, -0.2]), track_grad=True)

    def build():
        angle, _ = w.forward(f, goal, 0.1)
        return ad.mul(angle, angle)

    assert check_grads(build, w.parameters() + [goal]) < 1e-4


def test_worker_responds_to_goal_after_training_step():
    w = WorkerNet(toy_worker_config(goal_dim=1), seed=4)
    f = frames(2, seed=2)
    opt = ad.Adam(w.parameters(), lr=1e-2)
    angle, _ = w.forward(f, SubroutineId.learned(0.5), 0.0)
    loss = ad.mul(ad.sub(angle, Tensor(1.0)), ad.sub(angle, Tensor(1.0)))
    grads = ad.backward(loss, w.parameters())
    opt.step([grads[p] for p in w.parameters()])
    a = worker_forward(w, f, SubroutineId.learned(0.5), 0.0)
    b = worker_forward(w, f, SubroutineId.learned(-0.5), 0.0)
    assert a != b


def test_shared_volume_encoding_matches_per_window():
    w = WorkerNet(WorkerConfig(m=10), seed=0)
    fr = frames(30, size=16)
    whole = w.encode(Tensor(frame_volume(fr, [15], 8, 10))).data
    for t in range(8):
        n = 15 + t
        single = w.encode(Tensor(fr[n - 9:n + 1].transpose(1, 0, 2, 3)[None])).data
        np.testing.assert_allclose(whole[0, t], single[0, 0], atol=1e-12)


# --- managers ---------------------------------------------------------------------------

def test_zero_learned_manager():
    mgr = SubroutineIdNet(ManagerConfig(m=10)).zero_()
    assert manager_learned_forward(mgr, np.zeros(10)) == SubroutineId.learned(0.0)


def test_learned_manager_order_sensitive():
    mgr = SubroutineIdNet(ManagerConfig(m=10), seed=5)
    hist = np.linspace(-0.3, 0.4, 10)
    a = manager_learned_forward(mgr, hist).payload[0]
    b = manager_learned_forward(mgr, hist[::-1]).payload[0]
    assert a != b


def test_learned_manager_wrong_length():
    mgr = SubroutineIdNet(ManagerConfig(m=10))
    with pytest.raises(ShapeError):
        manager_learned_forward(mgr, np.zeros(11))


def test_learned_manager_head_unbounded():
    mgr = SubroutineIdNet(ManagerConfig(m=10), seed=0)
    assert SubroutineIdNet.head_activation is None
    mgr.params["head.b"].data[:] = 50.0
    assert manager_learned_forward(mgr, np.zeros(10)).payload[0] > 10
    mgr.params["head.b"].data[:] = -50.0
    assert manager_learned_forward(mgr, np.zeros(10)).payload[0] < -10


def test_learned_manager_gradcheck():
    mgr = SubroutineIdNet(toy_manager_config(m=6), seed=1)
    hist = Tensor(np.random.default_rng(0).uniform(-0.5, 0.5, (2, 6)), track_grad=True)

    def build():
        out, _ = mgr.step(hist, mgr.initial_state(2))
        return ad.sum(ad.mul(out, out))

    assert check_grads(build, mgr.parameters() + [hist]) < 1e-4


def test_zero_tsne_manager():
    mgr = TsneManagerNet().zero_()
    assert manager_tsne_forward(mgr, np.zeros((10, 3, 16, 16))) == SubroutineId.centroid2d(0, 0)


def test_tsne_manager_shape_error():
    with pytest.raises(ShapeError):
        manager_tsne_forward(TsneManagerNet(), np.zeros((10, 3, 12, 16)))


def test_tsne_manager_gradcheck():
    mgr = TsneManagerNet(TsneManagerConfig(3, 8, 8, (2, 2, 2), 4), seed=2)
    x = frames(2)

    def build():
        out = mgr.predict(Tensor(x))
        return ad.mse_loss(out, Tensor(np.array([[1.0, -1.0], [0.5, 0.0]])))

    assert check_grads(build, mgr.parameters()) < 1e-4


def test_model_mode_builds_matching_manager():
    assert toy_model("none").manager is None
    assert toy_model("gt-tsne").manager is None
    assert isinstance(toy_model("learned").manager, SubroutineIdNet)
    assert isinstance(toy_model("pred-tsne").manager, TsneManagerNet)
    assert toy_model("gt-tsne").worker.config.goal_dim == 2
    with pytest.raises(ConfigError):
        FeudalModel("bogus")
    with pytest.raises(ConfigError):
        FeudalModel("learned", WorkerConfig(m=10), ManagerConfig(m=8))


# --- checkpoints ---------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["none", "gt-tsne", "learned", "pred-tsne"])
def test_checkpoint_roundtrip(tmp_path, mode):
    model = toy_model(mode, seed=7)
    for p in model.parameters():
        p.data += np.random.default_rng(1).standard_normal(p.shape) * 1e-3
    path = tmp_path / "ck.npz"
    save_checkpoint(path, model, extra={"note": 1})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert loaded.mode == mode
    assert loaded.describe() == model.describe()
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_checkpoint(tmp_path / "none.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(SchemaError):
        load_checkpoint(bad)


# --- unroll / rollout ---------------------------------------------------------------------

def test_rollout_zero_worker_predicts_zero():
    model = toy_model("none")
    model.worker.zero_()
    recs = rollout(model, frames(20), np.linspace(-0.2, 0.2, 20), 0, 20)
    assert [r.n for r in recs] == list(range(4, 20))
    assert all(r.predicted == 0.0 for r in recs)


def test_rollout_deterministic():
    model = toy_model("learned", seed=3)
    fr, ang = frames(30), np.sin(np.arange(30) / 4)
    assert rollout(model, fr, ang, 2, 30) == rollout(model, fr, ang, 2, 30)


def test_rollout_too_short():
    model = toy_model("none")
    with pytest.raises(InsufficientHistory, match="insufficient history"):
        rollout(model, frames(20), np.zeros(20), 10, 14)


def test_rollout_gt_tsne_uses_goal_fn():
    model = toy_model("gt-tsne")
    with pytest.raises(ContractError):
        rollout(model, frames(20), np.zeros(20), 0, 20)
    recs = rollout(model, frames(20), np.zeros(20), 0, 20, goal_fn=lambda n: SubroutineId.centroid2d(n, -n))
    assert recs[0].sub_id == SubroutineId.centroid2d(4, -4)


def test_rollout_feeds_predictions_not_truth():
    model = toy_model("none", seed=2)
    fr = frames(20)
    a = rollout(model, fr, np.zeros(20), 0, 20)
    b = rollout(model, fr, np.full(20, 5.0), 0, 20)
    assert [r.predicted for r in a] == [r.predicted for r in b]
    c = rollout(model, fr, np.full(20, 5.0), 0, 20, teacher_forcing=True)
    assert [r.predicted for r in a][1:] != [r.predicted for r in c][1:]


@pytest.mark.parametrize("mode", ["none", "learned", "pred-tsne", "gt-tsne"])
def test_batched_unroll_matches_single(mode):
    model = toy_model(mode, seed=1)
    fr, ang = frames(40, seed=3), np.sin(np.arange(40) / 5)
    starts, length = [4, 17], 9
    goals = np.random.default_rng(0).standard_normal((2, length, 2)) if mode == "gt-tsne" else None
    both = unroll(model, fr, ang, starts, length, goals=goals).preds.data
    for i, s in enumerate(starts):
        g = goals[i:i + 1] if goals is not None else None
        one = unroll(model, fr, ang, [s], length, goals=g).preds.data
        np.testing.assert_allclose(both[i], one[0], atol=1e-12)


def test_flipped_unroll_mirrors_inputs():
    model = toy_model("learned", seed=1)
    fr, ang = frames(30, seed=3), np.sin(np.arange(30) / 5)
    flipped = unroll(model, fr, ang, [6], 8, flips=[True]).preds.data
    manual = unroll(model, fr[..., ::-1].copy(), -ang, [6], 8).preds.data
    np.testing.assert_allclose(flipped, manual, atol=1e-12)


def test_learned_manager_never_sees_target():
    model = toy_model("learned", m=3, seed=0)
    fr = frames(40)
    ang = np.random.default_rng(1).uniform(-0.3, 0.3, 40)
    start, length = 6, 20
    base = unroll(model, fr, ang, [start], length)
    for t in range(length):
        n = start + t
        idx, _ = base.manager_inputs[t]
        assert idx.max() < n and idx.shape == (1, 3)
        pert = ang.copy()
        pert[n:] += 10.0
        other = unroll(model, fr, pert, [start], length)
        np.testing.assert_array_equal(other.manager_inputs[t][1], base.manager_inputs[t][1])


def test_composite_loss_gradcheck():
    model = toy_model("learned", m=2, seed=5)
    rng = np.random.default_rng(0)
    # zero biases put dead conv outputs exactly on the ReLU kink; move off it
    for p in model.parameters():
        if p.ndim == 1:
            p.data += 0.05 * rng.standard_normal(p.shape)
    fr, ang = frames(16, seed=4), np.sin(np.arange(16) / 3) * 0.3
    target = Tensor(ang[[6, 7, 8, 9]].reshape(2, 2))

    def build():
        res = unroll(model, fr, ang, [6, 8], 2)
        return ad.mse_loss(res.preds, target)

    assert sampled_grad_check(build, model.parameters(), per_tensor=4) < 1e-4
