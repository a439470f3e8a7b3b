"""Worker and manager networks, checkpoints and the autoregressive unroll.

The worker's convolutional trunk only sees frames, so for a contiguous run of
targets it is evaluated once over the whole frame volume and every target's
m-frame window is cut out afterwards (``WorkerNet.encode``). With depth
stride 1 and no depth padding this is exactly the per-window computation.
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, InsufficientHistory, SchemaError, ShapeError

MODES = ("gt-tsne", "pred-tsne", "learned", "none")
GOAL_DIMS = {"centroid2d": 2, "learned-scalar": 1, "none": 0}
MODE_GOAL = {"gt-tsne": "centroid2d", "pred-tsne": "centroid2d", "learned": "learned-scalar", "none": "none"}
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SubroutineId:
    tag: str
    payload: tuple = ()

    def __post_init__(self):
        if self.tag not in GOAL_DIMS:
            raise ContractError(f"unknown subroutine id tag {self.tag!r}")
        if len(self.payload) != GOAL_DIMS[self.tag]:
            raise ContractError(f"{self.tag} id needs {GOAL_DIMS[self.tag]} values, got {len(self.payload)}")

    @classmethod
    def centroid2d(cls, x, y):
        return cls("centroid2d", (float(x), float(y)))

    @classmethod
    def learned(cls, value):
        return cls("learned-scalar", (float(value),))

    @classmethod
    def none(cls):
        return cls("none", ())

    @property
    def dim(self):
        return GOAL_DIMS[self.tag]

    def as_array(self):
        return np.array(self.payload, dtype=np.float64)


@dataclass(frozen=True)
class PredictionRecord:
    n: int
    truth: float
    predicted: float
    sub_id: SubroutineId = SubroutineId.none()


# --- parameter containers --------------------------------------------------------

class Module:
    def __init__(self):
        self.params = {}

    def _param(self, name, value):
        t = Tensor(value, track_grad=True)
        self.params[name] = t
        return t

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise SchemaError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].data.shape != v.shape:
                raise ShapeError(f"parameter {k}: stored {v.shape}, expected {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_(self):
        for p in self.params.values():
            p.data[...] = 0.0
        return self

    def n_params(self):
        return sum(p.data.size for p in self.params.values())


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _lstm_params(mod, prefix, d_in, d_h, rng):
    lim = 1.0 / math.sqrt(d_h)
    mod._param(f"{prefix}.wx", rng.uniform(-lim, lim, (d_in, 4 * d_h)))
    mod._param(f"{prefix}.wh", rng.uniform(-lim, lim, (d_h, 4 * d_h)))
    b = np.zeros(4 * d_h)
    b[d_h:2 * d_h] = 1.0  # forget gate starts open
    mod._param(f"{prefix}.b", b)


def _lstm_weights(mod, prefix):
    p = mod.params
    return p[f"{prefix}.wx"], p[f"{prefix}.wh"], p[f"{prefix}.b"]


def zero_state(batch, hidden):
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


# --- worker -------------------------------------------------------------------------

@dataclass
class WorkerConfig:
    m: int = 10
    channels_in: int = 3
    height: int = 16
    width: int = 16
    conv_channels: tuple = (8, 16, 24, 32)
    kernel: tuple = (2, 3, 3)
    pool_after: tuple = (2, 4)
    feature: int = 64
    fc_layers: int = 2
    hidden: int = 64
    dropout: float = 0.25
    groups: int = 4
    goal_dim: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.kernel = tuple(self.kernel)
        self.pool_after = tuple(self.pool_after)

    def depth_after(self, stage):
        """Depth of one m-frame window after ``stage`` (1-based) convolutions."""
        return self.m - stage * (self.kernel[0] - 1)

    def validate(self):
        if len(self.conv_channels) != 4:
            raise ConfigError(f"worker needs exactly 4 conv stages, got {len(self.conv_channels)}")
        if self.m < 1 or self.depth_after(4) < 1:
            raise ConfigError(f"m={self.m} too short for 4 stages of depth-{self.kernel[0]} kernels")
        if self.kernel[1] % 2 == 0 or self.kernel[2] % 2 == 0:
            raise ConfigError(f"spatial kernel sizes must be odd to preserve size, got {self.kernel}")
        h, w = self.spatial_after(4)
        if h < 1 or w < 1:
            raise ConfigError(f"frames {self.height}x{self.width} too small for pooling {self.pool_after}")
        if self.fc_layers < 2:
            raise ConfigError("worker needs at least 2 fully connected layers")
        if self.feature % self.groups:
            raise ConfigError(f"feature width {self.feature} not divisible by {self.groups} groups")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.goal_dim not in (0, 1, 2):
            raise ConfigError(f"goal_dim must be 0, 1 or 2, got {self.goal_dim}")

    def spatial_after(self, stage):
        h, w = self.height, self.width
        for s in range(1, stage + 1):
            if s in self.pool_after:
                h, w = h // 2, w // 2
        return h, w


class WorkerNet(Module):
    """Steering-angle network: 4 x (conv3d, ReLU, dropout) with skip sums, FC stack,
    ELU + group norm, an LSTM fed with (features, goal, previous angle) and a head
    over (LSTM output, features)."""

    def __init__(self, config=None, seed=0):
        super().__init__()
        cfg = config or WorkerConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        kd, kh, kw = cfg.kernel
        c_in = cfg.channels_in
        for s, c_out in enumerate(cfg.conv_channels, start=1):
            fan = c_in * kd * kh * kw
            self._param(f"conv{s}.w", _he(rng, (c_out, c_in, kd, kh, kw), fan))
            self._param(f"conv{s}.b", np.zeros(c_out))
            self._param(f"skip{s}.w", _glorot(rng, (c_out, cfg.feature), c_out, cfg.feature))
            self._param(f"skip{s}.b", np.zeros(cfg.feature))
            c_in = c_out
        h, w = cfg.spatial_after(4)
        flat = cfg.conv_channels[-1] * cfg.depth_after(4) * h * w
        width = flat
        for i in range(cfg.fc_layers):
            self._param(f"fc{i}.w", _he(rng, (width, cfg.feature), width))
            self._param(f"fc{i}.b", np.zeros(cfg.feature))
            width = cfg.feature
        self._param("gn.gain", np.ones(cfg.feature))
        self._param("gn.bias", np.zeros(cfg.feature))
        _lstm_params(self, "lstm", cfg.feature + cfg.goal_dim + 1, cfg.hidden, rng)
        self._param("head.w", _glorot(rng, (cfg.hidden + cfg.feature, 1), cfg.hidden + cfg.feature, 1))
        self._param("head.b", np.zeros(1))
        widths = {self.params[f"skip{s}.w"].shape[1] for s in range(1, 5)} | {cfg.feature}
        assert len(widths) == 1, f"skip projections disagree on width: {widths}"

    @property
    def goal_kind(self):
        return {0: "none", 1: "learned-scalar", 2: "centroid2d"}[self.config.goal_dim]

    def encode(self, volume, training=False, rng=None):
        """Frame volume (B, C, D, H, W) -> per-window features (B, D-m+1, feature)."""
        cfg = self.config
        p = self.params
        volume = ad.as_tensor(volume)
        if volume.ndim != 5 or volume.shape[1] != cfg.channels_in or volume.shape[3:] != (cfg.height, cfg.width):
            raise ShapeError(f"frame volume {volume.shape} does not match "
                             f"(B, {cfg.channels_in}, D, {cfg.height}, {cfg.width})")
        if volume.shape[2] < cfg.m:
            raise ShapeError(f"frame volume depth {volume.shape[2]} shorter than m={cfg.m}")
        b = volume.shape[0]
        n_win = volume.shape[2] - cfg.m + 1
        pad = (0, cfg.kernel[1] // 2, cfg.kernel[2] // 2)
        x = volume
        retained = []
        for s in range(1, 5):
            x = ad.conv3d(x, p[f"conv{s}.w"], p[f"conv{s}.b"], padding=pad)
            x = ad.dropout(ad.relu(x), cfg.dropout, rng, training)
            retained.append(x)
            if s in cfg.pool_after:
                x = ad.avg_pool2(x)
        win = ad.unfold_depth(x, cfg.depth_after(4))
        h = ad.reshape(win, (b * n_win, -1))
        for i in range(cfg.fc_layers):
            h = ad.relu(ad.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        total = h
        for s, r in enumerate(retained, start=1):
            pooled = ad.window_mean(ad.mean_axes(r, (3, 4)), cfg.depth_after(s))  # (B, C_s, W)
            flat = ad.reshape(ad.permute(pooled, (0, 2, 1)), (b * n_win, -1))
            total = ad.add(total, ad.linear(flat, p[f"skip{s}.w"], p[f"skip{s}.b"]))
        feat = ad.group_norm(ad.elu(total), cfg.groups, p["gn.gain"], p["gn.bias"])
        return ad.reshape(feat, (b, n_win, cfg.feature))

    def step(self, feat, goal, prev_angle, state):
        """One recurrent step. feat (B, F), goal (B, goal_dim) or None, prev_angle (B, 1)."""
        p = self.params
        parts = [feat]
        if self.config.goal_dim:
            if goal is None or goal.shape[1] != self.config.goal_dim:
                raise ContractError(f"worker expects a {self.config.goal_dim}-d goal, got "
                                    f"{None if goal is None else goal.shape}")
            parts.append(goal)
        parts.append(prev_angle)
        h, c = ad.lstm_step(ad.concat(parts, axis=1), state[0], state[1], _lstm_weights(self, "lstm"))
        out = ad.linear(ad.concat([h, feat], axis=1), p["head.w"], p["head.b"])
        return out, (h, c)

    def initial_state(self, batch=1):
        return zero_state(batch, self.config.hidden)

    def forward(self, frames, goal, prev_angle, state=None, training=False, rng=None):
        """Single prediction from an (m, C, H, W) frame sequence.

        ``goal`` is a :class:`SubroutineId` or a Tensor of shape (goal_dim,).
        Returns (angle Tensor of shape (), new LSTM state).
        """
        cfg = self.config
        frames_t = ad.as_tensor(frames)
        if frames_t.shape != (cfg.m, cfg.channels_in, cfg.height, cfg.width):
            raise ShapeError(f"frame sequence {frames_t.shape} != "
                             f"({cfg.m}, {cfg.channels_in}, {cfg.height}, {cfg.width})")
        if isinstance(goal, SubroutineId):
            if goal.tag != self.goal_kind:
                raise ContractError(f"worker configured for {self.goal_kind} ids, got {goal.tag}")
            g = Tensor(goal.as_array()[None]) if goal.dim else None
        elif goal is None:
            if cfg.goal_dim:
                raise ContractError(f"worker configured for {self.goal_kind} ids, got none")
            g = None
        else:
            g = ad.reshape(goal, (1, -1))
        prev = prev_angle if isinstance(prev_angle, Tensor) else Tensor(float(prev_angle))
        prev = ad.reshape(prev, (1, 1))
        volume = ad.reshape(ad.permute(frames_t, (1, 0, 2, 3)), (1, cfg.channels_in, cfg.m, cfg.height, cfg.width))
        feat = ad.reshape(self.encode(volume, training, rng), (1, cfg.feature))
        out, state = self.step(feat, g, prev, state or self.initial_state(1))
        return ad.reshape(out, ()), state


def worker_forward(worker, frames, goal, prev_angle, state=None):
    """Inference-mode worker prediction as a float."""
    with ad.no_grad():
        angle, _ = worker.forward(frames, goal, prev_angle, state)
    return float(angle.data)


# --- learned-goal manager ---------------------------------------------------------------

@dataclass
class ManagerConfig:
    m: int = 10
    conv_channels: tuple = (8, 16, 16)
    kernel: int = 3
    feature: int = 32
    fc_layers: int = 2
    hidden: int = 32
    dropout: float = 0.25
    groups: int = 4

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)

    def validate(self):
        if len(self.conv_channels) != 3:
            raise ConfigError(f"subroutine id network needs exactly 3 conv stages, got {len(self.conv_channels)}")
        if self.kernel % 2 == 0:
            raise ConfigError("manager kernel size must be odd")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.feature % self.groups:
            raise ConfigError(f"feature width {self.feature} not divisible by {self.groups} groups")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.dropout}")


class SubroutineIdNet(Module):
    """Manager for the learned mode: m previous angles -> one unbounded goal value."""

    head_activation = None

    def __init__(self, config=None, seed=0):
        super().__init__()
        cfg = config or ManagerConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        c_in = 1
        for s, c_out in enumerate(cfg.conv_channels, start=1):
            self._param(f"conv{s}.w", _he(rng, (c_out, c_in, cfg.kernel), c_in * cfg.kernel))
            self._param(f"conv{s}.b", np.zeros(c_out))
            self._param(f"skip{s}.w", _glorot(rng, (c_out, cfg.feature), c_out, cfg.feature))
            self._param(f"skip{s}.b", np.zeros(cfg.feature))
            c_in = c_out
        width = c_in * cfg.m
        for i in range(cfg.fc_layers):
            self._param(f"fc{i}.w", _he(rng, (width, cfg.feature), width))
            self._param(f"fc{i}.b", np.zeros(cfg.feature))
            width = cfg.feature
        self._param("gn.gain", np.ones(cfg.feature))
        self._param("gn.bias", np.zeros(cfg.feature))
        _lstm_params(self, "lstm", cfg.feature, cfg.hidden, rng)
        self._param("head.w", _glorot(rng, (cfg.hidden + cfg.feature, 1), cfg.hidden + cfg.feature, 1))
        self._param("head.b", np.zeros(1))

    def initial_state(self, batch=1):
        return zero_state(batch, self.config.hidden)

    def step(self, history, state, training=False, rng=None):
        """history (B, m), oldest first -> goal (B, 1)."""
        cfg = self.config
        p = self.params
        history = ad.as_tensor(history)
        if history.ndim != 2 or history.shape[1] != cfg.m:
            raise ShapeError(f"manager history {history.shape} must be (B, {cfg.m})")
        b = history.shape[0]
        x = ad.reshape(history, (b, 1, cfg.m))
        retained = []
        for s in range(1, 4):
            x = ad.conv1d(x, p[f"conv{s}.w"], p[f"conv{s}.b"], padding=cfg.kernel // 2)
            x = ad.dropout(ad.relu(x), cfg.dropout, rng, training)
            retained.append(x)
        h = ad.reshape(x, (b, -1))
        for i in range(cfg.fc_layers):
            h = ad.relu(ad.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        total = h
        for s, r in enumerate(retained, start=1):
            total = ad.add(total, ad.linear(ad.mean_axes(r, (2,)), p[f"skip{s}.w"], p[f"skip{s}.b"]))
        feat = ad.group_norm(ad.elu(total), cfg.groups, p["gn.gain"], p["gn.bias"])
        hs, cs = ad.lstm_step(feat, state[0], state[1], _lstm_weights(self, "lstm"))
        out = ad.linear(ad.concat([hs, feat], axis=1), p["head.w"], p["head.b"])
        return out, (hs, cs)


def manager_learned_forward(manager, prev_angles, state=None):
    """m previous angles (oldest first) -> learned-scalar :class:`SubroutineId`."""
    a = np.asarray(prev_angles, dtype=np.float64)
    if a.shape != (manager.config.m,):
        raise ShapeError(f"manager expects exactly {manager.config.m} angles, got shape {a.shape}")
    with ad.no_grad():
        out, _ = manager.step(Tensor(a[None]), state or manager.initial_state(1))
    return SubroutineId.learned(float(out.data[0, 0]))


# --- t-SNE coordinate manager ---------------------------------------------------------------

@dataclass
class TsneManagerConfig:
    channels_in: int = 3
    height: int = 16
    width: int = 16
    conv_channels: tuple = (8, 16, 16)
    hidden: int = 32

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)

    def validate(self):
        if len(self.conv_channels) != 3:
            raise ConfigError("t-SNE manager uses exactly 3 conv stages")
        if self.height // 8 < 1 or self.width // 8 < 1:
            raise ConfigError(f"frames {self.height}x{self.width} too small for 3 pooling stages")


class TsneManagerNet(Module):
    """Manager for the pred-tsne mode: last frame -> 2-D t-SNE centroid coordinates."""

    def __init__(self, config=None, seed=0):
        super().__init__()
        cfg = config or TsneManagerConfig()
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        c_in = cfg.channels_in
        for s, c_out in enumerate(cfg.conv_channels, start=1):
            self._param(f"conv{s}.w", _he(rng, (c_out, c_in, 3, 3), c_in * 9))
            self._param(f"conv{s}.b", np.zeros(c_out))
            c_in = c_out
        flat = c_in * (cfg.height // 8) * (cfg.width // 8)
        self._param("fc0.w", _he(rng, (flat, cfg.hidden), flat))
        self._param("fc0.b", np.zeros(cfg.hidden))
        self._param("head.w", _glorot(rng, (cfg.hidden, 2), cfg.hidden, 2))
        self._param("head.b", np.zeros(2))

    def predict(self, frames):
        """frames (B, C, H, W) -> (B, 2)."""
        cfg = self.config
        p = self.params
        x = ad.as_tensor(frames)
        if x.ndim != 4 or x.shape[1:] != (cfg.channels_in, cfg.height, cfg.width):
            raise ShapeError(f"t-SNE manager input {x.shape} must be (B, {cfg.channels_in}, {cfg.height}, {cfg.width})")
        for s in range(1, 4):
            x = ad.avg_pool2(ad.relu(ad.conv2d(x, p[f"conv{s}.w"], p[f"conv{s}.b"], padding=1)))
        h = ad.relu(ad.linear(ad.reshape(x, (x.shape[0], -1)), p["fc0.w"], p["fc0.b"]))
        return ad.linear(h, p["head.w"], p["head.b"])


def manager_tsne_forward(manager, frames):
    """(m, C, H, W) frame sequence -> centroid2d :class:`SubroutineId` from its last frame."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"frame sequence must be (m, C, H, W), got {f.shape}")
    with ad.no_grad():
        out = manager.predict(Tensor(f[-1:]))
    return SubroutineId.centroid2d(*out.data[0])


# --- the composite model ------------------------------------------------------------------------

class FeudalModel:
    """A worker plus the manager the mode calls for (none for ``none``/``gt-tsne``)."""

    def __init__(self, mode, worker_config=None, manager_config=None, seed=0):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        wcfg = WorkerConfig(**asdict(worker_config)) if worker_config else WorkerConfig()
        wcfg.goal_dim = GOAL_DIMS[MODE_GOAL[mode]]
        self.worker = WorkerNet(wcfg, seed=seed)
        self.manager = None
        if mode == "learned":
            mcfg = manager_config or ManagerConfig(m=wcfg.m)
            if mcfg.m != wcfg.m:
                raise ConfigError(f"manager history length {mcfg.m} != worker m {wcfg.m}")
            self.manager = SubroutineIdNet(mcfg, seed=seed + 1)
        elif mode == "pred-tsne":
            mcfg = manager_config or TsneManagerConfig(wcfg.channels_in, wcfg.height, wcfg.width)
            self.manager = TsneManagerNet(mcfg, seed=seed + 1)

    @property
    def m(self):
        return self.worker.config.m

    def parameters(self):
        return self.worker.parameters() + (self.manager.parameters() if self.manager else [])

    def describe(self):
        return {
            "mode": self.mode,
            "worker": asdict(self.worker.config),
            "manager_kind": type(self.manager).__name__ if self.manager else None,
            "manager": asdict(self.manager.config) if self.manager else None,
        }


def save_checkpoint(path, model, extra=None):
    """npz container: one array per parameter plus a JSON ``__meta__`` entry."""
    meta = {"version": CHECKPOINT_VERSION, **model.describe(), "extra": extra or {}}
    arrays = {f"worker/{k}": v.data for k, v in model.worker.params.items()}
    if model.manager:
        arrays.update({f"manager/{k}": v.data for k, v in model.manager.params.items()})
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (FeudalModel, extra dict)."""
    from .errors import MissingFileError

    try:
        z = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise MissingFileError(f"checkpoint not found: {path}") from None
    except (OSError, ValueError) as exc:
        raise SchemaError(f"{path}: not a checkpoint ({exc})") from None
    with z:
        if "__meta__" not in z.files:
            raise SchemaError(f"{path}: checkpoint has no metadata")
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        wcfg = WorkerConfig(**meta["worker"])
        mcfg = None
        if meta["manager_kind"] == "SubroutineIdNet":
            mcfg = ManagerConfig(**meta["manager"])
        elif meta["manager_kind"] == "TsneManagerNet":
            mcfg = TsneManagerConfig(**meta["manager"])
        model = FeudalModel(meta["mode"], wcfg, mcfg)
        model.worker.load_state_dict({k[7:]: z[k] for k in z.files if k.startswith("worker/")})
        if model.manager:
            model.manager.load_state_dict({k[8:]: z[k] for k in z.files if k.startswith("manager/")})
    return model, meta.get("extra", {})


# --- unrolling over contiguous sequences -------------------------------------------------------

@dataclass
class UnrollResult:
    preds: Tensor                 # (B, L)
    goals: list = field(default_factory=list)          # per step: (B, goal_dim) Tensor or None
    centroid_preds: Tensor | None = None               # pred-tsne: (B, L, 2)
    manager_inputs: list = field(default_factory=list)  # learned: per step (indices, values), each (B, m)


def frame_volume(frames, starts, length, m, flips=None):
    """Stack frames [n0-m+1, n0+length) of each start n0 into a (B, C, D, H, W) volume."""
    vols = []
    for i, n0 in enumerate(starts):
        lo = n0 - m + 1
        if lo < 0:
            raise InsufficientHistory(f"insufficient history: target {n0} needs frames from {lo}")
        v = frames[lo:n0 + length]
        if flips is not None and flips[i]:
            v = v[..., ::-1]
        vols.append(v.transpose(1, 0, 2, 3))
    return np.ascontiguousarray(np.stack(vols))


def unroll(model, frames, angles, starts, length, goals=None, flips=None, training=False, rng=None,
           teacher_forcing=False, chunk=64):
    """Run the model autoregressively over ``length`` targets from each start index.

    Targets are ``n0 .. n0+length-1``. The worker's previous-angle input is its own
    previous prediction (0 before the first), unless ``teacher_forcing`` feeds
    ground truth. In learned mode the manager sees the m angles preceding each
    target: ground truth for indices before ``n0`` (warm-up), predictions after.
    ``goals`` (gt-tsne only) is a (B, length, 2) array of ground-truth centroids.
    """
    m = model.m
    b = len(starts)
    sign = np.ones(b) if flips is None else np.where(flips, -1.0, 1.0)
    feats = []
    for off in range(0, length, chunk):
        n = min(chunk, length - off)
        vol = frame_volume(frames, [s + off for s in starts], n, m, flips)
        feats.append(model.worker.encode(Tensor(vol), training, rng))
    feats = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)

    centroid_preds = None
    if model.mode == "pred-tsne":
        last = np.stack([frames[s:s + length] for s in starts])
        if flips is not None:
            last = np.where(np.asarray(flips)[:, None, None, None, None], last[..., ::-1], last)
        flat = model.manager.predict(Tensor(last.reshape((b * length,) + last.shape[2:])))
        centroid_preds = ad.reshape(flat, (b, length, 2))
    elif model.mode == "gt-tsne":
        if goals is None or np.shape(goals) != (b, length, 2):
            raise ContractError(f"gt-tsne unroll needs goals of shape {(b, length, 2)}")

    history = []
    if model.mode == "learned":
        if min(starts) < m:
            raise InsufficientHistory(f"insufficient history: learned manager needs {m} angles before target")
        for j in range(m, 0, -1):
            idx = np.array([s - j for s in starts])
            history.append((idx, Tensor((sign * angles[idx])[:, None])))
        mstate = model.manager.initial_state(b)
    wstate = model.worker.initial_state(b)
    prev = Tensor(np.zeros((b, 1)))
    out = UnrollResult(None, centroid_preds=centroid_preds)
    preds = []
    for t in range(length):
        feat = ad.index(feats, (slice(None), t))
        target_idx = np.array([s + t for s in starts])
        if model.mode == "none":
            g = None
        elif model.mode == "gt-tsne":
            g = Tensor(np.asarray(goals)[:, t])
        elif model.mode == "pred-tsne":
            g = ad.index(centroid_preds, (slice(None), t))
        else:
            window = history[-m:]
            idx = np.stack([w[0] for w in window], axis=1)
            if not (idx < target_idx[:, None]).all():
                raise ContractError("manager history reaches the target index")
            hist = ad.concat([w[1] for w in window], axis=1)
            out.manager_inputs.append((idx, hist.data.copy()))
            g, mstate = model.manager.step(hist, mstate, training, rng)
        out.goals.append(g)
        a, wstate = model.worker.step(feat, g, prev, wstate)
        preds.append(a)
        if teacher_forcing:
            prev = Tensor((sign * angles[target_idx])[:, None])
        else:
            prev = a
        if model.mode == "learned":
            history.append((target_idx, prev))
    out.preds = ad.concat(preds, axis=1)
    return out


def rollout(model, frames, angles, lo, hi, goal_fn=None, teacher_forcing=False):
    """Autoregressive predictions over the contiguous slice [lo, hi).

    The first 2m samples are context only; targets are lo+2m .. hi-1.
    ``goal_fn(n)`` supplies ground-truth ids in gt-tsne mode.
    """
    m = model.m
    start = lo + 2 * m
    length = hi - start
    if length < 1:
        raise InsufficientHistory(f"insufficient history: slice [{lo}, {hi}) shorter than 2m+1={2 * m + 1}")
    goals = None
    if model.mode == "gt-tsne":
        if goal_fn is None:
            raise ContractError("gt-tsne rollout needs a goal lookup")
        goals = np.array([[goal_fn(n).as_array() for n in range(start, hi)]])
    with ad.no_grad():
        res = unroll(model, frames, angles, [start], length, goals=goals, teacher_forcing=teacher_forcing)
    preds = res.preds.data[0]
    records = []
    for t, n in enumerate(range(start, hi)):
        g = res.goals[t]
        if g is None:
            sid = SubroutineId.none()
        elif g.shape[1] == 1:
            sid = SubroutineId.learned(g.data[0, 0])
        else:
            sid = SubroutineId.centroid2d(*g.data[0])
        records.append(PredictionRecord(n, float(angles[n]), float(preds[t]), sid))
    return records
