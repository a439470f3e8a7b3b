"""Joint manager/worker training, evaluation and the metric/prediction CSV files."""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embed import kmeans, make_windows, subroutine_lookup, tsne_embed
from .errors import ConfigError, ContractError, InsufficientHistory, ParseError, TrainingError
from .networks import (
    MODES,
    FeudalModel,
    ManagerConfig,
    SubroutineId,
    TsneManagerConfig,
    WorkerConfig,
    rollout,
    unroll,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "rmse", "mae")
METRICS_COLUMNS = ("epoch", "train_loss", "test_rmse", "test_mae")
PREDICTION_COLUMNS = ("n", "truth", "predicted", "sub_id_0", "sub_id_1")


def loss(kind, preds, truths):
    """Mean squared, root mean squared or mean absolute error of two equal-length vectors."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ContractError(f"loss: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ContractError("loss: empty prediction vector")
    d = p - t
    if kind == "mse":
        return float(np.mean(d * d))
    if kind == "rmse":
        return math.sqrt(float(np.mean(d * d)))
    if kind == "mae":
        return float(np.mean(np.abs(d)))
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


@dataclass
class TrainConfig:
    mode: str = "learned"
    m: int = 10
    k: int = 10
    loss: str = "mse"
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    seq_len: int = 32
    seed: int = 0
    dropout: float = 0.25
    conv_channels: tuple = (8, 16, 24, 32)
    kernel: tuple = (2, 3, 3)
    feature: int = 64
    hidden: int = 64
    groups: int = 4
    manager_channels: tuple = (8, 16, 16)
    manager_feature: int = 32
    manager_hidden: int = 32
    augment: bool = True
    clip_norm: float = 5.0
    centroid_weight: float = 1.0
    perplexity: float = 30.0
    tsne_iterations: int = 1000

    def __post_init__(self):
        for name in ("betas", "conv_channels", "kernel", "manager_channels"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 2 <= self.k <= 64:
            raise ConfigError(f"k must be in [2, 64], got {self.k}")
        if self.epochs < 0 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("epochs must be >= 0 and batch_size, seq_len >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        return self

    def worker_config(self, frame_shape):
        c, h, w = frame_shape
        return WorkerConfig(m=self.m, channels_in=c, height=h, width=w, conv_channels=self.conv_channels,
                            kernel=self.kernel, feature=self.feature, hidden=self.hidden,
                            dropout=self.dropout, groups=self.groups)

    def manager_config(self, frame_shape):
        c, h, w = frame_shape
        if self.mode == "learned":
            return ManagerConfig(m=self.m, conv_channels=self.manager_channels, feature=self.manager_feature,
                                 hidden=self.manager_hidden, dropout=self.dropout, groups=self.groups)
        if self.mode == "pred-tsne":
            return TsneManagerConfig(c, h, w, self.manager_channels, self.manager_hidden)
        return None

    def build_model(self, frame_shape):
        self.validate()
        return FeudalModel(self.mode, self.worker_config(frame_shape), self.manager_config(frame_shape), self.seed)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class SubroutineTable:
    """Centroid ids for the training split: windows, their embedding and clustering.

    t-SNE coordinates have an arbitrary, often large, scale; ids handed to the
    networks are divided by the RMS of the centroid table so they are O(1).
    """

    m: int
    windows: list
    embedding: object
    centroids: object

    @classmethod
    def build(cls, records, config):
        windows = make_windows(records, config.m)
        emb = tsne_embed(windows, config.perplexity, config.tsne_iterations, seed=config.seed)
        cs = kmeans(emb, config.k, seed=config.seed)
        return cls(config.m, windows, emb, cs)

    @property
    def scale(self):
        rms = float(np.sqrt(np.mean(self.centroids.centroids ** 2)))
        return rms if rms > 0 else 1.0

    def lookup(self, n):
        sid = subroutine_lookup(n, self.m, self.centroids, self.windows)
        return SubroutineId.centroid2d(*(sid.as_array() / self.scale))

    def goals(self, starts, length):
        return np.array([[self.lookup(s + t).as_array() for t in range(length)] for s in starts])


@dataclass
class MetricsHistory:
    mode: str
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_rmse: list = field(default_factory=list)
    test_mae: list = field(default_factory=list)

    def append(self, epoch, train_loss, test_rmse=None, test_mae=None):
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.test_rmse.append(test_rmse)
        self.test_mae.append(test_mae)

    def __len__(self):
        return len(self.epochs)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.test_rmse, self.test_mae))


@dataclass
class TrainResult:
    model: FeudalModel
    history: MetricsHistory
    table: SubroutineTable | None = None


@dataclass
class EvalResult:
    rmse: float
    mae: float
    records: list


def _needs_table(mode):
    return mode in ("gt-tsne", "pred-tsne")


def epoch_starts(n_train, m, seq_len, rng):
    """Start targets of equal-length blocks tiling [2m, n_train) from a random offset."""
    first = 2 * m
    room = n_train - first
    if room < seq_len:
        return np.array([first]) if room >= 1 else np.array([], dtype=np.int64)
    offset = int(rng.integers(0, min(seq_len, room - seq_len + 1)))
    return np.arange(first + offset, n_train - seq_len + 1, seq_len)


def _block_length(n_train, m, seq_len):
    return min(seq_len, n_train - 2 * m)


def _batch_loss(model, config, frames, angles, starts, length, table, flips, training, rng):
    goals = table.goals(starts, length) if table is not None else None
    res = unroll(model, frames, angles, list(starts), length,
                 goals=goals if model.mode == "gt-tsne" else None,
                 flips=flips, training=training, rng=rng)
    idx = np.asarray(starts)[:, None] + np.arange(length)[None]
    truth = angles[idx]
    if flips is not None:
        truth = np.where(np.asarray(flips)[:, None], -truth, truth)
    total = ad.LOSSES[config.loss](res.preds, Tensor(truth))
    if model.mode == "pred-tsne":
        total = ad.add(total, ad.scale(ad.mse_loss(res.centroid_preds, Tensor(goals)), config.centroid_weight))
    return total


def train_set_loss(model, dataset, config, table=None, frames=None):
    """Loss over the whole training split with dropout off and no augmentation."""
    frames = dataset.load_frames() if frames is None else frames
    angles = dataset.angles()
    length = _block_length(dataset.n_train, config.m, config.seq_len)
    if length < 1:
        raise InsufficientHistory(f"insufficient history: {dataset.n_train} training samples, need > {2 * config.m}")
    starts = np.arange(2 * config.m, dataset.n_train - length + 1, length)
    values = []
    with ad.no_grad():
        for i in range(0, len(starts), 32):
            chunk = starts[i:i + 32]
            values.append(float(_batch_loss(model, config, frames, angles, chunk, length, table,
                                            None, False, None).data) * len(chunk))
    return sum(values) / len(starts)


def train_joint(dataset, config, table=None, model=None, on_epoch=None):
    """Train worker (and manager) jointly; deterministic for a given config.seed.

    Each epoch tiles the training targets ``[2m, n_train)`` with length-``seq_len``
    blocks (random offset), shuffles them and unrolls batches autoregressively.
    Test metrics are recorded after every epoch when the mode can be evaluated on
    the test split.
    """
    config.validate()
    frames = dataset.load_frames()
    angles = dataset.angles()
    m = config.m
    if dataset.n_train <= 2 * m:
        raise InsufficientHistory(
            f"insufficient history: {dataset.n_train} training samples, need more than 2m={2 * m}")
    if _needs_table(config.mode) and table is None:
        table = SubroutineTable.build(dataset.train, config)
    if model is None:
        model = config.build_model(frames.shape[1:])
    history = MetricsHistory(config.mode)
    result = TrainResult(model, history, table)
    if config.epochs == 0:
        return result
    params = model.parameters()
    opt = ad.Adam(params, config.lr, config.betas, config.eps)
    rng = np.random.default_rng([config.seed, 2])
    length = _block_length(dataset.n_train, m, config.seq_len)
    can_flip = config.augment and not _needs_table(config.mode)
    evaluable = config.mode != "gt-tsne" and len(dataset.records) - dataset.n_train > 2 * m
    for epoch in range(1, config.epochs + 1):
        starts = epoch_starts(dataset.n_train, m, length, rng)
        starts = starts[rng.permutation(len(starts))]
        batch_losses = []
        for step, i in enumerate(range(0, len(starts), config.batch_size), start=1):
            batch = starts[i:i + config.batch_size]
            flips = rng.random(len(batch)) < 0.5 if can_flip else None
            total = _batch_loss(model, config, frames, angles, batch, length, table, flips, True, rng)
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {step}")
            grads = ad.backward(total, params)
            g = [grads[p] for p in params]
            ad.clip_grad_norm(g, config.clip_norm)
            opt.step(g)
            batch_losses.append(value)
        rmse = mae = None
        if evaluable:
            ev = evaluate(model, dataset, config, table)
            rmse, mae = ev.rmse, ev.mae
        history.append(epoch, float(np.mean(batch_losses)), rmse, mae)
        log.info("epoch %d: train %s %.6f test rmse %s", epoch, config.loss, history.train_loss[-1], rmse)
        if on_epoch is not None:
            on_epoch(epoch, history)
    return result


def evaluate(model, dataset, config=None, table=None, split="test", teacher_forcing=False):
    """Autoregressive rollout over one split; returns RMSE, MAE and the records.

    ``teacher_forcing`` feeds the true previous angle instead of the previous
    prediction, for comparison with the rollout.
    """
    frames = dataset.load_frames()
    angles = dataset.angles()
    lo, hi = (dataset.n_train, len(dataset.records)) if split == "test" else (0, dataset.n_train)
    if hi <= lo:
        raise ContractError(f"{split} split is empty")
    goal_fn = None
    if model.mode == "gt-tsne":
        if split != "train":
            raise ContractError("gt-tsne ids exist only for embedded (training) windows; evaluate on the train split")
        if table is None:
            raise ContractError("gt-tsne evaluation needs the subroutine table")
        goal_fn = table.lookup
    records = rollout(model, frames, angles, lo, hi, goal_fn, teacher_forcing=teacher_forcing)
    preds = [r.predicted for r in records]
    truths = [r.truth for r in records]
    return EvalResult(loss("rmse", preds, truths), loss("mae", preds, truths), records)


def compare_k(dataset, ks, config):
    """pred-tsne runs over several k; returns [(k, test RMSE)]."""
    rows = []
    for k in ks:
        cfg = replace(config, mode="pred-tsne", k=int(k))
        res = train_joint(dataset, cfg)
        rows.append((int(k), evaluate(res.model, dataset, cfg, res.table).rmse))
    return rows


# --- CSV files --------------------------------------------------------------------------------

def _fmt(v):
    return "" if v is None else repr(float(v))


def write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for epoch, tl, rmse, mae in history.rows():
            w.writerow([epoch, _fmt(tl), _fmt(rmse), _fmt(mae)])


def write_k_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "rmse"])
        for k, rmse in rows:
            w.writerow([k, _fmt(rmse)])


def write_predictions(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in records:
            ids = list(r.sub_id.payload) + [None] * (2 - len(r.sub_id.payload))
            w.writerow([r.n, _fmt(r.truth), _fmt(r.predicted), _fmt(ids[0]), _fmt(ids[1])])


def read_predictions(path):
    """Rows of a predictions CSV as dicts: n (int), truth, predicted (float), sub_id (tuple)."""
    from .errors import MissingFileError, SchemaError

    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise MissingFileError(f"predictions file not found: {path}") from None
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_COLUMNS:
            raise SchemaError(f"{path}: header must be {','.join(PREDICTION_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(PREDICTION_COLUMNS):
                raise ParseError(f"expected {len(PREDICTION_COLUMNS)} fields, got {len(row)}", lineno, path)
            try:
                rows.append({
                    "n": int(row[0]),
                    "truth": float(row[1]),
                    "predicted": float(row[2]),
                    "sub_id": tuple(float(v) for v in row[3:] if v != ""),
                })
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path) from None
    return rows


def config_dict(config):
    return asdict(config)
