"""Driving logs, frames, augmentation, splitting and the synthetic generator.

Log CSV schema (header required)::

    t,timestamp_ns,frame_path,angle_rad,throttle,brake

``frame_path`` is relative to the log's directory and points at an 8-bit RGB
portable pixmap (``.ppm``); anything Pillow can decode is accepted on read.
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    ContractError,
    MissingFileError,
    OrderError,
    ParseError,
    SchemaError,
)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("t", "timestamp_ns", "frame_path", "angle_rad", "throttle", "brake")
REGIME_NAMES = {-1: "turn-left", 0: "straight", 1: "turn-right"}


@dataclass(frozen=True)
class DrivingRecord:
    t: int
    timestamp_ns: int | None
    frame_path: str
    angle: float
    throttle: float
    brake: float


@dataclass
class Dataset:
    """Records plus a contiguous train/test partition (``n_train`` leading records are train)."""

    records: list
    n_train: int
    base_dir: str = "."
    frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def train(self):
        return self.records[: self.n_train]

    @property
    def test(self):
        return self.records[self.n_train:]

    def split_of(self, i):
        return "train" if i < self.n_train else "test"

    def angles(self):
        return np.array([r.angle for r in self.records])

    def load_frames(self):
        """Normalised frames for every record, shape (T, C, H, W); cached."""
        if self.frames is None:
            self.frames = np.stack([
                normalize_image(read_frame(os.path.join(self.base_dir, r.frame_path)))
                for r in self.records
            ])
        return self.frames


# --- log IO -------------------------------------------------------------------

def _parse_row(row, lineno, path):
    try:
        t = int(row["t"])
        ts = row["timestamp_ns"].strip()
        ts = int(ts) if ts else None
        angle = float(row["angle_rad"])
        throttle = float(row["throttle"])
        brake = float(row["brake"])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"unparsable numeric field ({exc})", line=lineno, path=path) from None
    if not all(math.isfinite(v) for v in (angle, throttle, brake)):
        raise ParseError("non-finite numeric field", line=lineno, path=path)
    if not (0.0 <= throttle <= 1.0 and 0.0 <= brake <= 1.0):
        raise ParseError(f"throttle/brake outside [0, 1]: {throttle}, {brake}", line=lineno, path=path)
    return DrivingRecord(t, ts, row["frame_path"], angle, throttle, brake)


def load_log(path):
    """Read a driving log; records come back in file order, which must be time order."""
    if not os.path.isfile(path):
        raise MissingFileError(f"driving log not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        if header != LOG_COLUMNS:
            raise SchemaError(f"{path}: header {','.join(header) or '<empty>'} != {','.join(LOG_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(v is None for v in row.values()):
                raise ParseError("wrong number of fields", line=lineno, path=path)
            rec = _parse_row(row, lineno, path)
            if records:
                prev = records[-1]
                if rec.t <= prev.t:
                    raise OrderError(f"{path}:line {lineno}: t={rec.t} not after t={prev.t}")
                if rec.timestamp_ns is not None and prev.timestamp_ns is not None \
                        and rec.timestamp_ns <= prev.timestamp_ns:
                    raise OrderError(f"{path}:line {lineno}: timestamp {rec.timestamp_ns} not increasing")
            records.append(rec)
    return records


def write_log(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.t, "" if r.timestamp_ns is None else r.timestamp_ns, r.frame_path,
                        repr(float(r.angle)), repr(float(r.throttle)), repr(float(r.brake))])


def _companion_stream(path):
    """(timestamps, values) from a two-column-ish CSV with a ``timestamp`` column."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in reader.fieldnames if c != "timestamp"]
        ts, vals = [], []
        for row in reader:
            ts.append(int(row["timestamp"]))
            vals.append(float(row[cols[0]]))
    order = np.argsort(ts, kind="stable")
    return np.asarray(ts)[order], np.clip(np.asarray(vals)[order], 0.0, 1.0)


def load_udacity_log(path, throttle_path=None, brake_path=None, camera="center_camera"):
    """Adapter for Udacity ``interpolated.csv`` (timestamp, frame_id, filename, angle, torque, speed).

    Throttle and brake come from optional companion CSVs (``timestamp`` plus one
    value column), sampled at the last reading at or before each frame. A missing
    stream defaults to 0 with a warning.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"udacity log not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"timestamp", "filename", "angle"}
        if not needed <= set(reader.fieldnames or ()):
            raise SchemaError(f"{path}: expected columns {sorted(needed)}, got {reader.fieldnames}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if "frame_id" in row and camera and row["frame_id"] != camera:
                continue
            try:
                rows.append((int(row["timestamp"]), row["filename"], float(row["angle"])))
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
    streams = {}
    for name, p in (("throttle", throttle_path), ("brake", brake_path)):
        if p is None:
            log.warning("udacity adapter: no %s stream given, defaulting to 0", name)
            streams[name] = None
        else:
            streams[name] = _companion_stream(p)

    def sample(stream, ts):
        if stream is None:
            return 0.0
        times, vals = stream
        i = np.searchsorted(times, ts, side="right") - 1
        return float(vals[i]) if i >= 0 else 0.0

    return [
        DrivingRecord(t, ts, fname, angle, sample(streams["throttle"], ts), sample(streams["brake"], ts))
        for t, (ts, fname, angle) in enumerate(rows)
    ]


# --- frames ---------------------------------------------------------------------

def read_frame(path):
    """8-bit image file -> uint8 array (C, H, W)."""
    if not os.path.isfile(path):
        raise MissingFileError(f"frame not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_frame(path, pixels):
    """uint8 (C, H, W) -> binary PPM."""
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0)), mode="RGB").save(path, format="PPM")


def normalize_image(raw):
    """Map integer pixels 0..255 to [-1, 1] via x / 127.5 - 1."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] not in (1, 3, 4):
        raise ContractError(f"expected (C, H, W) pixels with 1, 3 or 4 channels, got {raw.shape}")
    return raw.astype(np.float64) / 127.5 - 1.0


def denormalize_image(x):
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def augment_flip(frames, angle):
    """Mirror every frame left-right and negate the steering angle."""
    return np.ascontiguousarray(np.asarray(frames)[..., ::-1]), -angle


def frame_window_indices(n, m):
    """Frame indices feeding the prediction at time ``n``: n-m+1 .. n."""
    if n - m + 1 < 0:
        raise ContractError(f"prediction at t={n} needs {m} frames but only {n + 1} exist")
    return list(range(n - m + 1, n + 1))


def split(records, train_fraction=0.75, base_dir="."):
    """Contiguous split: the first ceil(fraction * T) records train, the rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must be in (0, 1), got {train_fraction}")
    records = list(records)
    if not records:
        raise ContractError("cannot split an empty record list")
    n_train = math.ceil(train_fraction * len(records))
    if n_train == len(records):
        log.warning("split of %d records leaves no test records", len(records))
    return Dataset(records, n_train, base_dir)


# --- synthetic data ------------------------------------------------------------------

@dataclass
class SynthData:
    dataset: Dataset
    pixels: np.ndarray  # uint8 (T, 3, H, W)
    regimes: np.ndarray  # -1 left, 0 straight, +1 right per sample


def _ramp_profile(length, ramp):
    u = np.ones(length)
    r = min(ramp, length // 2)
    if r:
        edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(r) + 0.5) / r)
        u[:r] = edge
        u[length - r:] = edge[::-1]
    return u


def synth_steering(n, rng):
    """Regime-structured steering, throttle and brake streams.

    Turns are smooth plateaus with cosine ramps plus a sinusoidal wiggle;
    straight segments carry only a small wiggle around zero.
    """
    angles = np.zeros(n)
    regimes = np.zeros(n, dtype=np.int64)
    brake = np.zeros(n)
    t = 0
    regime = 0
    last_turn = 0
    while t < n:
        length = int(rng.integers(25, 71))
        end = min(n, t + length)
        seg = np.arange(t, end)
        phase = rng.uniform(0, 2 * np.pi)
        if regime == 0:
            angles[seg] = 0.015 * np.sin(2 * np.pi * seg / 17.0 + phase)
        else:
            amp = rng.uniform(0.15, 0.45)
            prof = _ramp_profile(end - t, 6)
            angles[seg] = regime * amp * prof + 0.03 * prof * np.sin(2 * np.pi * seg / 23.0 + phase)
            if last_turn and regime != last_turn:
                k = np.arange(min(10, end - t))
                brake[t + k] = 0.9 * np.exp(-k / 3.0)
            last_turn = regime
        regimes[seg] = regime
        t = end
        if regime == 0:
            regime = int(rng.choice([-1, 1]))
        else:
            regime = 0 if rng.random() < 0.6 else -regime
    throttle = np.clip(0.75 - 0.9 * np.abs(angles) + 0.03 * rng.standard_normal(n), 0.0, 1.0)
    return angles, throttle, np.clip(brake, 0.0, 1.0), regimes


def render_frame(angle, size, noise, rng):
    """A bright anti-aliased line from the bottom centre, tilted by ``angle`` (radians, + = right)."""
    h = w = size
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    ox, oy = w / 2.0, float(h)
    dx, dy = math.sin(angle), -math.cos(angle)
    length = 0.85 * h
    px, py = xs - ox, ys - oy
    u = np.clip(px * dx + py * dy, 0.0, length)
    dist = np.hypot(px - u * dx, py - u * dy)
    cover = np.clip(1.0 - dist, 0.0, 1.0)
    background = np.array([0.25, 0.30, 0.25])[:, None, None]
    line = np.array([1.0, 0.95, 0.70])[:, None, None]
    img = background + (line - background) * cover[None]
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def synth_generate(n, seed, image_size=16, noise=0.1, m=1, out_dir=None, train_fraction=0.75):
    """Deterministic synthetic driving set whose frames encode the steering angle.

    With ``out_dir`` the log (``log.csv``) and frames (``frames/NNNNNN.ppm``) are
    written there as well.
    """
    if n < 4 * m or n < 4:
        raise ContractError(f"synthetic set of {n} samples is too small for m={m} (need >= {max(4, 4 * m)})")
    rng = np.random.default_rng(seed)
    angles, throttle, brake, regimes = synth_steering(n, rng)
    pix_rng = np.random.default_rng([seed, 1])
    pixels = np.stack([render_frame(a, image_size, noise, pix_rng) for a in angles])
    width = max(6, len(str(n - 1)))
    records = [
        DrivingRecord(t, t * 50_000_000, f"frames/{t:0{width}d}.ppm", float(angles[t]),
                      float(throttle[t]), float(brake[t]))
        for t in range(n)
    ]
    ds = split(records, train_fraction, base_dir=out_dir or ".")
    ds.frames = np.stack([normalize_image(p) for p in pixels])
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
        for rec, pix in zip(records, pixels):
            write_frame(os.path.join(out_dir, rec.frame_path), pix)
        write_log(os.path.join(out_dir, "log.csv"), records)
    return SynthData(ds, pixels, regimes)


def window_regimes(regimes, m):
    """Majority regime label per length-m window (trailing remainder dropped)."""
    n_win = len(regimes) // m
    out = np.zeros(n_win, dtype=np.int64)
    for i in range(n_win):
        vals, counts = np.unique(regimes[i * m:(i + 1) * m], return_counts=True)
        out[i] = vals[np.argmax(counts)]
    return out
