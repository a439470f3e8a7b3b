"""Command-line entry point: ``feudal-steering <command> [options]``.

Commands: synth, embed, cluster, train, eval, predict, plot. Options may also
come from a flat ``key=value`` file given with ``--config``; flags win over the
file, and relative paths in the file resolve against the file's directory.
Errors are printed as ``error[<kind>]: <message>`` with exit status 2.
"""
import argparse
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .data import load_log, split, synth_generate
from .embed import (
    CentroidSet,
    cluster_report,
    kmeans,
    load_embedding,
    make_windows,
    save_embedding,
    tsne_embed,
    verify_windows,
    window_sign_label,
)
from .errors import ConfigError, ContractError, FeudalError, InsufficientHistory
from .networks import load_checkpoint, rollout, save_checkpoint
from .svg import line_chart_svg, scatter_svg, write_svg
from .training import (
    SubroutineTable,
    TrainConfig,
    evaluate,
    read_predictions,
    train_joint,
    write_metrics,
    write_predictions,
)

log = logging.getLogger("feudal_steering")

PATH_KEYS = ("log", "frame_dir", "out_dir", "checkpoint", "embedding", "predictions")
EXTRA_KEYS = {"train_fraction": 0.75, "n": 400, "image_size": 16, "noise": 0.1, "n_nearest": 5,
              "zero_band": 0.05, "iterations": 1000, "centroid_color": "red"}
TSNE_MODES = ("gt-tsne", "pred-tsne")


# --- config file ---------------------------------------------------------------------------

def _coerce(key, text, like):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            kind = type(like[0]) if like else float
            return tuple(kind(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"config key {key}: cannot read {text!r} as {type(like).__name__}") from None
    return text


def config_defaults():
    d = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    d.update(EXTRA_KEYS)
    return d


def read_config_file(path):
    """Parse a ``key=value`` file; '#' starts a comment. Unknown keys are rejected."""
    from .errors import MissingFileError, ParseError

    if not os.path.isfile(path):
        raise MissingFileError(f"config file not found: {path}")
    defaults = config_defaults()
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", lineno, path)
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key in PATH_KEYS:
                out[key] = value if os.path.isabs(value) else os.path.normpath(os.path.join(base, value))
            elif key in defaults:
                out[key] = _coerce(key, value, defaults[key])
            else:
                raise ConfigError(f"{path}:line {lineno}: unknown config key {key!r}")
    return out


class Settings:
    """Flag value if given, else config-file value, else the default."""

    def __init__(self, args, file_values):
        self.args = args
        self.file = file_values
        self.defaults = config_defaults()

    def get(self, key, default=None):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.file:
            return self.file[key]
        return self.defaults.get(key, default)

    def path(self, key):
        return self.get(key)

    def train_config(self, **override):
        values = {f.name: self.get(f.name) for f in fields(TrainConfig)}
        values.update(override)
        return TrainConfig(**values).validate()


# --- helpers -------------------------------------------------------------------------------

def load_dataset(log_path, train_fraction, frame_dir=None):
    """Frame paths in the log resolve against ``frame_dir``, else the log's directory."""
    if log_path is None:
        raise ConfigError("no driving log given (--log or log= in the config file)")
    records = load_log(log_path)
    if not records:
        raise InsufficientHistory(f"insufficient history: {log_path} has no records")
    return split(records, train_fraction, base_dir=frame_dir or os.path.dirname(os.path.abspath(log_path)))


def _ensure_parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _svg_path(path):
    return os.path.splitext(path)[0] + ".svg"


def _table_from_extra(extra, dataset, m):
    tab = extra.get("table")
    if not tab:
        return None
    cs = CentroidSet(np.array(tab["centroids"], dtype=np.float64), np.array(tab["labels"], dtype=np.int64))
    windows = make_windows(dataset.train, m)
    if len(windows) < len(cs.labels):
        raise ContractError("driving log has fewer windows than the checkpoint's embedding")
    return SubroutineTable(m, windows, None, cs)


# --- commands ------------------------------------------------------------------------------

def cmd_synth(s):
    out = s.args.out or s.get("out_dir") or "."
    n = s.get("n")
    sd = synth_generate(n, seed=s.get("seed"), image_size=s.get("image_size"), noise=s.get("noise"),
                        out_dir=out, train_fraction=s.get("train_fraction"))
    print(f"wrote {len(sd.dataset.records)} records and frames to {out}")
    return 0


def cmd_embed(s):
    ds = load_dataset(s.path("log"), s.get("train_fraction"))
    m = s.get("m")
    records = ds.records if s.args.split == "all" else ds.train
    windows = make_windows(records, m)
    if len(windows) < 1:
        raise InsufficientHistory(f"insufficient history: {len(records)} records make no window of m={m}")
    emb = tsne_embed(windows, s.get("perplexity"), s.get("iterations"), seed=s.get("seed"))
    out = s.args.out or os.path.join(s.get("out_dir") or ".", "embedding.json")
    _ensure_parent(out)
    meta = {"log": os.path.abspath(s.path("log")), "split": s.args.split, "seed": s.get("seed")}
    save_embedding(out, emb, meta=meta)
    labels = [window_sign_label(w, s.get("zero_band")) for w in windows]
    write_svg(_svg_path(out), scatter_svg(emb.coords, labels, title=f"t-SNE of {len(windows)} action windows (m={m})"))
    print(f"embedded {len(windows)} windows, KL {emb.kl_trace[0][1]:.4f} -> {emb.kl_trace[-1][1]:.4f}; wrote {out}")
    return 0


def cmd_cluster(s):
    path = s.path("embedding")
    if path is None:
        raise ConfigError("no embedding given (--embedding)")
    emb, _, meta = load_embedding(path)
    k = s.get("k")
    if k > len(emb):
        raise ContractError(f"cannot make k={k} clusters from {len(emb)} points")
    cs = kmeans(emb, k, seed=s.get("seed"))
    report = cluster_report(cs, emb, s.get("n_nearest"))
    out = s.args.out or os.path.join(s.get("out_dir") or ".", "clusters.json")
    _ensure_parent(out)
    save_embedding(out, emb, cs, meta={**meta, "k": k, "report": report})
    labels = ["near-zero"] * len(emb)
    log_path = meta.get("log")
    if log_path and os.path.isfile(log_path):
        ds = load_dataset(log_path, s.get("train_fraction"))
        recs = ds.records if meta.get("split") == "all" else ds.train
        windows = make_windows(recs, emb.m)
        verify_windows(emb, windows)
        labels = [window_sign_label(w, s.get("zero_band")) for w in windows[: len(emb)]]
    write_svg(_svg_path(out), scatter_svg(emb.coords, labels, cs.centroids, s.get("centroid_color"),
                                          title=f"K-means, k={k}"))
    for c, taus in enumerate(report):
        size = int(np.sum(cs.labels == c))
        x, y = cs.centroids[c]
        print(f"cluster {c}: size={size} centroid=({x:.3f},{y:.3f}) nearest_windows={taus}")
    print(f"inertia {cs.inertia:.6g} after {cs.n_iter} Lloyd iterations; wrote {out}")
    return 0


def cmd_train(s):
    cfg = s.train_config()
    ds = load_dataset(s.path("log"), s.get("train_fraction"), s.path("frame_dir"))
    table = None
    emb_path = s.path("embedding")
    if cfg.mode in TSNE_MODES and emb_path:
        emb, cs, _ = load_embedding(emb_path)
        if cs is None:
            raise ContractError(f"{emb_path} has no clusters; run `cluster` first")
        if emb.m != cfg.m:
            raise ConfigError(f"embedding was built with m={emb.m}, training uses m={cfg.m}")
        windows = make_windows(ds.train, cfg.m)
        verify_windows(emb, windows)
        table = SubroutineTable(cfg.m, windows, emb, cs)
    res = train_joint(ds, cfg, table)
    out_dir = s.get("out_dir") or "."
    os.makedirs(out_dir, exist_ok=True)
    metrics = s.args.metrics or os.path.join(out_dir, "metrics.csv")
    ckpt = s.path("checkpoint") or os.path.join(out_dir, "model.npz")
    _ensure_parent(metrics)
    _ensure_parent(ckpt)
    write_metrics(metrics, res.history)
    frame_dir = s.path("frame_dir")
    extra = {"log": os.path.abspath(s.path("log")), "train_fraction": s.get("train_fraction"),
             "frame_dir": frame_dir and os.path.abspath(frame_dir),
             "train_config": asdict(cfg)}
    if res.table is not None:
        extra["table"] = {"centroids": res.table.centroids.centroids.tolist(),
                          "labels": res.table.centroids.labels.tolist()}
    save_checkpoint(ckpt, res.model, extra)
    last = res.history.rows()[-1] if len(res.history) else None
    summary = "no epochs run" if last is None else (
        f"final train {cfg.loss}={last[1]:.6f}" + ("" if last[2] is None else f" test rmse={last[2]:.6f}"))
    print(f"mode={cfg.mode} epochs={cfg.epochs}: {summary}; wrote {ckpt} and {metrics}")
    return 0


def _eval_one(ckpt, s, out):
    model, extra = load_checkpoint(ckpt)
    log_path = s.path("log") or extra.get("log")
    frac = s.args.train_fraction if s.args.train_fraction is not None else extra.get("train_fraction", 0.75)
    ds = load_dataset(log_path, frac, s.path("frame_dir") or extra.get("frame_dir"))
    split_name = s.args.split
    table = None
    if model.mode == "gt-tsne":
        table = _table_from_extra(extra, ds, model.m)
        if split_name == "test":
            log.warning("gt-tsne ids exist only for embedded training windows; evaluating on the train split")
            split_name = "train"
    res = evaluate(model, ds, table=table, split=split_name)
    forced = evaluate(model, ds, table=table, split=split_name, teacher_forcing=True)
    _ensure_parent(out)
    write_predictions(out, res.records)
    print(f"mode={model.mode} split={split_name} n={len(res.records)} rmse={res.rmse:.6f} mae={res.mae:.6f} "
          f"teacher_forced_rmse={forced.rmse:.6f} checkpoint={ckpt}")


def cmd_eval(s):
    ckpts = s.args.checkpoint or ([s.path("checkpoint")] if s.path("checkpoint") else [])
    if not ckpts:
        raise ConfigError("no checkpoint given (--checkpoint)")
    base = s.args.predictions or os.path.join(s.get("out_dir") or ".", "predictions.csv")
    for ck in ckpts:
        out = base
        if len(ckpts) > 1:
            stem, ext = os.path.splitext(base)
            out = f"{stem}-{os.path.splitext(os.path.basename(ck))[0]}{ext}"
        _eval_one(ck, s, out)
    return 0


def _parse_range(text, limit):
    try:
        a, b = text.split(":")
        lo = int(a) if a else 0
        hi = int(b) if b else limit
    except ValueError:
        raise ConfigError(f"--range must look like START:STOP, got {text!r}") from None
    if not 0 <= lo <= hi <= limit:
        raise ContractError(f"range {lo}:{hi} outside the log's 0:{limit}")
    return lo, hi


def cmd_predict(s):
    ck = s.path("checkpoint")
    if ck is None:
        raise ConfigError("no checkpoint given (--checkpoint)")
    model, extra = load_checkpoint(ck)
    ds = load_dataset(s.path("log") or extra.get("log"), extra.get("train_fraction", 0.75),
                      s.path("frame_dir") or extra.get("frame_dir"))
    lo, hi = _parse_range(s.args.range or ":", len(ds.records))
    if hi - lo <= 2 * model.m:
        raise InsufficientHistory(f"insufficient history: range {lo}:{hi} has {hi - lo} samples, "
                                  f"need more than 2m={2 * model.m}")
    goal_fn = None
    if model.mode == "gt-tsne":
        table = _table_from_extra(extra, ds, model.m)
        goal_fn = table.lookup
    records = rollout(model, ds.load_frames(), ds.angles(), lo, hi, goal_fn)
    out = s.args.predictions or os.path.join(s.get("out_dir") or ".", "predictions.csv")
    _ensure_parent(out)
    write_predictions(out, records)
    print(f"predicted {len(records)} angles for n in [{records[0].n}, {records[-1].n}]; wrote {out}")
    return 0


def cmd_plot(s):
    path = s.path("predictions")
    if path is None:
        raise ConfigError("no predictions file given (--predictions)")
    rows = read_predictions(path)
    ids = [r["sub_id"] for r in rows]
    width = {len(i) for i in ids}
    sub_ids = np.array(ids) if rows and len(width) == 1 and width != {0} else None
    text = line_chart_svg([r["n"] for r in rows], [r["truth"] for r in rows], [r["predicted"] for r in rows],
                          sub_ids, title="steering angle: truth vs predicted")
    out = s.args.out or os.path.join(s.get("out_dir") or ".", "predictions.svg")
    _ensure_parent(out)
    write_svg(out, text)
    print(f"plotted {len(rows)} predictions to {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "embed": cmd_embed, "cluster": cmd_cluster, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict, "plot": cmd_plot}


def build_parser():
    p = argparse.ArgumentParser(prog="feudal-steering",
                                description="Hierarchical manager/worker steering-angle prediction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--out-dir", dest="out_dir", help="directory for outputs (default .)")
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic driving set")
    sp.add_argument("--n", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--out", help="dataset directory (default: --out-dir)")

    sp = sub.add_parser("embed", parents=[common], help="t-SNE embed the action windows of a log")
    sp.add_argument("--log")
    sp.add_argument("--m", type=int)
    sp.add_argument("--perplexity", type=float)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--split", choices=("train", "all"), default="train")
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)
    sp.add_argument("--zero-band", dest="zero_band", type=float)
    sp.add_argument("--out", help="embedding file (default OUT_DIR/embedding.json)")

    sp = sub.add_parser("cluster", parents=[common], help="K-means on an embedding")
    sp.add_argument("--embedding")
    sp.add_argument("--k", type=int)
    sp.add_argument("--n-nearest", dest="n_nearest", type=int)
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)
    sp.add_argument("--zero-band", dest="zero_band", type=float)
    sp.add_argument("--centroid-color", dest="centroid_color")
    sp.add_argument("--out", help="clustered embedding file (default OUT_DIR/clusters.json)")

    sp = sub.add_parser("train", parents=[common], help="train worker and manager jointly")
    sp.add_argument("--log")
    sp.add_argument("--frame-dir", dest="frame_dir", help="directory frame paths resolve against (default: the log's)")
    sp.add_argument("--mode", choices=("gt-tsne", "pred-tsne", "learned", "none"))
    sp.add_argument("--embedding", help="clustered embedding for the t-SNE modes (computed if absent)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--m", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--loss", choices=("mse", "rmse", "mae"))
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)
    sp.add_argument("--checkpoint", help="checkpoint to write (default OUT_DIR/model.npz)")
    sp.add_argument("--metrics", help="metrics CSV to write (default OUT_DIR/metrics.csv)")

    sp = sub.add_parser("eval", parents=[common], help="roll out checkpoints over a split")
    sp.add_argument("--checkpoint", nargs="+")
    sp.add_argument("--log", help="driving log (default: the one used for training)")
    sp.add_argument("--frame-dir", dest="frame_dir", help="directory frame paths resolve against (default: the log's)")
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--train-fraction", dest="train_fraction", type=float)
    sp.add_argument("--predictions", help="predictions CSV (default OUT_DIR/predictions.csv)")

    sp = sub.add_parser("predict", parents=[common], help="roll out a checkpoint over a sample range")
    sp.add_argument("--checkpoint")
    sp.add_argument("--log")
    sp.add_argument("--frame-dir", dest="frame_dir", help="directory frame paths resolve against (default: the log's)")
    sp.add_argument("--range", help="START:STOP sample range (default: whole log)")
    sp.add_argument("--predictions", help="predictions CSV (default OUT_DIR/predictions.csv)")

    sp = sub.add_parser("plot", parents=[common], help="line chart of a predictions CSV")
    sp.add_argument("--predictions")
    sp.add_argument("--out", help="SVG file (default OUT_DIR/predictions.svg)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        return COMMANDS[args.command](Settings(args, file_values))
    except FeudalError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
