"""Subroutine-id discovery: action windows -> exact t-SNE -> K-means centroids.

Windows are numbered from 1: window ``tau`` holds samples ``[(tau-1)*m, tau*m)``.
A prediction at time ``t`` uses the centroid of window ``t // m``, i.e. the last
window that closed before the one containing ``t``.
"""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, InsufficientHistory, ParseError, SchemaError
from .networks import SubroutineId

EMBEDDING_FORMAT = "feudal-steering-embedding"
EMBEDDING_VERSION = 1


@dataclass(frozen=True)
class ActionWindow:
    tau: int
    vector: np.ndarray = field(repr=False)

    @property
    def m(self):
        return len(self.vector) // 3

    @property
    def steering(self):
        return self.vector[: self.m]

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.vector, dtype=np.float64).tobytes()).hexdigest()[:16]


def make_windows(records, m):
    """Cut records into floor(T/m) windows of [steering x m, throttle x m, brake x m]."""
    if m < 1:
        raise ConfigError(f"window length m must be >= 1, got {m}")
    n_win = len(records) // m
    out = []
    for tau in range(1, n_win + 1):
        chunk = records[(tau - 1) * m: tau * m]
        vec = np.array([r.angle for r in chunk] + [r.throttle for r in chunk] + [r.brake for r in chunk])
        out.append(ActionWindow(tau, vec))
    return out


def window_matrix(windows):
    return np.stack([w.vector for w in windows]) if windows else np.zeros((0, 0))


def window_sign_label(window, zero_band=0.05):
    """'negative' / 'near-zero' / 'positive' from the mean steering; the band is closed."""
    mean = float(np.mean(window.steering))
    if mean < -zero_band:
        return "negative"
    if mean > zero_band:
        return "positive"
    return "near-zero"


# --- t-SNE ------------------------------------------------------------------------

def squared_distances(x):
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def conditional_affinities(x, perplexity, tol=1e-5, max_iter=200):
    """Row-stochastic Gaussian affinities, each row at the target perplexity (bisection)."""
    return _kernels.perplexity_search(squared_distances(np.asarray(x, dtype=np.float64)),
                                      float(perplexity), tol, max_iter)


def joint_probabilities(cond):
    """Symmetrised P = (P_cond + P_cond^T) / 2N."""
    n = cond.shape[0]
    p = (cond + cond.T) / (2.0 * n)
    return p / p.sum()


def row_perplexities(cond):
    """2 ** entropy(bits) of every conditional row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(cond > 0, cond * np.log2(cond), 0.0), axis=1)
    return 2.0 ** ent


def kl_divergence(p, y):
    return _kernels.tsne_gradient(y, p)[1]


@dataclass
class Embedding:
    taus: np.ndarray
    coords: np.ndarray
    p: np.ndarray = field(repr=False)
    cond: np.ndarray = field(repr=False)
    kl_trace: list = field(default_factory=list)
    hashes: list = field(default_factory=list)
    m: int = 0
    perplexity: float = 30.0

    def __len__(self):
        return len(self.taus)


def tsne_embed(windows, perplexity=30.0, iterations=1000, seed=0, learning_rate=200.0,
               exaggeration=12.0, exaggeration_iters=250, momentum=(0.5, 0.8), init_std=1e-4,
               log_every=50):
    """Exact t-SNE of windows (or of an (N, d) array) into 2-D.

    Gradient descent with momentum, per-coordinate adaptive gains and early
    exaggeration. ``kl_trace`` holds (iteration, KL) pairs measured against the
    un-exaggerated P, starting at iteration 0.
    """
    if isinstance(windows, np.ndarray):
        x = np.asarray(windows, dtype=np.float64)
        taus = np.arange(1, len(x) + 1)
        hashes = []
        m = 0
    else:
        x = window_matrix(windows)
        taus = np.array([w.tau for w in windows], dtype=np.int64)
        hashes = [w.digest() for w in windows]
        m = windows[0].m if windows else 0
    if not perplexity > 1.0:
        raise ConfigError(f"perplexity must be > 1, got {perplexity}")
    n = len(x)
    if n <= 3 * perplexity:
        raise ContractError(f"t-SNE with perplexity {perplexity} needs more than {3 * perplexity:g} points, got {n}")
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")

    cond, _ = conditional_affinities(x, perplexity)
    p = joint_probabilities(cond)
    p_work = np.maximum(p, 1e-300)
    rng = np.random.default_rng(seed)
    y = init_std * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = [(0, kl_divergence(p, y))]
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        grad, _ = _kernels.tsne_gradient(y, p_work * exag)
        same = (grad > 0) == (update > 0)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        if log_every and ((it + 1) % log_every == 0 or it + 1 == iterations):
            trace.append((it + 1, kl_divergence(p, y)))
    return Embedding(taus, y, p, cond, trace, hashes, m, float(perplexity))


# --- K-means --------------------------------------------------------------------------

@dataclass
class CentroidSet:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_trace: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self):
        return len(self.centroids)

    @property
    def inertia(self):
        return self.inertia_trace[-1] if self.inertia_trace else float("nan")


def _kmeans_pp(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            j = int(rng.choice(rest))
        chosen.append(j)
        d2 = np.minimum(d2, np.sum((x - x[j]) ** 2, axis=1))
    return x[chosen].copy()


def _repair_empty(x, centroids, labels, d2):
    """Move every empty centroid onto the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=len(centroids))
    empties = np.flatnonzero(counts == 0)
    if len(empties) == 0:
        return False
    d2 = d2.copy()
    for e in empties:
        j = int(np.argmax(d2))
        centroids[e] = x[j]
        d2[j] = -1.0
    return True


def kmeans(points, k, seed=0, max_iter=300):
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    ``inertia_trace[i]`` is the inertia after the i-th assignment step.
    """
    x = np.asarray(points.coords if isinstance(points, Embedding) else points, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"kmeans needs an (N, d) point array, got shape {x.shape}")
    if not 1 <= k <= len(x):
        raise ContractError(f"kmeans: k={k} but only {len(x)} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = _kernels.nearest_centroid(x, centroids)
    trace = [float(d2.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        repaired = _repair_empty(x, new, labels, np.sum((x - new[labels]) ** 2, axis=1))
        new_labels, d2 = _kernels.nearest_centroid(x, new)
        trace.append(float(d2.sum()))
        centroids = new
        done = not repaired and np.array_equal(new_labels, labels)
        labels = new_labels
        if done:
            break
    return CentroidSet(centroids, labels, trace, it)


def purity(cluster_labels, true_labels):
    """Fraction of points whose cluster's majority true label equals their own."""
    cluster_labels = np.asarray(cluster_labels)
    true_labels = np.asarray(true_labels)
    hits = 0
    for c in np.unique(cluster_labels):
        vals, counts = np.unique(true_labels[cluster_labels == c], return_counts=True)
        hits += counts.max()
    return hits / len(true_labels)


def nearest_centroid_purity(coords, true_labels, k, seed=0):
    cs = kmeans(coords, k, seed)
    return purity(cs.labels, true_labels), cs


# --- lookup and reporting ------------------------------------------------------------------

def subroutine_lookup(t, m, centroids, windows):
    """Centroid id for a prediction at time ``t``.

    For ``t`` in ``[tau*m, (tau+1)*m)`` this is the centroid assigned to window
    ``tau`` (samples ``[(tau-1)*m, tau*m)``), so nothing at or after ``tau*m``
    is consulted.
    """
    if t < 2 * m:
        raise InsufficientHistory(f"insufficient history: t={t} < 2m={2 * m}")
    tau = t // m
    if tau > len(centroids.labels) or tau > len(windows):
        raise ContractError(f"window tau={tau} (for t={t}) is not part of the embedding "
                            f"({len(centroids.labels)} windows)")
    w = windows[tau - 1]
    if w.tau != tau:
        raise ContractError(f"window list out of order: position {tau - 1} holds tau={w.tau}")
    c = centroids.centroids[centroids.labels[tau - 1]]
    return SubroutineId.centroid2d(float(c[0]), float(c[1]))


def cluster_report(centroids, points, n_nearest):
    """For every centroid, 1-based window indices of its members, nearest first."""
    coords = np.asarray(points.coords if isinstance(points, Embedding) else points)
    taus = points.taus if isinstance(points, Embedding) else np.arange(1, len(coords) + 1)
    report = []
    for c, centre in enumerate(centroids.centroids):
        members = np.flatnonzero(centroids.labels == c)
        d2 = np.sum((coords[members] - centre) ** 2, axis=1)
        order = members[np.argsort(d2, kind="stable")]
        report.append([int(taus[i]) for i in order[: max(0, n_nearest)]])
    return report


# --- artifact file --------------------------------------------------------------------------

def save_embedding(path, emb, centroids=None, meta=None):
    doc = {
        "format": EMBEDDING_FORMAT,
        "version": EMBEDDING_VERSION,
        "m": int(emb.m),
        "perplexity": emb.perplexity,
        "meta": meta or {},
        "kl_trace": [[int(i), float(v)] for i, v in emb.kl_trace],
        "windows": [
            {
                "tau": int(tau),
                "hash": emb.hashes[i] if emb.hashes else "",
                "x": float(emb.coords[i, 0]),
                "y": float(emb.coords[i, 1]),
                "cluster": None if centroids is None else int(centroids.labels[i]),
            }
            for i, tau in enumerate(emb.taus)
        ],
        "centroids": [] if centroids is None else [
            {"index": i, "x": float(c[0]), "y": float(c[1])} for i, c in enumerate(centroids.centroids)
        ],
        "inertia_trace": [] if centroids is None else [float(v) for v in centroids.inertia_trace],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_embedding(path):
    """Returns (Embedding, CentroidSet or None, meta)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), line=exc.lineno, path=path) from None
    if doc.get("format") != EMBEDDING_FORMAT:
        raise SchemaError(f"{path}: not an embedding artifact")
    if doc.get("version") != EMBEDDING_VERSION:
        raise SchemaError(f"{path}: unsupported embedding version {doc.get('version')}")
    wins = doc["windows"]
    emb = Embedding(
        taus=np.array([w["tau"] for w in wins], dtype=np.int64),
        coords=np.array([[w["x"], w["y"]] for w in wins], dtype=np.float64).reshape(-1, 2),
        p=np.zeros((0, 0)),
        cond=np.zeros((0, 0)),
        kl_trace=[tuple(v) for v in doc.get("kl_trace", [])],
        hashes=[w["hash"] for w in wins],
        m=int(doc["m"]),
        perplexity=float(doc["perplexity"]),
    )
    cs = None
    if doc["centroids"]:
        cs = CentroidSet(
            centroids=np.array([[c["x"], c["y"]] for c in doc["centroids"]], dtype=np.float64),
            labels=np.array([w["cluster"] for w in wins], dtype=np.int64),
            inertia_trace=list(doc.get("inertia_trace", [])),
        )
    return emb, cs, doc.get("meta", {})


def verify_windows(emb, windows):
    """Check that ``windows`` are the ones that were embedded (by content hash)."""
    if len(windows) < len(emb.taus):
        raise ContractError(f"{len(windows)} windows given but the embedding covers {len(emb.taus)}")
    for i, h in enumerate(emb.hashes):
        if h and windows[i].digest() != h:
            raise ContractError(f"window tau={windows[i].tau} differs from the embedded one")

