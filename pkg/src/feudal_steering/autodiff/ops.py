"""Differentiable operations on :class:`Tensor`.

Broadcasting is deliberately limited to adding a bias vector along the last
axis (``add_bias``); every other binary op requires equal shapes.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import _kernels
from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_node

ACTIVATIONS = ("relu", "elu", "sigmoid", "tanh")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x, b):
    """``x[..., j] + b[j]``: the one broadcasting form the engine supports."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return make_node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def sum(x):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return make_node(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x):
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return make_node(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def mean_axes(x, axes):
    """Mean over ``axes`` (used for global average pooling)."""
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return make_node(x.data.mean(axis=axes), (x,), back, "mean_axes")


# --- shape manipulation ----------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} incompatible along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, back, "concat")


def index(x, key):
    """``x[key]`` with scatter-add backward."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    return make_node(np.array(x.data[key]), (x,), back, "index")


# --- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x, weight, bias=None):
    """Dense layer ``x @ weight (+ bias)`` for x of shape (N, d_in)."""
    out = matmul(x, weight)
    return add_bias(out, bias) if bias is not None else out


# --- activations ------------------------------------------------------------

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def elu(x):
    """ELU with alpha = 1."""
    x = as_tensor(x)
    pos = x.data > 0
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg)
    deriv = np.where(pos, 1.0, neg + 1.0)
    return make_node(out, (x,), lambda g: (g * deriv,), "elu")


def sigmoid(x):
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def activation(x, kind):
    try:
        fn = {"relu": relu, "elu": elu, "sigmoid": sigmoid, "tanh": tanh}[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}") from None
    return fn(x)


# --- convolution and pooling -------------------------------------------------

def _triple(v, name):
    t = (v, v, v) if np.isscalar(v) else tuple(v)
    if len(t) != 3:
        raise ConfigError(f"{name} needs 3 entries, got {v!r}")
    return tuple(int(i) for i in t)


def conv3d(x, kernels, bias=None, stride=1, padding=0):
    """3-D cross-correlation (no kernel flip).

    ``x`` is (C, D, H, W) or batched (N, C, D, H, W); ``kernels`` is
    (C_out, C_in, kd, kh, kw).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    unbatched = x.ndim == 4
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 5 or kernels.ndim != 5:
        raise ShapeError(f"conv3d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    n, c, d, h, w = xd.shape
    co, ci, kd, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv3d: input {x.shape} has {c} channels but kernels {kernels.shape} expect {ci}")
    sd, sh, sw = _triple(stride, "stride")
    pd, ph, pw = _triple(padding, "padding")
    if min(sd, sh, sw) < 1 or min(pd, ph, pw) < 0:
        raise ConfigError(f"conv3d: stride {stride} must be >= 1 and padding {padding} >= 0")
    if d + 2 * pd < kd or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv3d: kernels {kernels.shape} larger than padded input {x.shape} (padding {padding})")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv3d: bias {bias.shape} does not match {co} output channels")

    xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if (pd or ph or pw) else xd
    xp = np.ascontiguousarray(xp)
    do, ho, wo = (d + 2 * pd - kd) // sd + 1, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    cols = _kernels.im2col3d(xp, kd, kh, kw, sd, sh, sw)
    wmat = kernels.data.reshape(co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, do, ho, wo, co).transpose(0, 4, 1, 2, 3))
    if unbatched:
        out = out[0]
    xp_shape = xp.shape

    def back(g):
        g5 = g[None] if unbatched else g
        gm = g5.transpose(0, 2, 3, 4, 1).reshape(-1, co)
        dk = (gm.T @ cols).reshape(kernels.shape)
        dx = None
        if x.track_grad:
            dxp = _kernels.col2im3d(gm @ wmat, xp_shape, kd, kh, kw, sd, sh, sw, do, ho, wo)
            dx = dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
            if unbatched:
                dx = dx[0]
        grads = (dx, dk)
        return grads + (gm.sum(axis=0),) if bias is not None else grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_node(out, parents, back, "conv3d")


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """2-D cross-correlation on (C, H, W) or (N, C, H, W), via :func:`conv3d`."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4 or x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    s = (stride, stride) if np.isscalar(stride) else tuple(stride)
    p = (padding, padding) if np.isscalar(padding) else tuple(padding)
    unbatched = x.ndim == 3
    xb = x.shape if not unbatched else (1,) + x.shape
    x5 = reshape(x, (xb[0], xb[1], 1, xb[2], xb[3]))
    k5 = reshape(kernels, kernels.shape[:2] + (1,) + kernels.shape[2:])
    out = conv3d(x5, k5, bias, (1,) + s, (0,) + p)
    o = out.shape
    return reshape(out, (o[1], o[3], o[4]) if unbatched else (o[0], o[1], o[3], o[4]))


def conv1d(x, kernels, bias=None, stride=1, padding=0):
    """1-D cross-correlation on (C, L) or (N, C, L), via :func:`conv3d`."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input {x.shape} / kernels {kernels.shape} have wrong rank")
    unbatched = x.ndim == 2
    xb = x.shape if not unbatched else (1,) + x.shape
    x5 = reshape(x, (xb[0], xb[1], 1, 1, xb[2]))
    k5 = reshape(kernels, kernels.shape[:2] + (1, 1, kernels.shape[2]))
    out = conv3d(x5, k5, bias, (1, 1, int(stride)), (0, 0, int(padding)))
    o = out.shape
    return reshape(out, (o[1], o[4]) if unbatched else (o[0], o[1], o[4]))


def avg_pool2(x):
    """2x2 average pooling over the last two axes (odd trailing rows/cols dropped)."""
    x = as_tensor(x)
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    if h == 0 or w == 0:
        raise ShapeError(f"avg_pool2: input {x.shape} too small to pool")
    lead = x.shape[:-2]
    crop = x.data[..., :2 * h, :2 * w]
    out = crop.reshape(lead + (h, 2, w, 2)).mean(axis=(-3, -1))
    full = x.shape

    def back(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0
        if up.shape == full:
            return (up,)
        z = np.zeros(full)
        z[..., :2 * h, :2 * w] = up
        return (z,)

    return make_node(out, (x,), back, "avg_pool2")


def window_mean(x, size):
    """Sliding mean of length ``size`` along the last axis (stride 1, no padding)."""
    x = as_tensor(x)
    length = x.shape[-1]
    if not 1 <= size <= length:
        raise ShapeError(f"window_mean: window {size} does not fit last axis of {x.shape}")
    out = sliding_window_view(x.data, size, axis=-1).mean(axis=-1)

    def back(g):
        pad = [(0, 0)] * (g.ndim - 1) + [(size - 1, size - 1)]
        gp = np.pad(g, pad)
        return (sliding_window_view(gp, size, axis=-1).sum(axis=-1) / size,)

    return make_node(out, (x,), back, "window_mean")


def unfold_depth(x, size):
    """(B, C, D, H, W) -> (B, D-size+1, C, size, H, W): every depth window of length ``size``."""
    x = as_tensor(x)
    if x.ndim != 5 or not 1 <= size <= x.shape[2]:
        raise ShapeError(f"unfold_depth: window {size} does not fit input {x.shape}")
    n_win = x.shape[2] - size + 1
    win = sliding_window_view(x.data, size, axis=2)
    out = np.ascontiguousarray(win.transpose(0, 2, 1, 5, 3, 4))
    shape = x.shape

    def back(g):
        dx = np.zeros(shape)
        for o in range(size):
            dx[:, :, o:o + n_win] += g[:, :, :, o].transpose(0, 2, 1, 3, 4)
        return (dx,)

    return make_node(out, (x,), back, "unfold_depth")


# --- normalisation and regularisation -----------------------------------------

def group_norm(x, groups, gain, bias, eps=1e-5, channel_axis=1):
    """Group normalisation followed by a per-channel affine map.

    With the default ``channel_axis=1`` the input is (N, C, ...). Pass
    ``channel_axis=0`` for an unbatched (C, ...) tensor.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if channel_axis == 0:
        lifted = reshape(x, (1,) + x.shape)
        return reshape(group_norm(lifted, groups, gain, bias, eps), x.shape)
    if x.ndim < 2:
        raise ShapeError(f"group_norm: input {x.shape} has no channel axis")
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: gain {gain.shape} / bias {bias.shape} must be ({c},)")
    spatial = x.shape[2:]
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * len(spatial)
    out = xhat * gain.data.reshape(bshape) + bias.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        dxhat = (g * gain.data.reshape(bshape)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(x.shape), dgain, dbias

    return make_node(out, (x, gain, bias), back, "group_norm")


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout: survivors are scaled by 1/(1-rate), inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# --- recurrent cell ------------------------------------------------------------

def lstm_step(x, h, c, weights):
    """One LSTM step. ``weights = (w_x, w_h, b)`` with gate columns ordered i, f, g, o.

    ``x`` is (d_in,) or (N, d_in); ``h``/``c`` match with d_h. Returns (h', c').
    """
    w_x, w_h, b = (as_tensor(t) for t in weights)
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    unbatched = x.ndim == 1
    if unbatched:
        x, h, c = (reshape(t, (1, t.shape[0])) for t in (x, h, c))
    dh = h.shape[1]
    if (w_x.ndim != 2 or w_x.shape != (x.shape[1], 4 * dh) or w_h.shape != (dh, 4 * dh)
            or b.shape != (4 * dh,) or c.shape != h.shape or x.shape[0] != h.shape[0]):
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} inconsistent with "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}"
        )
    z = add_bias(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(index(z, (slice(None), slice(0, dh))))
    f = sigmoid(index(z, (slice(None), slice(dh, 2 * dh))))
    g = tanh(index(z, (slice(None), slice(2 * dh, 3 * dh))))
    o = sigmoid(index(z, (slice(None), slice(3 * dh, 4 * dh))))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    if unbatched:
        return reshape(h_new, (dh,)), reshape(c_new, (dh,))
    return h_new, c_new


# --- losses ------------------------------------------------------------------

def _loss_inputs(pred, target):
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"loss: predictions {pred.shape} and targets {t.shape} differ")
    if pred.size == 0:
        raise ShapeError("loss: empty prediction vector")
    return pred, t


def mse_loss(pred, target):
    pred, t = _loss_inputs(pred, target)
    diff = pred.data - t
    n = diff.size
    return make_node(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def rmse_loss(pred, target):
    pred, t = _loss_inputs(pred, target)
    diff = pred.data - t
    n = diff.size
    r = float(np.sqrt(np.mean(diff * diff)))

    def back(g):
        if r == 0.0:
            return (np.zeros_like(diff),)
        return (g * diff / (n * r),)

    return make_node(np.array(r), (pred,), back, "rmse")


def mae_loss(pred, target):
    pred, t = _loss_inputs(pred, target)
    diff = pred.data - t
    n = diff.size
    return make_node(np.array(np.mean(np.abs(diff))), (pred,), lambda g: (g * np.sign(diff) / n,), "mae")


LOSSES = {"mse": mse_loss, "rmse": rmse_loss, "mae": mae_loss}
