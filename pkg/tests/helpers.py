"""Shared test oracles: central finite differences and naive convolutions."""
import numpy as np

from feudal_steering import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max abs difference normalised by the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_grads(build, tensors, h=1e-5):
    """Compare reverse-mode gradients of ``build()`` (a scalar Tensor) with finite differences.

    Returns the worst relative error across ``tensors``.
    """
    loss = build()
    grads = ad.backward(loss, tensors)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, h)
        worst = max(worst, rel_error(grads[t], num))
    return worst


def naive_conv3d(x, k, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Six nested loops over output position, plus the kernel/channel sum."""
    c, d, h, w = x.shape
    co, ci, kd, kh, kw = k.shape
    pd, ph, pw = padding
    sd, sh, sw = stride
    xp = np.zeros((c, d + 2 * pd, h + 2 * ph, w + 2 * pw))
    xp[:, pd:pd + d, ph:ph + h, pw:pw + w] = x
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((co, do, ho, wo))
    for o in range(co):
        for z in range(do):
            for y in range(ho):
                for q in range(wo):
                    acc = 0.0
                    for i in range(ci):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += xp[i, z * sd + a, y * sh + b, q * sw + e] * k[o, i, a, b, e]
                    out[o, z, y, q] = acc
    return out


def naive_conv1d(x, k, stride=1, padding=0):
    c, length = x.shape
    co, ci, kw = k.shape
    xp = np.zeros((c, length + 2 * padding))
    xp[:, padding:padding + length] = x
    lo = (length + 2 * padding - kw) // stride + 1
    out = np.zeros((co, lo))
    for o in range(co):
        for q in range(lo):
            acc = 0.0
            for i in range(ci):
                for e in range(kw):
                    acc += xp[i, q * stride + e] * k[o, i, e]
            out[o, q] = acc
    return out


def sampled_grad_check(build, tensors, per_tensor=5, seed=0, h=1e-5):
    """Like ``check_grads`` but probes only a few random entries of each tensor.

    The error of each tensor is normalised by the largest analytic gradient
    entry of that tensor.
    """
    rng = np.random.default_rng(seed)
    grads = ad.backward(build(), tensors)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        scale = max(float(np.max(np.abs(grads[t]))), 1e-8)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            fp = float(build().data)
            flat[i] = old - h
            fm = float(build().data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(grads[t].reshape(-1)[i] - num) / scale)
    return worst
