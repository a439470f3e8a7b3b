"""Tensor type and the reverse-mode sweep.

Each tensor produced by an operation remembers its parents and a closure that
maps the output gradient to parent gradients. Creation order is recorded with a
global counter, so sorting the reachable nodes by that counter gives a valid
topological order (parents are always created before their children).
"""
import itertools
import threading
from contextlib import contextmanager

import numpy as np

from ..errors import ContractError

_counter = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    Tensors compare and hash by identity so they can key gradient maps.
    """

    __slots__ = ("data", "track_grad", "grad", "_parents", "_backward", "_order", "op", "__weakref__")

    def __init__(self, values, track_grad=False):
        self.data = np.array(values, dtype=np.float64)
        self.track_grad = bool(track_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._order = next(_counter)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", track_grad=True" if self.track_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward, op):
    """Wrap ``data`` as the output of an operation.

    ``backward(g)`` must return one gradient array (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._order = next(_counter)
    out.op = op
    needs = grad_enabled() and any(p.track_grad for p in parents)
    out.track_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def graph_nodes(root):
    """All tracked nodes reachable from ``root`` in reverse creation order."""
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.track_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._order, reverse=True)


def backward(loss, params=None):
    """Back-propagate a scalar ``loss``.

    Returns ``{tensor: gradient array}``. When ``params`` is given every entry is
    present, with zeros for parameters the loss does not reach; otherwise the
    map covers the tracked leaves that were reached. Each leaf's ``.grad`` is
    also set (overwritten, not accumulated). Asking for an untracked tensor is
    a ContractError.
    """
    if params is not None:
        params = list(params)
        for p in params:
            if not p.track_grad:
                raise ContractError(f"gradient requested for an untracked tensor of shape {p.shape}")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    if loss.track_grad:
        for node in graph_nodes(loss):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    leaves.append((node, g))
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.track_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    result = {}
    for node, g in leaves:
        node.grad = g
        result[node] = g
    if params is not None:
        out = {}
        for p in params:
            g = result.get(p)
            if g is None:
                g = np.zeros_like(p.data)
                p.grad = g
            out[p] = g
        return out
    return result
