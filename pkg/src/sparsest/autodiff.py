"""Small reverse-mode autodiff over numpy arrays.

Only the operations the recurrent models need are provided.  Every op builds
a ``Var`` that remembers its parents and a closure mapping the upstream
gradient to parent gradients; ``backward`` walks the graph in reverse
topological order, visiting each node once.

The delta threshold is not differentiable.  Its value path uses a
straight-through rule (gradient passes at fired positions only, with the
firing mask held fixed), and the threshold itself is trained only through
the smooth firing surrogate ``soft_site_occupancy``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import expit, log_expit

_GRAD_ENABLED = True


class TrainingError(RuntimeError):
    """Non-finite loss, gradient or parameter update."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("value", "parents", "backward_fn", "op")

    def __init__(self, value, parents=(), backward_fn=None, op="const"):
        self.value = np.asarray(value, dtype=np.float64)
        if _GRAD_ENABLED:
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"


class Parameter(Var):
    """Trainable leaf with a gradient accumulator and an optional clamp range."""

    __slots__ = ("grad", "trainable", "clamp", "name")

    def __init__(self, value, name="", trainable=True, clamp=None):
        super().__init__(np.array(value, dtype=np.float64), op="param")
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.clamp = clamp
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def apply_clamp(self):
        if self.clamp is not None:
            lo, hi = self.clamp
            np.clip(self.value, lo, hi, out=self.value)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
               "mul")


def sigmoid(a: Var) -> Var:
    s = expit(a.value)
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def square(a: Var) -> Var:
    return Var(a.value ** 2, (a,), lambda g: (2.0 * g * a.value,), "square")


def mean(a: Var) -> Var:
    n = a.value.size
    return Var(a.value.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def total(a: Var) -> Var:
    return Var(a.value.sum(), (a,), lambda g: (np.full(a.shape, g),), "sum")


def mse(pred: Var, target) -> Var:
    return mean(square(sub(pred, target)))


def channel_slice(a: Var, start: int, stop: int) -> Var:
    """``a[:, start:stop]`` for batched ``(B, C, H, W)`` tensors."""
    def bw(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return Var(a.value[:, start:stop], (a,), bw, "slice")


def stack_scalars(items) -> Var:
    items = [_wrap(v) for v in items]
    return Var(np.array([float(v.value) for v in items]), items,
               lambda g: tuple(np.asarray(gi) for gi in g), "stack")


def mu_logsumexp(terms: Var, mu: float) -> Var:
    """``mu * log(sum(exp(terms / mu)))`` computed with the max shifted out."""
    top = terms.value.max()
    e = np.exp((terms.value - top) / mu)
    value = top + mu * math.log(e.sum())
    soft = e / e.sum()
    return Var(value, (terms,), lambda g: (g * soft,), "lse")


# --- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray, K: int) -> np.ndarray:
    """Columns shaped ``(K * K * C, B * H * W)``, offset-major then channel."""
    B, C, H, W = x.shape
    r = K // 2
    xp = np.zeros((C, B, H + 2 * r, W + 2 * r))
    xp[:, :, r:r + H, r:r + W] = x.transpose(1, 0, 2, 3)
    cols = np.empty((K, K, C, B, H, W))
    for i in range(K):
        for j in range(K):
            cols[i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(K * K * C, B * H * W)


def _flat_kernel(w: np.ndarray) -> np.ndarray:
    c_out, c_in, K, _ = w.shape
    return w.transpose(0, 2, 3, 1).reshape(c_out, K * K * c_in)


def _from_rows(rows: np.ndarray, B: int, H: int, W: int) -> np.ndarray:
    return rows.reshape(-1, B, H, W).transpose(1, 0, 2, 3)


def conv2d_array(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched same-padding cross-correlation, ``(B, C_in, H, W) -> (B, C_out, H, W)``."""
    B, _, H, W = x.shape
    return _from_rows(_flat_kernel(w) @ _im2col(x, w.shape[-1]), B, H, W)


def conv2d(x, w: Var, bias: Var | None = None) -> Var:
    x = _wrap(x)
    B, c_in, H, W = x.shape
    c_out, _, K, _ = w.shape
    cols = _im2col(x.value, K)
    out = _from_rows(_flat_kernel(w.value) @ cols, B, H, W)
    parents = [x, w]
    if bias is not None:
        out = out + bias.value[None, :, None, None]
        parents.append(bias)

    def bw(g):
        g_rows = g.transpose(1, 0, 2, 3).reshape(c_out, B * H * W)
        gw = (g_rows @ cols.T).reshape(c_out, K, K, c_in).transpose(0, 3, 1, 2)
        w_flip = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = conv2d_array(g, w_flip)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return Var(out, parents, bw, "conv")


# --- delta threshold ------------------------------------------------------------

def delta_threshold_backward(upstream_grad, fired_mask, abs_diff=None, theta=0.0, tau=0.05,
                             occupancy_grad=0.0, diff=None):
    """Straight-through value gradient plus the surrogate threshold gradient.

    ``grad_x`` passes ``upstream_grad`` at fired positions and is zero
    elsewhere.  ``grad_theta`` has two parts: ``occupancy_grad`` times the
    derivative of the mean soft firing fraction, and, when the signed
    difference ``diff`` is given, the value-path term obtained by replacing
    the hard gate with ``sigmoid((|diff| - theta) / tau)``.
    """
    grad_x = np.where(fired_mask, upstream_grad, 0.0)
    grad_theta = 0.0
    if abs_diff is None and diff is not None:
        abs_diff = np.abs(diff)
    if abs_diff is not None:
        s = expit((np.asarray(abs_diff) - theta) / tau)
        ds = -s * (1.0 - s) / tau  # d gate / d theta
        if occupancy_grad:
            grad_theta += occupancy_grad * float(np.mean(ds))
        if diff is not None:
            grad_theta += float(np.sum(upstream_grad * diff * ds))
    return grad_x, grad_theta


def delta_threshold(x, x_hat, theta: Var, tau: float | None = None):
    """Thresholded delta and the updated reference, as two tape nodes.

    Returns ``(delta, new_x_hat, fired_mask)``.  The mask is treated as a
    constant for the gradients to ``x`` and ``x_hat``.  Without ``tau`` the
    threshold receives no gradient here; with ``tau`` it receives the
    sigmoid-relaxed gate gradient of both outputs.
    """
    x, x_hat = _wrap(x), _wrap(x_hat)
    diff = x.value - x_hat.value
    fired = np.abs(diff) > theta.value

    def theta_grad(g):
        if tau is None:
            return None
        return np.asarray(delta_threshold_backward(g, fired, None, float(theta.value), tau,
                                                   diff=diff)[1])

    delta = Var(np.where(fired, diff, 0.0), (x, x_hat, theta),
                lambda g: (np.where(fired, g, 0.0), np.where(fired, -g, 0.0), theta_grad(g)),
                "delta")
    new_hat = Var(np.where(fired, x.value, x_hat.value), (x, x_hat, theta),
                  lambda g: (np.where(fired, g, 0.0), np.where(fired, 0.0, g), theta_grad(g)),
                  "delta_ref")
    return delta, new_hat, fired


def soft_fire_fraction(x, x_hat, theta: Var, tau: float) -> Var:
    """Mean over elements of ``sigmoid((|x - x_hat| - theta) / tau)``."""
    x, x_hat = _wrap(x), _wrap(x_hat)
    diff = x.value - x_hat.value
    s = expit((np.abs(diff) - theta.value) / tau)
    n = s.size

    def bw(g):
        ds = g * s * (1.0 - s) / (tau * n)
        gd = ds * np.sign(diff)
        return gd, -gd, -ds.sum()

    return Var(s.mean(), (x, x_hat, theta), bw, "soft_fire")


def soft_site_occupancy(x, x_hat, theta: Var, tau: float) -> Var:
    """Smooth fraction of active sites of a batched ``(B, C, H, W)`` delta.

    A site is softly active with probability ``1 - prod_c (1 - s_c)`` where
    ``s_c`` is the per-channel soft firing value; for one channel this is
    exactly ``soft_fire_fraction``.
    """
    x, x_hat = _wrap(x), _wrap(x_hat)
    diff = x.value - x_hat.value
    z = (np.abs(diff) - theta.value) / tau
    log_quiet = log_expit(-z).sum(axis=1, keepdims=True)  # log prod (1 - s_c)
    quiet = np.exp(log_quiet)
    n_sites = quiet.size

    def bw(g):
        dz = g * quiet * expit(z) / n_sites
        gd = dz * np.sign(diff) / tau
        return gd, -gd, -dz.sum() / tau

    return Var(1.0 - quiet.mean(), (x, x_hat, theta), bw, "soft_occupancy")


# --- backward pass ----------------------------------------------------------------

def _topo_order(root: Var) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    """Accumulate ``d loss / d p`` into ``p.grad`` for every reachable Parameter."""
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.value):
        raise TrainingError(f"non-finite loss {float(loss.value)}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {node.name!r}")
            node.grad = node.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class Adam:
    """Adam with bias correction; parameters are clamped after every step."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        updates = []
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(upd)):
                raise TrainingError(f"non-finite Adam update for {p.name!r} at step {self.t}")
            updates.append(upd)
        for p, upd in zip(self.params, updates):
            p.value -= upd
            p.apply_clamp()

    def state_dict(self):
        return {"t": self.t, "lr": self.lr,
                "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
