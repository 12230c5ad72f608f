"""Dense-tensor reverse-mode automatic differentiation.

A define-by-run tape: every operation returns a new `Tensor` carrying the
backward closure that routes gradients to its inputs. The primitive set is
exactly what the patch-autoencoder workload needs: matmul, broadcast
add/multiply, GELU (tanh form), layer normalization, softmax, reshape and
axis swaps, gathers for patch masking, and mean reductions.

Gradients come back as one flat vector aligned with the parameter layout
(see `grad_flat`), which is the unit every aggregation strategy operates on.

No in-place mutation happens during a forward pass and no operator fusion is
applied; graphs built on disjoint data can be evaluated concurrently.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf from finite inputs."""


_CHECK_FINITE = False
_GRAD_ENABLED = True


def set_check_finite(enabled: bool) -> None:
    """Enable per-op finiteness checks (cheap insurance for tests/debugging)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager that skips tape recording (evaluation-only passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _kernels_for(dtype) -> object:
    # The compiled kernels are float64-only; 32-bit mode (used for the
    # communication-size analogue) routes through the numpy reference.
    if dtype == np.float64:
        return _kernels.active
    return _kernels.pyref


class Tensor:
    """Value node of the compute graph.

    `data` is a numpy array (float64 by default, float32 selectable);
    `requires_grad` marks leaves and anything computed from them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd
        if _CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("non-finite value produced in forward pass")

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def leaf(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Trainable leaf; `data` is copied so the graph never aliases callers."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def const(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _make(data, parents, bwd) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _bwd=bwd)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, out):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g, b.data.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, out):
        return (_unbroadcast(g, a.data.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.data.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, out):
        return (_unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; stacked batch dims follow numpy @ semantics."""
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g, out):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bwd)


def gelu(x) -> Tensor:
    x = _as_tensor(x)
    k = _kernels_for(x.data.dtype)
    y = k.gelu_fwd(x.data)

    def bwd(g, out):
        return (k.gelu_bwd(x.data, g),)

    return _make(y, (x,), bwd)


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = _as_tensor(x)
    k = _kernels_for(x.data.dtype)
    flat = np.ascontiguousarray(x.data.reshape(-1, x.data.shape[-1]))
    y = k.softmax_fwd(flat).reshape(x.data.shape)

    def bwd(g, out):
        gf = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        yf = np.ascontiguousarray(out.data.reshape(-1, g.shape[-1]))
        return (k.softmax_bwd(yf, gf).reshape(x.data.shape),)

    return _make(y, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalize along the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    k = _kernels_for(x.data.dtype)
    cols = x.data.shape[-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, cols))
    y, mean, rstd = k.layernorm_fwd(flat, gamma.data, beta.data, eps)

    def bwd(g, out):
        gf = np.ascontiguousarray(g.reshape(-1, cols))
        dx, dgamma, dbeta = k.layernorm_bwd(flat, gamma.data, mean, rstd, gf)
        return dx.reshape(x.data.shape), dgamma, dbeta

    return _make(y.reshape(x.data.shape), (x, gamma, beta), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)

    def bwd(g, out):
        return (g.reshape(x.data.shape),)

    return _make(x.data.reshape(shape), (x,), bwd)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)

    def bwd(g, out):
        return (np.swapaxes(g, a, b),)

    return _make(np.ascontiguousarray(np.swapaxes(x.data, a, b)), (x,), bwd)


def index_select(x, axis: int, indices) -> Tensor:
    """Rows/slices at `indices` along `axis` (the gather primitive)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def bwd(g, out):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _make(np.take(x.data, idx, axis=axis), (x,), bwd)


def gather_rows(x, idx) -> Tensor:
    """Per-batch row gather: x (B, N, D), idx (B, K) -> (B, K, D).

    Indices must be unique within each batch row (patch masks are), which
    lets the backward use a plain scatter instead of add-at accumulation.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bwd(g, out_t):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[:, :, None], g, axis=1)
        return (gx,)

    return _make(out, (x,), bwd)


def gather_cols(x, idx) -> Tensor:
    """Per-batch scalar gather: x (B, N), idx (B, K) -> (B, K).

    Same per-row uniqueness requirement as `gather_rows`.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g, out_t):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _make(out, (x,), bwd)


def scatter_rows(base, idx, rows) -> Tensor:
    """Copy of `base` (B, N, D) with rows (B, K, D) written at idx (B, K)."""
    base, rows = _as_tensor(base), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    out = base.data.copy()
    out[np.arange(idx.shape[0])[:, None], idx] = rows.data

    def bwd(g, out_t):
        gbase = g.copy()
        gbase[np.arange(idx.shape[0])[:, None], idx] = 0.0
        grows = g[np.arange(idx.shape[0])[:, None], idx]
        return gbase, grows

    return _make(out, (base, rows), bwd)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)

    def bwd(g, out):
        return (_unbroadcast(g, x.data.shape),)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), bwd)


def mean_last(x) -> Tensor:
    """Mean over the last axis (per-patch MSE reduction)."""
    x = _as_tensor(x)
    n = x.data.shape[-1]

    def bwd(g, out):
        return (np.repeat(g[..., None], n, axis=-1) / n,)

    return _make(x.data.mean(axis=-1), (x,), bwd)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def bwd(g, out):
        return (np.full_like(x.data, float(g) / n),)

    return _make(x.data.mean(), (x,), bwd)


# ------------------------------------------------------------------ backward

def backward(output: Tensor, output_grad=None) -> None:
    """Reverse pass from `output`; fills `.grad` on every reachable node.

    Each node is visited exactly once (iterative topological order).
    Raises if `output` carries no recorded graph.
    """
    if not output.requires_grad:
        raise RuntimeError("backward before forward: output has no recorded graph")
    if not np.all(np.isfinite(output.data)):
        raise NonFiniteError("non-finite output; refusing backward")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    if output_grad is None:
        output_grad = np.ones_like(output.data)
    output.grad = np.asarray(output_grad, dtype=output.data.dtype)

    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad, node)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # Copy: closures may hand the same buffer to several parents.
                parent.grad = np.array(g, dtype=parent.data.dtype)
            else:
                parent.grad += g


def grad_flat(output: Tensor, leaves: list[Tensor], sizes: list[int] | None = None) -> np.ndarray:
    """Run backward and pack leaf gradients into one flat vector.

    Output aligns index-for-index with the concatenation of the leaves in
    the given order; leaves not touched by the graph contribute zeros.
    """
    backward(output)
    parts = []
    for t in leaves:
        if t.grad is None:
            parts.append(np.zeros(t.data.size, dtype=t.data.dtype))
        else:
            parts.append(np.ascontiguousarray(t.grad).ravel())
    if not parts:
        return np.zeros(0, dtype=DEFAULT_DTYPE)
    return np.concatenate(parts)


def finite_difference_check(loss_and_grad, params: np.ndarray, epsilon: float,
                            max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_and_grad(params) -> (value, flat gradient)` must rebuild its graph
    per call. `epsilon` is both the central-difference step and the
    denominator stabilizer: err_i = |analytic_i - cd_i| / (|cd_i| + epsilon).
    An empty parameter vector returns 0 by convention.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = np.asarray(params, dtype=DEFAULT_DTYPE)
    if params.size == 0:
        return 0.0

    _, analytic = loss_and_grad(params)
    coords = np.arange(params.size)
    if max_coords is not None and params.size > max_coords:
        coords = np.random.default_rng(seed).choice(params.size, size=max_coords, replace=False)

    worst = 0.0
    for i in coords:
        bumped = params.copy()
        bumped[i] += epsilon
        hi, _ = loss_and_grad(bumped)
        bumped[i] -= 2 * epsilon
        lo, _ = loss_and_grad(bumped)
        cd = (hi - lo) / (2 * epsilon)
        err = abs(analytic[i] - cd) / (abs(cd) + epsilon)
        worst = max(worst, err)
    return worst
