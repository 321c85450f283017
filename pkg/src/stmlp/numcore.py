"""Small dense-tensor engine with reverse-mode differentiation.

Only what the forecaster needs: affine maps, elementwise activations,
layer/batch normalization, row lookup, concatenation along the last
axis, broadcasting and a handful of reductions. Arrays are numpy
``float64`` by default; ``float32`` is selectable per tensor.

Backward passes walk the recorded graph in reverse topological order and
accumulate gradients additively, so a tensor used twice receives the sum
of both contributions.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is NaN or infinite."""


class UninitializedStatsError(RuntimeError):
    """Raised when batch norm is evaluated before any running statistics exist."""


class Tensor:
    """Dense array plus an optional gradient buffer.

    ``_parents`` and ``_backward`` record how the tensor was produced; the
    backward closure reads ``self.grad`` and adds into each parent's grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this tensor to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # intermediate buffers are not needed after the sweep
        for node in order:
            if node._parents and node is not self:
                node.grad = None

    # operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)


def _raise_not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    return as_tensor(a, b.dtype), b


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def absolute(x: Tensor) -> Tensor:
    def bw(out: Tensor) -> None:
        x._accumulate(out.grad * np.sign(x.data))

    return _result(np.abs(x.data), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(out: Tensor) -> None:
        x._accumulate(out.grad * mask)

    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), bw)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(out: Tensor) -> None:
        x._accumulate(out.grad * keep)

    return _result(x.data * keep, (x,), bw)


# linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(out: Tensor) -> None:
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    return _result(a.data @ b.data, (a, b), bw)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., j] = sum_k x[..., k] W[k, j] + b[j]`` over the trailing axis."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine dimension mismatch: x{x.shape} vs W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"affine bias shape {b.shape} != ({W.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(out: Tensor) -> None:
        g2 = out.grad.reshape(-1, W.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ W.data.T).reshape(x.shape))
        if W.requires_grad:
            W._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _result(y.reshape(*lead, W.shape[1]), parents, bw)


def mix_nodes(x: Tensor, M: Tensor, c: Tensor | None = None) -> Tensor:
    """Affine map over the node axis of a ``(B, N, d)`` tensor.

    ``y[b, i, k] = sum_j M[i, j] x[b, j, k] + c[i]``. This is the only
    operator in the package that moves information between nodes.
    """
    if x.ndim != 3 or M.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"mix_nodes expects x(B,N,d) and M(N,N); got {x.shape}, {M.shape}")
    y = np.einsum("ij,bjk->bik", M.data, x.data)
    if c is not None:
        y = y + c.data[None, :, None]
    parents = (x, M) if c is None else (x, M, c)

    def bw(out: Tensor) -> None:
        g = out.grad
        if x.requires_grad:
            x._accumulate(np.einsum("ij,bik->bjk", M.data, g))
        if M.requires_grad:
            M._accumulate(np.einsum("bik,bjk->ij", g, x.data))
        if c is not None and c.requires_grad:
            c._accumulate(g.sum(axis=(0, 2)))

    return _result(y, parents, bw)


# shape ops --------------------------------------------------------------

def concat_last(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing axis; leading extents must agree."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_last needs at least one input")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_last leading-shape mismatch: {lead} vs {x.shape[:-1]}")
    widths = [x.shape[-1] for x in xs]
    bounds = np.cumsum([0] + widths)

    def bw(out: Tensor) -> None:
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                x._accumulate(out.grad[..., lo:hi])

    return _result(np.concatenate([x.data for x in xs], axis=-1), xs, bw)


def take_rows(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back into selected rows."""
    index = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def bw(out: Tensor) -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, index, out.grad)
        table._accumulate(g)

    return _result(table.data[index], (table,), bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out: Tensor) -> None:
        x._accumulate(_unbroadcast(out.grad, x.shape))

    return _result(np.broadcast_to(x.data, shape).copy(), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out: Tensor) -> None:
        x._accumulate(out.grad.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw)


# reductions -------------------------------------------------------------

def total(x: Tensor) -> Tensor:
    def bw(out: Tensor) -> None:
        x._accumulate(np.broadcast_to(out.grad, x.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(out: Tensor) -> None:
        x._accumulate(np.broadcast_to(out.grad / n, x.shape))

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` is true; 0 if none are."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    w = mask.astype(x.dtype) / max(count, 1)

    def bw(out: Tensor) -> None:
        x._accumulate(out.grad * w)

    return _result(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), bw)


# normalization ----------------------------------------------------------

def _normalize_last(x2: np.ndarray, axis: int, eps: float):
    mu = x2.mean(axis=axis, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv, mu, var


def _norm_backward(g_xhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axis) -> np.ndarray:
    # d/dx of (x - mean) / sqrt(var + eps) with population variance
    m1 = g_xhat.mean(axis=axis, keepdims=True)
    m2 = (g_xhat * xhat).mean(axis=axis, keepdims=True)
    return inv * (g_xhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing vector independently, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xhat, inv, _, _ = _normalize_last(x.data, -1, eps)

    def bw(out: Tensor) -> None:
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            x._accumulate(_norm_backward(g * gamma.data, xhat, inv, -1))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


class BatchNormStats:
    """Running mean/variance for one batch-norm layer."""

    def __init__(self, d: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {momentum}")
        self.momentum = momentum
        self.mean = np.zeros(d, dtype=dtype)
        self.var = np.ones(d, dtype=dtype)
        self.initialized = False

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * batch_mean
        self.var = (1 - m) * self.var + m * batch_var
        self.initialized = True


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats,
               mode: str, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization pooling every leading position (batch and node).

    Train mode uses batch statistics and updates ``stats``; eval mode uses the
    running statistics and is a fixed elementwise affine map.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batch_norm params must have shape ({d},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        if not stats.initialized:
            raise UninitializedStatsError("batch_norm evaluated before any running statistics were recorded")
        inv = 1.0 / np.sqrt(stats.var + eps)
        scale = gamma.data * inv
        shift = beta.data - stats.mean * scale
        xhat = (x.data - stats.mean) * inv

        def bw_eval(out: Tensor) -> None:
            g = out.grad
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                x._accumulate(g * scale)

        return _result(x.data * scale + shift, (x, gamma, beta), bw_eval)

    x2 = x.data.reshape(-1, d)
    xhat2, inv, mu, var = _normalize_last(x2, 0, eps)
    stats.update(mu.reshape(d), var.reshape(d))
    xhat = xhat2.reshape(x.shape)

    def bw(out: Tensor) -> None:
        g2 = out.grad.reshape(-1, d)
        if gamma.requires_grad:
            gamma._accumulate((g2 * xhat2).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            x._accumulate(_norm_backward(g2 * gamma.data, xhat2, inv, 0).reshape(x.shape))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# gradient checking ------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
               n_samples: int = 20, seed: int = 0, floor: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated with each sampled coordinate nudged by ``±eps``; it
    must be deterministic. The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. Central differences carry roughly
    ``ulp(f) / eps`` (~1e-10) of rounding noise, so coordinates whose gradient
    is below ``floor`` are effectively compared in absolute terms.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("objective is not finite")
    if loss.requires_grad:
        loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        k = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("objective became non-finite under perturbation")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
