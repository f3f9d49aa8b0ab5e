"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the segmentation network needs are provided. Every
primitive records a closure that maps the gradient of its output to the
gradients of its inputs; :func:`backward` walks those closures in reverse
topological order.

Tensors are 4-D ``N x C x H x W`` for feature maps and 2-D ``N x C`` for the
dense path inside the squeeze-excitation block.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "activation",
    "add",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "dense",
    "elementwise",
    "global_avg_pool",
    "grad_check",
    "max_pool2x2",
    "mean",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "sum",
    "upsample2x",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An array plus the bookkeeping reverse-mode differentiation needs.

    ``grad`` stays ``None`` until :func:`backward` reaches the tensor; after
    that it accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ParameterError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Graph:
    """Topologically ordered record of the primitives that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf and t.requires_grad]


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if loss.data.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = (graph or Graph(loss)).nodes
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects an N x C x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,kh,kw)."""
    _require_4d(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be Cout x Cin x kh x kw, got {w.shape}")
    if int(stride) != stride or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ParameterError(f"padding must be a non-negative integer, got {padding}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == 1 and kw == 1:
        src = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = src.transpose(0, 2, 3, 1).reshape(n * ho * wo, cin)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def _backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, _backward)


def max_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first cell."""
    _require_4d(x, "max_pool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ParameterError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), _backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling: each cell fills a 2x2 block."""
    _require_4d(x, "upsample2x")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return Tensor._from_op(out, (x,), _backward)


# ---------------------------------------------------------------------------
# normalisation and dense layers


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation for ``N x C`` or ``N x C x H x W`` input.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place by an exponential moving average
    (biased variance). In eval mode the running statistics are used.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ParameterError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ParameterError(f"batch_norm: running stats must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    count = x.data.size // c

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            scale = inv_std.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = scale * (dxhat - s1 / count - xhat * (s2 / count))
            else:
                gx = dxhat * scale
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), _backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for ``x`` of shape N x Cin and ``w`` Cout x Cin."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense shape mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense bias must have shape ({w.shape[0]},), got {b.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def _backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, _backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""
    dt = x.dtype
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    s = np.clip(s, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0))).astype(dt, copy=False)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


def _check_broadcast(a: Tensor, b: Tensor, what: str) -> None:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape != a.shape:
        raise ShapeError(f"{what}: cannot broadcast {b.shape} onto {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b`` has ``a``'s shape or broadcasts onto it."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return Tensor._from_op(out, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """``a * b`` where ``b`` has ``a``'s shape or broadcasts onto it."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), _backward)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ParameterError(f"unknown elementwise op {op!r}; expected 'add' or 'mul'")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels needs matching N, H, W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[np.ndarray],
    epsilon: float = 1e-5,
    check: Sequence[int] | None = None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare analytic gradients of scalar ``fn(*tensors)`` with central differences.

    Returns the worst relative error per checked input, using the
    denominator ``max(|analytic|, |numeric|, 1e-8)``. ``max_elements`` limits
    the number of perturbed entries per input (sampled with ``rng``).
    """
    if epsilon <= 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    check = range(len(arrays)) if check is None else check
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    if loss.data.size != 1:
        raise ParameterError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)

    def f(values):
        return float(fn(*[Tensor(v) for v in values]).data)

    errors = []
    for k in check:
        analytic = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(arrays[k])
        idx = np.arange(arrays[k].size)
        if max_elements is not None and idx.size > max_elements:
            idx = (rng or np.random.default_rng(0)).choice(idx, size=max_elements, replace=False)
        worst = 0.0
        for flat in idx:
            pos = np.unravel_index(flat, arrays[k].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][pos] += epsilon
            minus[k][pos] -= epsilon
            numeric = (f(plus) - f(minus)) / (2 * epsilon)
            a = float(analytic[pos])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
        errors.append(worst)
    return errors
