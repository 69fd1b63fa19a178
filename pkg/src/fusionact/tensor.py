"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op below builds its output eagerly and attaches a
``Node`` recording its inputs and a closure mapping the output gradient to
input gradients. ``backward`` orders those nodes topologically (the
``ComputeGraph``) and sweeps them once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class KinkMargin:
    """Smallest distance to a non-differentiable point seen while active.

    Covers relu inputs (distance to 0) and max-pool windows (gap between the
    two largest entries). Finite-difference checks are only meaningful when
    this margin exceeds the perturbation size.
    """

    active: "KinkMargin | None" = None

    def __init__(self):
        self.margin = np.inf

    def observe(self, distance: float) -> None:
        self.margin = min(self.margin, float(distance))

    def __enter__(self):
        self._prev, KinkMargin.active = KinkMargin.active, self
        return self

    def __exit__(self, *exc):
        KinkMargin.active = self._prev
        return False


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._node = Node(op, inputs, backward_fn) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph


@dataclass
class ComputeGraph:
    """Topologically ordered nodes reachable from one output tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._node is None and t.requires_grad]


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns the gradients of named leaves keyed by name. Intermediate
    gradients are dropped and node closures released once consumed.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = ComputeGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node = t._node
        for parent, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        t._node = None
    return {t.name: t.grad for t in graph.leaves() if t.name is not None}


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if KinkMargin.active is not None and x.size:
        KinkMargin.active.observe(np.abs(x.data).min())
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), bw)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.asarray(x.data[index]), "take", (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, "transpose", (x,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# 1-D convolution and pooling kernels


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Zero-padded grouped cross-correlation.

    x: [batch, in_ch, time]; weight: [out_ch, in_ch // groups, kernel].
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [batch, channels, time], got {x.shape}")
    B, C, T = x.shape
    O, Cg, K = weight.shape
    if C % groups or O % groups or Cg != C // groups:
        raise ShapeError(
            f"conv1d channel mismatch: input has {C} channels, weight {weight.shape}, groups={groups}"
        )
    if stride < 1 or padding < 0 or K < 1:
        raise ContractError("conv1d needs stride >= 1, padding >= 0, kernel >= 1")
    if T + 2 * padding < K:
        raise ShapeError(f"padded length {T + 2 * padding} shorter than kernel {K}")
    G, Og = groups, O // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # cols: [B, G, Cg, T', K]
    cols = sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    T_out = cols.shape[2]
    cols = cols.reshape(B, G, Cg, T_out, K)
    w = weight.data.reshape(G, Og, Cg, K)
    if G == 1:
        y = np.tensordot(cols[:, 0], w[0], axes=([1, 3], [1, 2]))  # [B, T', O]
        y = y.transpose(0, 2, 1)
    else:
        y = np.einsum("bgctk,gock->bgot", cols, w, optimize=True).reshape(B, O, T_out)
    if bias is not None:
        y = y + bias.data[None, :, None]
    y = np.ascontiguousarray(y)
    Tp = xp.shape[2]

    def bw(g):
        gg = g.reshape(B, G, Og, T_out)
        db = g.sum(axis=(0, 2)) if bias is not None else None
        if G == 1:
            dw = np.tensordot(gg[:, 0], cols[:, 0], axes=([0, 2], [0, 2]))[None]
        else:
            dw = np.einsum("bgot,bgctk->gock", gg, cols, optimize=True)
        dw = dw.reshape(weight.shape)
        if not x.requires_grad:
            return (None, dw, db)
        if G == 1:
            dcols = np.tensordot(gg[:, 0], w[0], axes=([1], [0]))  # [B, T', Cg, K]
            dcols = dcols.transpose(0, 2, 1, 3)
        else:
            dcols = np.einsum("bgot,gock->bgctk", gg, w, optimize=True)
        dcols = dcols.reshape(B, C, T_out, K)
        dxp = np.zeros((B, C, Tp))
        span = stride * (T_out - 1) + 1
        for k in range(K):
            dxp[:, :, k : k + span : stride] += dcols[:, :, :, k]
        dx = dxp[:, :, padding : padding + T] if padding else dxp
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, "conv1d", inputs, bw)


def maxpool1d(x: Tensor, d_pool: int) -> Tensor:
    """Non-overlapping max pooling; trailing remainder dropped."""
    if d_pool < 1:
        raise ContractError(f"d_pool must be >= 1, got {d_pool}")
    B, C, T = x.shape
    T_out = T // d_pool
    win = x.data[:, :, : T_out * d_pool].reshape(B, C, T_out, d_pool)
    arg = win.argmax(axis=3)  # first max on ties
    if KinkMargin.active is not None and d_pool > 1 and win.size:
        top2 = np.sort(win, axis=3)[..., -2:]
        # ties among relu-clamped zeros stay put under small perturbations
        live = top2[..., 1] != 0
        if live.any():
            KinkMargin.active.observe((top2[..., 1] - top2[..., 0])[live].min())
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def bw(g):
        dwin = np.zeros((B, C, T_out, d_pool))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=3)
        dx = np.zeros_like(x.data)
        dx[:, :, : T_out * d_pool] = dwin.reshape(B, C, T_out * d_pool)
        return (dx,)

    return _make(y, "maxpool1d", (x,), bw)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the trailing time axis: [batch, ch, time] -> [batch, ch]."""
    T = x.shape[-1]
    if T < 1:
        raise ContractError("global_avgpool needs time >= 1")
    return _make(
        x.data.mean(axis=-1),
        "global_avgpool",
        (x,),
        lambda g: (np.repeat(g[..., None] / T, T, axis=-1),),
    )


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
    """Per-channel normalization over (batch, time) for x: [batch, ch, time].

    In training mode the running buffers are updated in place; the variance
    fed to them is the unbiased estimate, the one used to normalize is biased.
    """
    B, C, T = x.shape
    shp = (1, C, 1)
    if training:
        if B < 2:
            raise ContractError("batch_norm in train mode needs batch >= 2")
        m = B * T
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv_std.reshape(shp)
    y = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data.reshape(shp)
        if training:
            dx = (
                dxhat
                - dxhat.mean(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            ) * inv_std.reshape(shp)
        else:
            dx = dxhat * inv_std.reshape(shp)
        return dx, dgamma, dbeta

    return _make(y, "batch_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic))
    return float(err.max())


def _central_difference(f: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(f())
        flat[i] = orig - eps
        lo = _scalar(f())
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
    return numeric.reshape(t.shape)


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise ContractError(f"function must return a scalar, got shape {y.shape}")
    return float(y.data.reshape(-1)[0])


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of f at x."""
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    _scalar(out)
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    numeric = _central_difference(lambda: f(probe), probe, eps)
    return _relative_error(analytic, numeric)


def grad_check_params(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> dict[str, float]:
    """grad_check over tensors that f closes over (perturbed in place).

    Returns the max relative error per tensor, keyed by name (or position).
    """
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    report = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report[p.name or str(i)] = _relative_error(analytic, _central_difference(f, p, eps))
    return report
