"""Small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  The graph is
rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order and sums gradients on fan-out.

Deterministic conventions at non-differentiable points:

* ``relu`` has subgradient 0 at 0.
* ``row_norm`` has subgradient 0 for an all-zero row.
* max pooling routes the gradient to the first maximal element of a window.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, LabelRangeError

MISSING = -1

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph (feature extraction, FD probes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the branch decisions (ReLU masks, pooling argmaxes) taken inside the block.

    Two evaluations with equal traces lie on the same smooth piece of the function.
    """
    prev = getattr(_state, "trace", None)
    trace: list[np.ndarray] = []
    _state.trace = trace
    try:
        yield trace
    finally:
        _state.trace = prev


def _record(decision: np.ndarray) -> None:
    trace = getattr(_state, "trace", None)
    if trace is not None:
        trace.append(decision)


class Tensor:
    """Dense float64 array, optionally a node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def tsum(a: Tensor) -> Tensor:
    return _node(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _node(
        np.sum(a.data) / n, (a,), lambda g: (np.full(a.shape, g / n, dtype=np.float64),)
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _record(mask)
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Row-major reshape to ``[N, D]``."""
    if a.ndim < 1:
        raise DimensionError("flatten needs a leading batch axis")
    return reshape(a, (a.shape[0], -1) if a.shape[0] else (0, int(np.prod(a.shape[1:]))))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate ``[N, d_i]`` tensors along the feature axis."""
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    lead = xs[0].shape[0]
    for i, x in enumerate(xs):
        if x.ndim != 2 or x.shape[0] != lead:
            raise DimensionError(
                f"concat input {i} has shape {x.shape}; expected [{lead}, d] (axis 0 must agree)"
            )
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, _back)


def split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along axis 1."""
    if sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to axis-1 extent {x.shape[1]}")
    out, start = [], 0
    for size in sizes:
        out.append(column_slice(x, start, start + size))
        start += size
    return out


def column_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def _back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _node(x.data[:, start:stop], (x,), _back)


def take_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows; repeated indices sum their gradients."""
    idx = np.asarray(index, dtype=np.int64)

    def _back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), _back)


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row of ``[N, D]``; subgradient 0 on a zero row."""
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))

    def _back(g):
        safe = np.where(norms > 0, norms, 1.0)
        scale = np.where(norms > 0, g / safe, 0.0)
        return (x.data * scale[:, None],)

    return _node(norms, (x,), _back)


def row_sq_norm(x: Tensor) -> Tensor:
    return _node(
        np.einsum("ij,ij->i", x.data, x.data), (x,), lambda g: (2.0 * x.data * g[:, None],)
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"fully_connected expects [N,D], [D,M], [M]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"fully_connected inner dimensions disagree: input axis 1 = {x.shape[1]}, "
            f"weight axis 0 = {weight.shape[0]}"
        )
    if bias.shape[0] != weight.shape[1]:
        raise DimensionError(
            f"bias length {bias.shape[0]} != weight axis 1 = {weight.shape[1]}"
        )

    def _back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ weight.data + bias.data, (x, weight, bias), _back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``[N,C,H,W]`` with ``[F,C,kh,kw]`` filters (im2col)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 = {c}, weight axis 1 = {wc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({f},)")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad} (axes 2,3)"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xp.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return dx, (g2.T @ cols).reshape(weight.shape), g2.sum(axis=0)

    return _node(np.ascontiguousarray(out), (x, weight, bias), _back)


def _route_max(x: Tensor, out: np.ndarray, flat_index: np.ndarray) -> Tensor:
    size = x.size
    _record(flat_index)

    def _back(g):
        dx = np.bincount(flat_index.ravel(), weights=g.ravel(), minlength=size)
        return (dx.reshape(x.shape),)

    return _node(out, (x,), _back)


def maxpool(x: Tensor, window: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise DimensionError(f"maxpool needs positive window and stride, got {window}, {stride}")
    if window > h or window > w:
        raise DimensionError(f"maxpool window {window} exceeds spatial extent {h}x{w} (axes 2,3)")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, ho, wo, window * window)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    flat = base[:, :, None, None] + rows * w + cols
    return _route_max(x, np.ascontiguousarray(out), flat)


def adaptive_bins(extent: int, bins: int = 3) -> list[tuple[int, int]]:
    """Floor-partitioned contiguous bins ``[floor(i*n/b), floor((i+1)*n/b))``."""
    return [((i * extent) // bins, ((i + 1) * extent) // bins) for i in range(bins)]


def adaptive_maxpool_3x3(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"adaptive_maxpool_3x3 expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        raise DimensionError(f"adaptive_maxpool_3x3 needs H, W >= 3, got {h}x{w} (axes 2,3)")
    out = np.empty((n, c, 3, 3), dtype=np.float64)
    flat = np.empty((n, c, 3, 3), dtype=np.int64)
    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
    for bi, (r0, r1) in enumerate(adaptive_bins(h)):
        for bj, (c0, c1) in enumerate(adaptive_bins(w)):
            region = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            arg = np.argmax(region, axis=-1)
            out[:, :, bi, bj] = np.take_along_axis(region, arg[..., None], axis=-1)[..., 0]
            width = c1 - c0
            flat[:, :, bi, bj] = base + (r0 + arg // width) * w + (c0 + arg % width)
    return _route_max(x, out, flat)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over labelled rows of ``-log softmax(logits)[label]``.

    Rows labelled :data:`MISSING` contribute neither loss nor gradient.  When
    every row is missing the result is a constant 0 detached from the graph.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    bad = (labels >= k) | (labels < MISSING)
    if bad.any():
        raise LabelRangeError(f"label {int(labels[bad][0])} outside [0, {k}) and not MISSING")
    rows = np.flatnonzero(labels != MISSING)
    if rows.size == 0:
        return Tensor(0.0)
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(rows.size), labels[rows]]
    loss = float(np.mean(lse - picked))

    def _back(g):
        probs = np.exp(z - lse[:, None])
        probs[np.arange(rows.size), labels[rows]] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = probs * (g / rows.size)
        return (full,)

    return _node(np.asarray(loss), (logits,), _back)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _same_branches(t1: list[np.ndarray], t2: list[np.ndarray]) -> bool:
    return len(t1) == len(t2) and all(np.array_equal(a, b) for a, b in zip(t1, t2))


def finite_difference_errors(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    coords_per_param: int | None = 8,
    rng: np.random.Generator | None = None,
) -> list[tuple[str, int, float, float, float, bool]]:
    """Compare analytic and central-difference gradients coordinate by coordinate.

    Returns ``(param name, flat index, analytic, numeric, relative error, smooth)``
    rows.  ``smooth`` is False when a probe at +/-epsilon took a different ReLU or
    max-pool branch than the unperturbed pass: the central difference then
    straddles a kink and says nothing about the gradient there.
    ``loss_fn`` must rebuild the same graph deterministically on every call.
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.grad = None
    with record_branches() as base_trace:
        loss = loss_fn()
    backward(loss)
    rows = []
    for pi, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if coords_per_param is None or p.size <= coords_per_param:
            coords = np.arange(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=coords_per_param, replace=False))
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                with record_branches() as t_up:
                    up = loss_fn().item()
                flat[i] = orig - epsilon
                with record_branches() as t_down:
                    down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            smooth = _same_branches(base_trace, t_up) and _same_branches(base_trace, t_down)
            rows.append((p.name or f"param{pi}", int(i), a, numeric, rel, smooth))
    return rows


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    coords_per_param: int | None = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Maximum relative error over coordinates whose probes stay on one smooth piece."""
    rows = finite_difference_errors(loss_fn, params, epsilon, coords_per_param, rng)
    return max((r[4] for r in rows if r[5]), default=0.0)
