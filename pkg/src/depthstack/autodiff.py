"""Small dense-tensor engine with reverse-mode differentiation.

Only the primitives the two depth stacks need are provided: 2-D convolution
(cross-correlation), max-pooling, fully-connected layers, ReLU, inverted
dropout, channel concatenation and reshape.  Every op checks its output for
NaN/Inf and raises :class:`NonFiniteError` instead of propagating garbage.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# Active kink-margin recorders (see ``record_kink_margin``).
_KINK_RECORDERS: list[list[float]] = []


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """An ndarray plus an optional gradient buffer and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "argmax")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name
        self.argmax: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Propagate ``grad`` (defaults to ones) back through the recorded graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=self.data.dtype), self.shape)
        _check_finite(grad, "upstream gradient")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            # intermediate nodes hand gradients straight to their parents
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.name or 'op'}")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, C, H, W) input with (O, C, kh, kw) weights."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {c2}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d stride must be >= 1 and padding >= 0")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output size non-positive for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # cols: (N, oh, ow, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g: np.ndarray):
        g_nhwo = g.transpose(0, 2, 3, 1)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g_nhwo, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (g_nhwo @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        res = [(x, gx), (weight, gw)]
        if bias is not None:
            res.append((bias, gb))
        return res

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max-pool over (kernel x kernel) windows.

    Ties go to the first element of the window in row-major order.  The
    argmax indices (flat within each window) are kept on the output as
    ``out.argmax`` for inspection.
    """
    x = _as_tensor(x)
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ShapeError("maxpool2d kernel and stride must be positive")
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, 0)
    ow = conv_output_size(w, kernel, stride, 0)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"maxpool2d output size non-positive for input {h}x{w}, kernel {kernel}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    if _KINK_RECORDERS:
        if kernel * kernel > 1:
            part = np.partition(flat, -2, axis=-1)
            gaps = part[..., -1] - part[..., -2]
            # windows of inactive ReLU outputs tie at exactly 0 but cannot flip
            live = (part[..., -1] != 0) | (gaps != 0)
            gap = float(gaps[live].min()) if live.any() else np.inf
        else:
            gap = np.inf
        for rec in _KINK_RECORDERS:
            rec.append(gap)

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            sel = np.where(idx == k, g, 0)
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride][:, :, :oh, :ow] += sel
        return [(x, gx)]

    res = _result(np.ascontiguousarray(out), [x], backward, "maxpool2d")
    res.argmax = idx
    return res


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of the flattened input: (N, D) @ (O, D).T + b."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if weight.data.ndim != 2 or weight.shape[1] != flat.shape[1]:
        raise ShapeError(f"fully_connected: input length {flat.shape[1]} does not match weights {weight.shape}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"fully_connected bias shape {bias.shape} != ({weight.shape[0]},)")
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray):
        res = [(x, (g @ weight.data).reshape(x.shape) if x.requires_grad else None),
               (weight, g.T @ flat if weight.requires_grad else None)]
        if bias is not None:
            res.append((bias, g.sum(axis=0)))
        return res

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, backward, "fully_connected")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    if _KINK_RECORDERS:
        margin = float(np.abs(x.data).min()) if x.data.size else np.inf
        for rec in _KINK_RECORDERS:
            rec.append(margin)

    def backward(g: np.ndarray):
        return [(x, g * pos)]

    return _result(np.where(pos, x.data, 0).astype(x.dtype), [x], backward, "relu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None,
            train: bool = True) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not train or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)

    def backward(g: np.ndarray):
        return [(x, g * keep)]

    return _result(x.data * keep, [x], backward, "dropout")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(ref, other)) if k != axis):
            raise ShapeError(f"concat shape mismatch: {tensors[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray):
        return [(t, np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis))
                for k, t in enumerate(tensors)]

    return _result(out, tensors, backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g: np.ndarray):
        return [(x, g.reshape(x.shape))]

    return _result(out, [x], backward, "reshape")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights); used to reduce outputs to a scalar objective."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)

    def backward(g: np.ndarray):
        return [(x, g * w)]

    return _result(np.asarray((x.data * w).sum()), [x], backward, "weighted_sum")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class SGDMomentum:
    """Classical (Polyak) momentum: ``v <- m*v - lr*g``; ``p <- p + v``.

    ``multipliers`` maps parameter index to a per-layer rate multiplier, so the
    effective step size of parameter ``k`` is ``lr * multipliers[k]``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 multipliers: Sequence[float] | None = None):
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.multipliers = list(multipliers) if multipliers is not None else [1.0] * len(self.params)
        if len(self.multipliers) != len(self.params):
            raise ShapeError("one learning-rate multiplier per parameter is required")
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameter list")
        for p, v, g, mult in zip(self.params, self.velocity, grads, self.multipliers):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            rate = p.dtype.type(self.lr * mult)
            v *= p.dtype.type(self.momentum)
            v -= rate * g
            p.data += v
            _check_finite(p.data, "sgd step")


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                      state: SGDMomentum) -> Sequence[Tensor]:
    state.step(grads)
    return params


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def record_kink_margin():
    """Collect the smallest distance to a ReLU or max-pool kink seen in a forward pass.

    Yields a list; after the block ``min(list)`` is the margin.
    """
    rec: list[float] = []
    _KINK_RECORDERS.append(rec)
    try:
        yield rec
    finally:
        _KINK_RECORDERS.remove(rec)


def gradcheck(func: Callable[[], Tensor], tensors: Iterable[Tensor], eps: float = 1e-6,
              seed: int = 0, max_probes: int | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``func`` rebuilds the forward pass from the current contents of ``tensors``.
    Its output is projected onto a fixed random direction to get a scalar.  For
    each tensor the error is ``||a - n|| / max(||a||, ||n||)`` (0 when both are
    exactly zero); the maximum over tensors is returned.  ``max_probes`` limits
    how many entries of each tensor are differenced.
    """
    tensors = list(tensors)
    rng = np.random.default_rng(seed)
    out = func()
    proj = rng.standard_normal(out.shape)

    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = func()
    if out.requires_grad:
        out.backward(proj)

    def objective() -> float:
        return float((func().data.astype(np.float64) * proj).sum())

    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        if not np.isfinite(analytic).all():
            raise NonFiniteError(f"non-finite analytic gradient for {t!r}")
        flat = t.data.reshape(-1)
        if max_probes is not None and flat.size > max_probes:
            probes = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        else:
            probes = np.arange(flat.size)
        numeric = np.empty(len(probes))
        for k, i in enumerate(probes):
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective()
            flat[i] = orig - eps
            fm = objective()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        if not np.isfinite(numeric).all():
            raise NonFiniteError(f"non-finite numeric gradient for {t!r}")
        a = analytic.reshape(-1)[probes]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if denom == 0:
            continue
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
