"""Dense float64 tensors with tape-based reverse-mode differentiation.

Storage is a row-major (C-order) numpy array, so a flat offset into a tensor of
shape ``(d0, d1, ..., dk)`` is ``((i0 * d1 + i1) * d2 + ...) * dk + ik``; the
index-mapping code in :mod:`lidarfuse.viewxform` relies on that layout.

Only first-order gradients are supported. A graph and its backward pass must
stay on one thread; distinct graphs are independent.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle finiteness checks after every operation."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        if _DEBUG and not np.all(np.isfinite(out.data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise FloatingPointError("non-finite output from finite inputs")
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def sigmoid(self):
        return sigmoid(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` without copying if it is already a Tensor."""
    return _lift(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return Tensor._result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))


# -- reductions and shape ------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.asarray(a.data[index]), (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather ``a[rows]`` along the leading axis; repeated rows accumulate in backward."""
    rows = np.asarray(rows, dtype=np.intp)
    n = a.shape[0]
    rest = a.shape[1:]

    def backward(g):
        flat = g.reshape(len(rows), -1)
        cols = flat.shape[1]
        full = np.empty((n, cols))
        for j in range(cols):
            full[:, j] = np.bincount(rows, weights=flat[:, j], minlength=n)
        return (full.reshape((n,) + rest),)

    return Tensor._result(a.data[rows], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map ``x @ weight + bias``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
        out = out + bias
    return out


def spmm(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a tensor over its leading axis."""
    matrix = sp.csr_matrix(matrix)
    if matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    rest = x.shape[1:]
    flat = x.data.reshape(x.shape[0], -1)
    out = np.asarray(matrix @ flat).reshape((matrix.shape[0],) + rest)
    mt = matrix.T.tocsr()
    return Tensor._result(
        out, (x,), lambda g: (np.asarray(mt @ g.reshape(g.shape[0], -1)).reshape(x.shape),)
    )


def segment_max(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Elementwise max of the rows of ``x`` sharing a segment id.

    Gradient flows to the lowest-index row attaining each maximum. Empty
    segments produce zeros.
    """
    segments = np.asarray(segments, dtype=np.intp)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    order = np.argsort(segments, kind="stable")
    sorted_seg = segments[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]]) if n else np.array([], np.intp)
    present = sorted_seg[starts]
    out = np.zeros((num_segments, flat.shape[1]))
    winners = np.full((num_segments, flat.shape[1]), -1, dtype=np.intp)
    if n:
        sorted_vals = flat[order]
        maxima = np.maximum.reduceat(sorted_vals, starts, axis=0)
        out[present] = maxima
        hit = sorted_vals == maxima[np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, n]))]
        # first hit per segment and channel in stable order == lowest row index
        pos = np.where(hit, np.arange(n)[:, None], n)
        first = np.minimum.reduceat(pos, starts, axis=0)
        winners[present] = order[first]
    rest = x.shape[1:]

    def backward(g):
        g = g.reshape(num_segments, -1)
        full = np.zeros_like(flat)
        seg_idx, ch_idx = np.nonzero(winners >= 0)
        full[winners[seg_idx, ch_idx], ch_idx] = g[seg_idx, ch_idx]
        return (full.reshape((n,) + rest),)

    return Tensor._result(out.reshape((num_segments,) + rest), (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded stride-1 convolution of an ``H x W x C_in`` map.

    ``weight`` has shape ``k x k x C_in x C_out`` with odd ``k``.
    """
    if x.ndim != 3 or weight.ndim != 4 or x.shape[2] != weight.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    k = weight.shape[0]
    pad = k // 2
    h, w, cin = x.shape
    cout = weight.shape[3]
    padded = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # windows: h x w x cin x k x k -> rows of (ky, kx, cin)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(h * w, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(h, w, cout)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(h, w, k, k, cin)
        gpad = np.zeros_like(padded)
        for ky in range(k):
            for kx in range(k):
                gpad[ky : ky + h, kx : kx + w] += gcols[:, :, ky, kx]
        gx = gpad[pad : pad + h, pad : pad + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, parents, backward)


# -- normalization ---------------------------------------------------------------


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(
        out, (logits,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor._result(
        out, (logits,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),)
    )


# -- utilities -------------------------------------------------------------------


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the finite-difference sweep to a subset of flat
    indices, which keeps large parameter tensors affordable.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    coords: Optional[Mapping[str, Sequence[int]]] = None,
) -> float:
    """Like :func:`grad_check` but for leaf tensors already wired into ``f``.

    Each parameter is perturbed in place and restored afterwards.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractError(f"grad_check_params needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None else coords.get(name, ())
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
