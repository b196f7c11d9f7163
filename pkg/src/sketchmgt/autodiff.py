"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations needed by the sketch transformer are
provided.  Every op returns a new :class:`Tensor`; when an input requires
gradients and a :class:`Tape` is active, the op appends a backward rule to
that tape.  :func:`backward` walks the tape in exact reverse recording
order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

NEG_LARGE = -1e9

_DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    pass


def dtype_for(precision: str) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected float32 or float64") from None


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a named use-site of a base seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: BackwardFn) -> None:
        self.nodes.append((out, parents, fn))
        self._outputs.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs


_tapes: list[Tape] = []


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Make ``tape`` the active tape for the duration of the block."""
    tape = Tape() if tape is None else tape
    _tapes.append(tape)
    try:
        yield tape
    finally:
        _tapes.pop()


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    needs = bool(_tapes) and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _tapes[-1].record(out, parents, fn)
    return out


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors that require gradients get their ``.grad`` set (replacing any
    previous value) and are returned in a mapping keyed by tensor identity.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p not in tape:
                leaves[id(p)] = p
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = leaf.grad
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_leading_broadcast(a: tuple[int, ...], b: tuple[int, ...], what: str) -> None:
    # only leading batch dims of size 1 (or missing) may broadcast
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + a
    pb = (1,) * (n - len(b)) + b
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{what}: incompatible shapes {a} and {b}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def fn(g):
        if B.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _record(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        if len(b.shape) > len(a.shape):
            raise ShapeError(f"add: cannot broadcast {b.shape} onto {a.shape}")
        pb = (1,) * (len(a.shape) - len(b.shape)) + b.shape
        if any(x != y and y != 1 for x, y in zip(a.shape, pb)):
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _record(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=-1)))


def softmax_lastdim(x: Tensor, check_finite: bool = False) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty dimension")
    if check_finite and not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax input contains non-finite values")
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def fn(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _record(y, (x,), fn)


def _check_mask(x: Tensor, mask: np.ndarray, what: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim < 2 or mask.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"{what}: mask shape {mask.shape} does not match trailing dims of {x.shape}")
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"{what}: mask shape {mask.shape} does not broadcast to {x.shape}") from None
    return mask.astype(bool, copy=False)


def masked_fill_neg_inf(x: Tensor, mask: np.ndarray) -> Tensor:
    """Replace entries where ``mask`` is 0 with a large negative number."""
    m = _check_mask(x, mask, "masked_fill")
    out = np.where(m, x.data, x.dtype.type(NEG_LARGE))
    shape = x.shape
    return _record(out, (x,), lambda g: (_unbroadcast(g * m, shape),))


def hadamard_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    m = _check_mask(x, mask, "hadamard_mask")
    mf = m.astype(x.dtype)
    shape = x.shape
    return _record(x.data * mf, (x,), lambda g: (_unbroadcast(g * mf, shape),))


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    V, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise IndexError(f"embedding index out of range [0, {V})")

    def fn(g):
        gt = np.zeros((V, d), dtype=g.dtype)
        np.add.at(gt, idx.ravel(), g.reshape(-1, d))
        return (gt,)

    return _record(table.data[idx], (table,), fn)


def sum_rows_masked(x: Tensor, valid) -> Tensor:
    """Sum rows of ``x[..., S, d]`` where ``valid[..., S]`` is 1."""
    v = np.asarray(valid).astype(x.dtype)
    if v.shape != x.shape[:-1]:
        raise ShapeError(f"sum_rows_masked: valid shape {v.shape} vs rows {x.shape[:-1]}")
    if np.any(v.sum(axis=-1) == 0):
        raise ValueError("sum_rows_masked: a sample has no valid rows")
    out = np.einsum("...sd,...s->...d", x.data, v)
    return _record(out, (x,), lambda g: (g[..., None, :] * v[..., :, None],))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


class BatchNormState:
    """Running statistics for one batch-norm site."""

    def __init__(self, d: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(d, dtype=dtype)
        self.running_var = np.ones(d, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               train: bool, valid=None) -> Tensor:
    """Per-feature normalisation of ``x[N, d]``.

    In train mode the statistics come from the rows flagged in ``valid`` (all
    rows by default); every row is normalised with them.
    """
    X = x.data
    if X.ndim != 2:
        raise ShapeError(f"batch_norm expects [N, d], got {x.shape}")
    N, d = X.shape
    G, Bt = gamma.data, beta.data
    if not train:
        istd = 1.0 / np.sqrt(state.running_var + state.eps)
        scale_ = (G * istd).astype(X.dtype)
        out = (X - state.running_mean.astype(X.dtype)) * scale_ + Bt
        xhat = (X - state.running_mean) * istd
        return _record(out, (x, gamma, beta),
                       lambda g: (g * scale_, (g * xhat).sum(0), g.sum(0)))

    v = np.ones(N, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(N)
    n = int(v.sum())
    if n < 2:
        raise ValueError(f"batch_norm in train mode needs at least 2 rows, got {n}")
    Xv = X[v]
    mu = Xv.mean(axis=0)
    var = Xv.var(axis=0)
    istd = 1.0 / np.sqrt(var + X.dtype.type(state.eps))
    xhat = (X - mu) * istd
    out = xhat * G + Bt

    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))

    vf = v.astype(X.dtype)[:, None]

    def fn(g):
        dxhat = g * G
        s1 = dxhat.sum(axis=0)
        s2 = (dxhat * xhat).sum(axis=0)
        dx = istd * dxhat - vf * (istd / n) * (s1 + xhat * s2)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gamma, beta), fn)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels``."""
    Z = logits.data
    y = np.asarray(labels)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {Z.shape} vs labels {y.shape}")
    N, C = Z.shape
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    loss = np.asarray((lse - Z[np.arange(N), y]).mean(), dtype=Z.dtype)

    def fn(g):
        p = np.exp(Z - lse[:, None])
        p[np.arange(N), y] -= 1
        return (p * (g / N),)

    return _record(loss, (logits,), fn)
