"""Dense arrays with tape-based reverse-mode differentiation, plus Adam.

Operations only record onto a tape while one is active (``with Tape() as
tape:``) and at least one input requires a gradient; outside a tape they are
plain numpy computations, which is how inference runs.

    with Tape() as tape:
        loss = some_scalar_expression(params)
    backward(loss, tape)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MissingGrad, NonScalarLoss, ShapeMismatch

_dtype = np.float32
_tapes: list["Tape"] = []
_read_trackers: list[set] = []


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (gradient checks use float64)."""
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.data.dtype}>"


class Parameter(Tensor):
    """A trainable leaf owned by a branch; reads are visible to :func:`track_reads`."""

    def __init__(self, data, name: str, owner=None):
        super().__init__(data, requires_grad=True, name=name)
        self.owner = owner


@dataclass
class _Record:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)


@contextlib.contextmanager
def no_tape():
    """Suspend recording, e.g. to run a frozen branch inside a training step."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


@contextlib.contextmanager
def track_reads():
    """Collect every :class:`Parameter` consumed by an operation inside the block."""
    seen: set = set()
    _read_trackers.append(seen)
    try:
        yield seen
    finally:
        _read_trackers.remove(seen)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _read_trackers:
        for p in parents:
            if isinstance(p, Parameter):
                for seen in _read_trackers:
                    seen.add(p)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._leaf = False
    out.requires_grad = False
    if _tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].records.append(_Record(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- primitives ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul batch dims: {a.shape} @ {b.shape}") from None
    av, bv = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape),
            _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape),
        )

    return _result(av @ bv, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def softmax_lastdim(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    sx, sg = x.shape, gamma.data

    def back(g):
        gx_hat = g * sg
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, d)
        return (
            gx.reshape(sx),
            (g * xhat).reshape(flat).sum(axis=0),
            g.reshape(flat).sum(axis=0),
        )

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), back)


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embed_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}")
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[ids], (table,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat along {axis}: {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(np.ascontiguousarray(a.data[index]), (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {old} -> {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeMismatch(f"masked_fill: mask {mask.shape} vs input {a.shape}") from None
    data = np.where(full, a.data.dtype.type(value), a.data)
    return _result(data, (a,), lambda g: (np.where(full, 0, g).astype(g.dtype),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def nll_loss(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"nll_loss: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tgt = targets.reshape(-1)
    valid = np.ones_like(tgt, dtype=bool) if ignore_index is None else tgt != ignore_index
    count = max(int(valid.sum()), 1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(len(tgt)), np.where(valid, tgt, 0)]
    loss = -(picked * valid).sum() / count
    shape = logits.shape

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(len(tgt)), np.where(valid, tgt, 0)] -= 1
        grad *= (valid / count)[:, None]
        return ((grad * g).reshape(shape).astype(logits.data.dtype),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# --- differentiation ---------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._leaf:
                parent.grad = pg.astype(parent.data.dtype, copy=True) if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step_count": self.step_count}

    @classmethod
    def from_arrays(cls, hyper: dict, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(**hyper)
        for key, a in arrays.items():
            kind, name = key.split("/", 1)
            getattr(state, kind)[name] = np.array(a)
        return state


def adam_step(params: Iterable[Parameter], state: AdamState) -> None:
    """Bias-corrected Adam update keyed by parameter name; clears grads afterwards."""
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGrad(f"no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
