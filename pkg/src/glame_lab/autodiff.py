"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its value with numpy and, when a :class:`GradTape`
is active and one of its inputs is tracked, appends a record holding the
vector-Jacobian product closure. Records are appended in execution order, so
walking the tape backwards is a valid reverse topological order.

    with GradTape() as tape:
        w = tape.watch(Tensor(w0))
        loss = mean(relu(matmul(x, w)))
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class Tensor:
    """Immutable dense array plus a tracking flag.

    ``data`` is a read-only numpy array. Arithmetic operators dispatch to the
    module-level primitives so they participate in the active tape.
    """

    __slots__ = ("data", "tracked", "__weakref__")

    def __init__(self, data, dtype=None, tracked: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _infer_dtype(data), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.tracked = tracked

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.tracked = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("active_tape", default=None)


class GradTape:
    """Ordered record of differentiable primitive applications.

    Only one tape is active per context; nested ``with`` blocks shadow the
    outer tape. Tapes are not shared across threads.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor | None, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def watch(self, t: Tensor) -> Tensor:
        """Return a tracked alias of ``t`` (same buffer, new identity)."""
        out = Tensor._wrap(t.data)
        out.tracked = True
        return out

    def __len__(self) -> int:
        return len(self.records)


def _record(out_arr: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _ACTIVE.get()
    if tape is None:
        return out
    parents = tuple(x if isinstance(x, Tensor) and x.tracked else None for x in inputs)
    if any(p is not None for p in parents):
        out.tracked = True
        tape.records.append((out, parents, vjp))
    return out


class Gradients:
    """Gradient map keyed by tensor identity. Missing keys mean untracked."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: GradTape, scalar_loss: Tensor) -> Gradients:
    """Reverse-accumulate gradients of ``scalar_loss`` through ``tape``.

    Returns gradients for every tracked tensor the loss depends on; tensors
    outside the loss's cone (or untracked) are absent from the result.
    """
    if scalar_loss.data.size != 1 or scalar_loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {scalar_loss.shape}")
    if not scalar_loss.tracked:
        raise ContractError("loss does not depend on any tracked tensor")
    grads: dict[int, np.ndarray] = {id(scalar_loss): np.ones_like(scalar_loss.data)}
    owners: dict[int, Tensor] = {id(scalar_loss): scalar_loss}
    for out, parents, vjp in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = vjp(g)
        for p, pg in zip(parents, in_grads):
            if p is None or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                owners[key] = p
    return Gradients(grads, owners)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pair(a, b):
    av = a.data if isinstance(a, Tensor) else None
    bv = b.data if isinstance(b, Tensor) else None
    if av is None:
        av = np.asarray(a, dtype=bv.dtype if bv is not None else DEFAULT_DTYPE)
    if bv is None:
        bv = np.asarray(b, dtype=av.dtype)
    return av, bv


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    av, bv = _pair(a, b)
    out = av + bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Tensor:
    av, bv = _pair(a, b)
    out = av - bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b) -> Tensor:
    av, bv = _pair(a, b)
    out = av * bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; 1-D operands are not allowed."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        if bv.ndim == 2 and av.ndim > 2:
            # shared right operand: fold the batch axes into one GEMM
            a2 = av.reshape(-1, av.shape[-1])
            return g @ bv.T, a2.T @ g.reshape(-1, g.shape[-1])
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xv = _val(x)
    out = np.asarray(xv.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _record(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _val(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    xv = _val(x)
    out = xv.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes=None) -> Tensor:
    xv = _val(x)
    if axes is None:
        axes = tuple(range(xv.ndim))[::-1]
    inv = np.argsort(axes)
    out = np.transpose(xv, axes)
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    xv = _val(x)
    out = np.array(xv[index])

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), vjp)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (vocab x d) for an integer id array."""
    tv = _val(table)
    ids = np.asarray(ids)
    out = tv[ids]

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _record(out, (table,), vjp)


def put_rows(x, rows: tuple[np.ndarray, ...], values) -> Tensor:
    """Return ``x`` with ``x[rows]`` replaced by ``values`` (broadcast).

    ``rows`` indexes all but the last axis; duplicate index tuples are not
    allowed.
    """
    xv, vv = _val(x), _val(values)
    out = xv.copy()
    out[rows] = vv
    target = out[rows].shape

    def vjp(g):
        gx = g.copy()
        gx[rows] = 0
        gv = _unbroadcast(g[rows].reshape(target), vv.shape)
        return gx, gv

    return _record(out, (x, values), vjp)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def relu(x) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    xv = _val(x)
    mask = xv > 0
    out = np.where(mask, xv, 0).astype(xv.dtype)
    return _record(out, (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU, as in GPT-2."""
    xv = _val(x)
    inner = _GELU_C * (xv + 0.044715 * xv * xv * xv)
    th = np.tanh(inner)
    out = 0.5 * xv * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        d = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * dinner
        return (g * d,)

    return _record(out, (x,), vjp)


def exp(x) -> Tensor:
    xv = _val(x)
    out = np.exp(xv)
    return _record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    xv = _val(x)
    out = np.log(xv)
    return _record(out, (x,), lambda g: (g / xv,))


def softmax(x, axis: int = -1) -> Tensor:
    xv = _val(x)
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    xv = _val(x)
    z = xv - xv.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xv, gv, bv = _val(x), _val(gain), _val(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gv + bv

    def vjp(g):
        n = xv.shape[-1]
        gxhat = g * gv
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        ggain = _unbroadcast(g * xhat, gv.shape)
        gbias = _unbroadcast(g, bv.shape)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), vjp)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``mask`` (same shape as targets) selects which positions count; the mean
    runs over selected positions only.
    """
    lv = _val(logits)
    targets = np.asarray(targets)
    if lv.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {lv.shape} do not match targets {targets.shape}")
    w = np.ones(targets.shape, dtype=lv.dtype) if mask is None else np.asarray(mask, dtype=lv.dtype)
    denom = max(float(w.sum()), 1.0)
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * w).sum() / denom, dtype=lv.dtype)

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / denom)[..., None] * g,)

    return _record(out, (logits,), vjp)


def kl_divergence(log_p, log_q, axis: int = -1) -> Tensor:
    """KL(p || q) summed over ``axis`` from log-probabilities; averaged over the rest."""
    lp, lq = _val(log_p), _val(log_q)
    p = np.exp(lp)
    terms = (p * (lp - lq)).sum(axis=axis)
    n = terms.size
    out = np.asarray(terms.mean(), dtype=lp.dtype)

    def vjp(g):
        gp = g / n * p * (lp - lq + 1.0)
        gq = -g / n * p
        return gp, gq

    return _record(out, (log_p, log_q), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and optimization
# ---------------------------------------------------------------------------

def solve_spd(c, v) -> np.ndarray:
    """Solve ``c x = v`` for symmetric positive-definite ``c`` via Cholesky."""
    cv = np.asarray(_val(c), dtype=np.float64)
    vv = np.asarray(_val(v), dtype=np.float64)
    if cv.ndim != 2 or cv.shape[0] != cv.shape[1] or cv.shape[0] != vv.shape[0]:
        raise DimensionError(f"solve_spd shapes: {cv.shape} and {vv.shape}")
    try:
        factor = scipy.linalg.cho_factor(cv, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(cv) if np.all(np.isfinite(cv)) else float("inf")
        raise NumericalError(f"matrix is not positive definite (condition estimate {cond:.3e})") from exc
    x = scipy.linalg.cho_solve(factor, vv)
    resid = np.linalg.norm(cv @ x - vv) / max(np.linalg.norm(vv), 1e-300)
    if resid > 1e-5:
        cond = np.linalg.cond(cv)
        raise NumericalError(f"solve residual {resid:.2e} exceeds 1e-5 (condition estimate {cond:.3e})")
    return x


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam update; ``t`` counts from 1.

    Returns the new ``(param, m, v)`` and leaves the inputs untouched.
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    new = param * (1 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return new.astype(param.dtype), m, v


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a dict of named arrays.

    Keys in ``no_decay`` skip the weight-decay term.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, no_decay=()):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            wd = 0.0 if k in self.no_decay else self.weight_decay
            self.params[k], self.m[k], self.v[k] = adamw_step(
                self.params[k], g, self.m[k], self.v[k], self.t, lr, self.betas, self.eps, wd)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
