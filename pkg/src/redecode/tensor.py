"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
input gradients. ``backward`` walks the recorded graph in reverse
topological order. There is no implicit broadcasting: shape coercions go
through explicit helpers such as :func:`add_bias` and :func:`blend`.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an op is applied outside its numeric domain."""


class ContractError(ValueError):
    """Raised when a caller violates an op precondition."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is populated by
    :meth:`backward` for every tensor reachable from the loss that
    requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.name = name
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return negate(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Public hook for fused primitives defined outside this module.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    return _make(np.asarray(data, dtype=DTYPE), tuple(parents), backward_fn)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise_binary(a: Tensor, b: Tensor, fn: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if fn not in ops:
        raise ContractError(f"unknown binary op {fn!r}")
    return ops[fn](a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    return _make(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x[B, in]`` and ``weight[out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ wd, g.T @ xd))
    if bias.shape != (wd.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    return _make(
        out + bias.data, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0))
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _make(x.data.T, (x,), lambda g: (g.T,))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum.

    Every index of each operand must appear in the output or in the other
    operand, which makes the gradient another two-operand einsum.
    """
    ins, out_idx = spec.split("->")
    a_idx, b_idx = ins.split(",")
    for own, other in ((a_idx, b_idx), (b_idx, a_idx)):
        if any(c not in out_idx and c not in other for c in own):
            raise ContractError(f"einsum {spec!r}: index summed within a single operand")
    ad, bd = a.data, b.data
    try:
        out = np.einsum(spec, ad, bd)
    except ValueError as exc:
        raise ShapeError(f"einsum {spec!r}: {a.shape} and {b.shape}: {exc}") from None

    def bw(g):
        return (
            np.einsum(f"{out_idx},{b_idx}->{a_idx}", g, bd),
            np.einsum(f"{out_idx},{a_idx}->{b_idx}", g, ad),
        )

    return _make(np.asarray(out, dtype=DTYPE), (a, b), bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Explicit row broadcast: ``x[..., n] + bias[n]``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} incompatible with bias {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def scale_rows(x: Tensor, w: np.ndarray) -> Tensor:
    """Multiply each row ``x[i, ...]`` by the constant ``w[i]``."""
    w = np.asarray(w, dtype=DTYPE)
    if w.shape != x.shape[:1]:
        raise ShapeError(f"scale_rows: weights {w.shape} vs rows of {x.shape}")
    wb = w.reshape((-1,) + (1,) * (x.ndim - 1))
    return _make(x.data * wb, (x,), lambda g: (g * wb,))


def blend(mask: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """Row-wise select: rows with ``mask`` true come from ``new``, others from ``old``."""
    _check_same(new, old, "blend")
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (new.ndim - 1))
    if m.shape[0] != new.shape[0]:
        raise ShapeError(f"blend: mask of {m.shape[0]} rows vs {new.shape}")
    return _make(
        np.where(m, new.data, old.data),
        (new, old),
        lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)),
    )


# ----------------------------------------------------------------- unary ops


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def elementwise_unary(x: Tensor, fn: str) -> Tensor:
    ops = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "negate": negate}
    if fn not in ops:
        raise ContractError(f"unknown unary op {fn!r}")
    return ops[fn](x)


# ---------------------------------------------------------------- reductions


def reduce(x: Tensor, fn: str = "sum", axis: int | None = None) -> Tensor:
    if x.data.size == 0:
        raise ContractError("empty reduction")
    if fn not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {fn!r}")
    shape = x.shape
    if axis is None:
        n = x.data.size
        val = x.data.sum()
        if fn == "mean":
            val = val / n
        factor = 1.0 if fn == "sum" else 1.0 / n
        return _make(np.asarray(val, dtype=DTYPE), (x,), lambda g: (np.full(shape, g * factor),))
    ax = axis % x.ndim
    n = shape[ax]
    val = x.data.sum(axis=ax)
    factor = 1.0
    if fn == "mean":
        val = val / n
        factor = 1.0 / n
    return _make(
        val,
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g * factor, ax), shape).copy(),),
    )


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, "mean", axis)


# ----------------------------------------------------------- shape plumbing


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ContractError("concat of nothing")
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("stack of nothing")
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[x.shape for x in xs]}: {exc}") from None
    n = len(xs)
    return _make(
        out,
        tuple(xs),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), bw)


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take a single index along ``axis``, dropping that axis."""
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        idx = [slice(None)] * len(shape)
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=ax), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------- probability ops


def _softmax_np(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    With ``mask`` (same shape, truthy = keep) masked entries get exactly zero
    weight. A slice with no kept entries is a contract error.
    """
    v = x.data
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != v.shape:
            raise ShapeError(f"softmax mask {m.shape} vs input {v.shape}")
        if not m.any(axis=-1).all():
            raise ContractError("softmax over a fully masked slice")
        big = np.where(m, v, -np.inf)
        shifted = big - big.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(shifted), 0.0)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        y = _softmax_np(v)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def cross_entropy_masked(
    probs: Tensor,
    targets: np.ndarray,
    mask: np.ndarray,
    weights: np.ndarray | None = None,
) -> tuple[Tensor, bool]:
    """Masked negative log-likelihood of ``targets`` under ``probs``.

    ``probs`` is ``[N, V]``. The default reduction is the mean over unmasked
    positions. ``weights`` (length N) overrides that with an explicit
    per-position weighting, which is how batched callers express a
    per-sentence mean. Probabilities are floored at 1e-12 before the log.

    Returns ``(loss, empty)``; an all-zero mask yields 0 and ``empty=True``.
    """
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy_masked expects [N, V], got {probs.shape}")
    n, v = probs.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=DTYPE).reshape(-1)
    if targets.shape[0] != n or mask.shape[0] != n:
        raise ShapeError(f"targets/mask length must be {n}")
    if np.any((targets < 0) | (targets >= v)):
        raise ContractError("target id outside vocabulary")
    active = mask.sum()
    if active == 0:
        return _make(np.asarray(0.0), (probs,), lambda g: (np.zeros((n, v)),)), True
    if weights is None:
        w = mask / active
    else:
        w = np.asarray(weights, dtype=DTYPE).reshape(-1) * mask
    rows = np.arange(n)
    picked = probs.data[rows, targets]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = -(w * np.log(floored)).sum()

    def bw(g):
        grad = np.zeros((n, v), dtype=DTYPE)
        live = picked >= PROB_FLOOR
        grad[rows, targets] = np.where(live, -g * w / floored, 0.0)
        return (grad,)

    return _make(np.asarray(loss, dtype=DTYPE), (probs,), bw), False


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Row-wise cosine similarity of ``[..., d]`` tensors.

    Rows where either norm is below 1e-12 give 0 with zero gradient.
    """
    _check_same(u, v, "cosine_similarity")
    ud, vd = u.data, v.data
    nu = np.sqrt((ud * ud).sum(axis=-1))
    nv = np.sqrt((vd * vd).sum(axis=-1))
    ok = (nu > NORM_FLOOR) & (nv > NORM_FLOOR)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    dot = (ud * vd).sum(axis=-1)
    c = np.where(ok, dot / (nu_s * nv_s), 0.0)

    def bw(g):
        gk = np.where(ok, g, 0.0)[..., None]
        cc, a, b = c[..., None], nu_s[..., None], nv_s[..., None]
        du = gk * (vd / (a * b) - cc * ud / (a * a))
        dv = gk * (ud / (a * b) - cc * vd / (b * b))
        return du, dv

    return _make(np.asarray(c, dtype=DTYPE), (u, v), bw)


# ------------------------------------------------------------------ backward


def topological_order(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` with every input before its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------ init and RNG


class Rng:
    """Seeded generator; PCG64 streams are platform independent."""

    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def random(self) -> float:
        return float(self._gen.random())

    def spawn(self, *key: int) -> Rng:
        """Independent child stream keyed by ``(seed, *key)``."""
        base = [self.seed] if isinstance(self.seed, int) else list(self.seed)
        return Rng(base + list(key))


def xavier_init(shape: tuple[int, int], rng: Rng) -> Tensor:
    if len(shape) != 2:
        raise ShapeError(f"xavier_init needs a 2-D shape, got {shape}")
    fan_out, fan_in = shape
    if fan_in < 1 or fan_out < 1:
        raise ShapeError(f"xavier_init: zero dimension in {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


# ------------------------------------------------------ gradient verification


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor,
    epsilon: float = 1e-6,
    analytic: np.ndarray | None = None,
    indices: Sequence[tuple[int, ...]] | None = None,
    batched: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Compare backward's gradient of ``f()`` w.r.t. ``x`` to central differences.

    ``f`` is a closure that reads ``x.data``; it is re-evaluated with each
    coordinate nudged in place. ``analytic`` skips the backward pass (lets a
    caller reuse or deliberately corrupt a gradient). ``batched``, when given,
    replaces the one-at-a-time re-evaluation: it maps a stack of perturbed
    copies ``[K, *x.shape]`` to their ``K`` objective values.
    Returns ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    if analytic is None:
        x.grad = None
        loss = f()
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if batched is not None:
        numeric = numeric_gradient_batched(batched, x.data, epsilon, indices)
    else:
        numeric = numeric_gradient(f, x, epsilon, indices)
    if indices is None:
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        return float(err.max())
    worst = 0.0
    for idx in indices:
        num = numeric[idx]
        worst = max(worst, abs(analytic[idx] - num) / max(1.0, abs(num)))
    return float(worst)


def numeric_gradient(
    f: Callable[[], Tensor],
    x: Tensor,
    epsilon: float = 1e-6,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> np.ndarray:
    data = x.data
    grad = np.zeros_like(data)
    coords = indices if indices is not None else list(np.ndindex(data.shape))
    with no_grad():
        for idx in coords:
            orig = data[idx]
            data[idx] = orig + epsilon
            hi = f().item()
            data[idx] = orig - epsilon
            lo = f().item()
            data[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite objective at coordinate {idx}")
            grad[idx] = (hi - lo) / (2.0 * epsilon)
    return grad


def numeric_gradient_batched(
    f: Callable[[np.ndarray], np.ndarray],
    data: np.ndarray,
    epsilon: float = 1e-6,
    indices: Sequence[tuple[int, ...]] | None = None,
    chunk: int = 128,
) -> np.ndarray:
    """Central differences with ``f`` scoring ``2 * chunk`` perturbed copies per call."""
    grad = np.zeros_like(data)
    coords = indices if indices is not None else list(np.ndindex(data.shape))
    for start in range(0, len(coords), chunk):
        part = coords[start : start + chunk]
        stack = np.repeat(data[None], 2 * len(part), axis=0)
        for k, idx in enumerate(part):
            stack[(2 * k,) + tuple(idx)] += epsilon
            stack[(2 * k + 1,) + tuple(idx)] -= epsilon
        values = np.asarray(f(stack), dtype=DTYPE)
        if values.shape != (2 * len(part),):
            raise ShapeError(f"batched objective returned {values.shape}, expected ({2 * len(part)},)")
        if not np.isfinite(values).all():
            raise FloatingPointError("non-finite objective in batched finite differences")
        for k, idx in enumerate(part):
            grad[tuple(idx)] = (values[2 * k] - values[2 * k + 1]) / (2.0 * epsilon)
    return grad
