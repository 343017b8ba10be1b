"""Dense numeric core: flat parameter vectors, a minimal reverse-mode tape,
a two-hidden-layer MLP primitive, and an Adam optimizer.

Matrices are plain float64 numpy arrays. The tape records only the handful
of primitives the training losses need (matmul, broadcast add/mul, tanh,
exp, log, softplus, square, log-sum-exp, reductions, Gaussian/Student-t
log-densities); it is not a general autodiff framework.

All math helpers in this module dispatch on their argument type: given
numpy arrays they compute eagerly, given tape `Node`s they record the
operation, so model code is written once and runs traced or untraced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln
from scipy.special import logsumexp as _np_logsumexp

from .errors import DimensionError, NumericError, UsageError

LOG_2PI = math.log(2.0 * math.pi)


def enable_malloc_reuse() -> bool:
    """Keep large freed buffers on the heap instead of returning them to the
    OS (glibc mmap threshold). Training allocates megabyte-scale temporaries
    every step; without this each one page-faults on first touch. No-op on
    non-glibc platforms. Returns True when applied."""
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_mmap_threshold = -3
        return bool(libc.mallopt(m_mmap_threshold, 1 << 30))
    except Exception:
        return False


# ---------------------------------------------------------------------------
# Parameter layout and flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) segments tiling a flat float64 vector."""

    segments: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        names = [name for name, _ in self.segments]
        if len(set(names)) != len(names):
            raise DimensionError(f"duplicate segment names in layout: {names}")

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = (pos, pos + n)
            pos += n
        return out

    def shape_of(self, name: str) -> tuple[int, ...]:
        for seg_name, shape in self.segments:
            if seg_name == name:
                return shape
        raise KeyError(name)

    def segment_at(self, flat_index: int) -> str:
        """Name of the segment containing a flat index."""
        for name, (lo, hi) in self.offsets().items():
            if lo <= flat_index < hi:
                return name
        raise IndexError(flat_index)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise DimensionError(
                f"flat vector has length {flat.shape}, layout needs ({self.size},)"
            )
        return {
            name: flat[lo:hi].reshape(self.shape_of(name))
            for name, (lo, hi) in self.offsets().items()
        }

    def flatten(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        chunks = []
        for name, shape in self.segments:
            arr = np.asarray(parts[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"segment {name}: got {arr.shape}, want {shape}")
            chunks.append(arr.reshape(-1))
        return np.concatenate(chunks) if chunks else np.zeros(0)


class ParamVector:
    """Flat float64 view of named parameter segments; the unit of exchange
    between clients and server."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: ParamLayout):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.size:
            raise DimensionError(
                f"parameter vector length {values.shape} does not match layout size {layout.size}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout)

    def segment(self, name: str) -> np.ndarray:
        lo, hi = self.layout.offsets()[name]
        return self.values[lo:hi].reshape(self.layout.shape_of(name))

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def __len__(self) -> int:
        return self.values.shape[0]


def mlp_layout(prefix: str, widths: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) segments for an MLP walking `widths`."""
    segs: list[tuple[str, tuple[int, ...]]] = []
    for i in range(len(widths) - 1):
        segs.append((f"{prefix}.W{i}", (widths[i], widths[i + 1])))
        segs.append((f"{prefix}.b{i}", (widths[i + 1],)))
    return segs


def mlp_param_count(widths: list[int]) -> int:
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------


class Node:
    """A value recorded on a GradTape."""

    __slots__ = ("tape", "value", "index", "parents", "vjp")

    def __init__(self, tape: "GradTape", value, parents, vjp):
        self.tape = tape
        self.value = value
        self.index = len(tape.nodes)
        self.parents = parents
        self.vjp = vjp
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    # arithmetic sugar; heavy lifting lives in the module-level helpers
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise UsageError("division by a traced value is not a supported primitive")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class GradTape:
    """Creation-ordered record of primitive operations, replayed backwards
    to obtain gradients with the same layout as the differentiated leaf."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value: np.ndarray) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), (), None)
        self.leaves.append(node)
        return node

    def constant(self, value) -> np.ndarray:
        # constants are plain arrays; kept for call-site symmetry
        return np.asarray(value, dtype=np.float64)

    def gradient(self, loss: Node, wrt: Node | None = None) -> np.ndarray:
        if not isinstance(loss, Node) or loss.tape is not self:
            raise UsageError("loss is not a node recorded on this tape")
        if np.size(loss.value) != 1:
            raise UsageError("backward() needs a scalar loss")
        if wrt is None:
            if len(self.leaves) != 1:
                raise UsageError("ambiguous leaf; pass wrt= explicitly")
            wrt = self.leaves[0]
        if wrt.tape is not self:
            raise UsageError("wrt is not a node recorded on this tape")

        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones(np.shape(loss.value))
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                j = parent.index
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        out = grads[wrt.index]
        if out is None:
            out = np.zeros(np.shape(wrt.value))
        return np.asarray(out, dtype=np.float64)


def backward(tape: GradTape, loss: Node, wrt: Node | None = None) -> np.ndarray:
    """Gradient of a recorded scalar loss with respect to a tape leaf."""
    return tape.gradient(loss, wrt)


def _value(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> GradTape | None:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise UsageError("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives (Node-or-array dispatch)
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av + bv
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Node):
        parents.append(a)
        slots.append(("a", np.shape(av)))
    if isinstance(b, Node):
        parents.append(b)
        slots.append(("b", np.shape(bv)))

    def vjp(g):
        return tuple(_unbroadcast(g, shape) for _, shape in slots)

    return Node(tape, out, tuple(parents), vjp)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av * bv
    if tape is None:
        return out
    parents, slots = [], []
    if isinstance(a, Node):
        parents.append(a)
        slots.append((bv, np.shape(av)))
    if isinstance(b, Node):
        parents.append(b)
        slots.append((av, np.shape(bv)))

    def vjp(g):
        return tuple(_unbroadcast(g * other, shape) for other, shape in slots)

    return Node(tape, out, tuple(parents), vjp)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = av @ bv
    if tape is None:
        return out
    parents, kinds = [], []
    if isinstance(a, Node):
        parents.append(a)
        kinds.append("a")
    if isinstance(b, Node):
        parents.append(b)
        kinds.append("b")

    def vjp(g):
        grads = []
        for kind in kinds:
            if kind == "a":
                grads.append(g @ bv.T)
            else:
                grads.append(av.T @ g)
        return tuple(grads)

    return Node(tape, out, tuple(parents), vjp)


def _unary(x, fwd, make_vjp):
    xv = _value(x)
    out = fwd(xv)
    if not isinstance(x, Node):
        return out
    bw = make_vjp(xv, out)
    return Node(x.tape, out, (x,), lambda g: (bw(g),))


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: lambda g: g * (1.0 - out * out))


def exp(x):
    return _unary(x, np.exp, lambda xv, out: lambda g: g * out)


def log(x):
    return _unary(x, np.log, lambda xv, out: lambda g: g / xv)


def softplus_np(x: np.ndarray) -> np.ndarray:
    """Stable softplus; noticeably faster than np.logaddexp(0, x)."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x):
    return _unary(
        x,
        softplus_np,
        lambda xv, out: lambda g: g * expit(xv),
    )


def square(x):
    return _unary(x, np.square, lambda xv, out: lambda g: g * (2.0 * xv))


def reduce_sum(x, axis=None):
    xv = _value(x)
    out = xv.sum(axis=axis)
    if not isinstance(x, Node):
        return out

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).astype(np.float64, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return Node(x.tape, out, (x,), vjp)


def reduce_mean(x, axis=None):
    xv = _value(x)
    denom = xv.size if axis is None else xv.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / denom)


def logsumexp(x, axis):
    xv = _value(x)
    out = _np_logsumexp(xv, axis=axis)
    if not isinstance(x, Node):
        return out
    soft = np.exp(xv - np.expand_dims(out, axis))

    def vjp(g):
        return (np.expand_dims(g, axis) * soft,)

    return Node(x.tape, out, (x,), vjp)


def reshape(x, shape):
    xv = _value(x)
    out = xv.reshape(shape)
    if not isinstance(x, Node):
        return out
    return Node(x.tape, out, (x,), lambda g: (np.asarray(g).reshape(xv.shape),))


def narrow(x, start, stop, axis=0):
    """Contiguous slice along one axis (used to split packed MLP outputs)."""
    xv = _value(x)
    idx = [slice(None)] * xv.ndim
    idx[axis] = slice(start, stop)
    out = xv[tuple(idx)]
    if not isinstance(x, Node):
        return out

    def vjp(g):
        full = np.zeros(xv.shape)
        full[tuple(idx)] = g
        return (full,)

    return Node(x.tape, out, (x,), vjp)


def repeat_rows(x, k: int):
    """Repeat each row k times: (n, m) -> (n*k, m)."""
    xv = _value(x)
    out = np.repeat(xv, k, axis=0)
    if not isinstance(x, Node):
        return out

    def vjp(g):
        g = np.asarray(g)
        return (g.reshape(xv.shape[0], k, *xv.shape[1:]).sum(axis=1),)

    return Node(x.tape, out, (x,), vjp)


def linear(x, w, b):
    """Fused x @ w + b (row-broadcast bias); one temporary instead of two."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = _value(x), _value(w), _value(b)
    out = xv @ wv
    out += bv
    if tape is None:
        return out
    parents, kinds = [], []
    for arg, kind in ((x, "x"), (w, "w"), (b, "b")):
        if isinstance(arg, Node):
            parents.append(arg)
            kinds.append(kind)

    def vjp(g):
        grads = []
        for kind in kinds:
            if kind == "x":
                grads.append(g @ wv.T)
            elif kind == "w":
                grads.append(xv.T @ g)
            else:
                grads.append(g.sum(axis=0))
        return tuple(grads)

    return Node(tape, out, tuple(parents), vjp)


def gaussian_logpdf(value, mean, std):
    """Elementwise Gaussian log-density; any argument may be traced."""
    tape = _tape_of(value, mean, std)
    xv, mv, sv = _value(value), _value(mean), _value(std)
    d = (xv - mv) / sv
    out = -(np.log(sv) + 0.5 * d * d + 0.5 * LOG_2PI)
    if tape is None:
        return out
    parents, kinds = [], []
    for arg, kind in ((value, "x"), (mean, "mu"), (std, "sigma")):
        if isinstance(arg, Node):
            parents.append(arg)
            kinds.append(kind)

    def vjp(g):
        grads = []
        for kind in kinds:
            if kind == "x":
                grads.append(_unbroadcast(-g * d / sv, np.shape(xv)))
            elif kind == "mu":
                grads.append(_unbroadcast(g * d / sv, np.shape(mv)))
            else:
                grads.append(_unbroadcast(g * (d * d - 1.0) / sv, np.shape(sv)))
        return tuple(grads)

    return Node(tape, out, tuple(parents), vjp)


def masked_gaussian_logpdf_rowsum(x: np.ndarray, mask: np.ndarray, mean, std):
    """Per-row sum of Gaussian log-densities over mask==1 cells.

    `x` and `mask` are constants (data and observedness); mean/std may be
    traced. Fused so the training loss makes one pass over the batch.
    """
    tape = _tape_of(mean, std)
    mv, sv = _value(mean), _value(std)
    d = (x - mv) / sv
    cell = -(np.log(sv) + 0.5 * d * d + 0.5 * LOG_2PI)
    out = np.einsum("ij,ij->i", cell, mask)
    if tape is None:
        return out
    parents, kinds = [], []
    for arg, kind in ((mean, "mu"), (std, "sigma")):
        if isinstance(arg, Node):
            parents.append(arg)
            kinds.append(kind)

    def vjp(g):
        gm = g[:, None] * mask
        grads = []
        for kind in kinds:
            if kind == "mu":
                grads.append(_unbroadcast(gm * d / sv, np.shape(mv)))
            else:
                grads.append(_unbroadcast(gm * (d * d - 1.0) / sv, np.shape(sv)))
        return tuple(grads)

    return Node(tape, out, tuple(parents), vjp)


def masked_gaussian_head_rowsum(x: np.ndarray, mask: np.ndarray, packed, floor: float):
    """Per-row masked Gaussian log-likelihood of a packed decoder output.

    `packed` is (n, 2p): mean in the first p columns, raw std in the last p
    with std = softplus(raw) + floor. Fusing the head keeps the training
    loss from materializing half a dozen (n, p) temporaries per step.
    """
    tape = _tape_of(packed)
    pv = _value(packed)
    n, two_p = pv.shape
    p = two_p // 2
    if x.shape != (n, p) or mask.shape != (n, p):
        raise DimensionError(
            f"head: packed {pv.shape} expects data/mask of shape {(n, p)}, "
            f"got {x.shape} and {mask.shape}"
        )
    mu = pv[:, :p]
    raw = pv[:, p:]
    sigma = np.abs(raw)
    np.negative(sigma, out=sigma)
    np.exp(sigma, out=sigma)
    np.log1p(sigma, out=sigma)
    sigma += np.maximum(raw, 0.0)
    sigma += floor
    d = x - mu
    d /= sigma
    d2 = d * d
    cell = np.log(sigma)
    cell += 0.5 * LOG_2PI
    cell += 0.5 * d2
    out = -np.einsum("ij,ij->i", cell, mask)
    if tape is None:
        return out

    def vjp(g):
        gm = g[:, None] * mask
        full = np.empty((n, two_p))
        np.multiply(gm, d, out=full[:, :p])
        full[:, :p] /= sigma
        t = d2  # consumed only here; safe to overwrite in place
        t -= 1.0
        t /= sigma
        t *= expit(raw)
        np.multiply(gm, t, out=full[:, p:])
        return (full,)

    return Node(tape, out, (packed,), vjp)


def masked_student_t_head_rowsum(x: np.ndarray, mask: np.ndarray, packed,
                                 floor: float, min_df: float):
    """Student-t analogue of the fused Gaussian head; `packed` is (n, 3p)
    with location, raw scale and raw df columns, scale = softplus(raw)+floor
    and df = min_df + softplus(raw)."""
    tape = _tape_of(packed)
    pv = _value(packed)
    n, three_p = pv.shape
    p = three_p // 3
    if x.shape != (n, p) or mask.shape != (n, p):
        raise DimensionError(
            f"head: packed {pv.shape} expects data/mask of shape {(n, p)}, "
            f"got {x.shape} and {mask.shape}"
        )
    mu = pv[:, :p]
    raw_s = pv[:, p : 2 * p]
    raw_df = pv[:, 2 * p :]
    sigma = softplus_np(raw_s) + floor
    nu = softplus_np(raw_df) + min_df
    u = (x - mu) / sigma
    u2 = u * u
    cell = (
        gammaln((nu + 1.0) / 2.0)
        - gammaln(nu / 2.0)
        - 0.5 * np.log(nu * math.pi)
        - np.log(sigma)
        - ((nu + 1.0) / 2.0) * np.log1p(u2 / nu)
    )
    out = np.einsum("ij,ij->i", cell, mask)
    if tape is None:
        return out
    denom = nu + u2

    def vjp(g):
        gm = g[:, None] * mask
        full = np.empty((n, three_p))
        np.multiply(gm, (nu + 1.0) * u / (sigma * denom), out=full[:, :p])
        np.multiply(
            gm, ((nu + 1.0) * u2 / denom - 1.0) / sigma * expit(raw_s),
            out=full[:, p : 2 * p],
        )
        dnu = (
            0.5 * digamma((nu + 1.0) / 2.0)
            - 0.5 * digamma(nu / 2.0)
            - 0.5 / nu
            - 0.5 * np.log1p(u2 / nu)
            + (nu + 1.0) * u2 / (2.0 * nu * denom)
        )
        np.multiply(gm, dnu * expit(raw_df), out=full[:, 2 * p :])
        return (full,)

    return Node(tape, out, (packed,), vjp)


def masked_student_t_logpdf_rowsum(x: np.ndarray, mask: np.ndarray, loc, scale, df):
    """Per-row sum of Student-t log-densities over mask==1 cells."""
    tape = _tape_of(loc, scale, df)
    mv, sv, nv = _value(loc), _value(scale), _value(df)
    u = (x - mv) / sv
    u2 = u * u
    cell = (
        gammaln((nv + 1.0) / 2.0)
        - gammaln(nv / 2.0)
        - 0.5 * np.log(nv * math.pi)
        - np.log(sv)
        - ((nv + 1.0) / 2.0) * np.log1p(u2 / nv)
    )
    out = np.einsum("ij,ij->i", cell, mask)
    if tape is None:
        return out
    parents, kinds = [], []
    for arg, kind in ((loc, "mu"), (scale, "sigma"), (df, "nu")):
        if isinstance(arg, Node):
            parents.append(arg)
            kinds.append(kind)
    denom = nv + u2

    def vjp(g):
        gm = g[:, None] * mask
        grads = []
        for kind in kinds:
            if kind == "mu":
                grads.append(_unbroadcast(gm * (nv + 1.0) * u / (sv * denom), np.shape(mv)))
            elif kind == "sigma":
                grads.append(
                    _unbroadcast(gm * ((nv + 1.0) * u2 / denom - 1.0) / sv, np.shape(sv))
                )
            else:
                dnu = (
                    0.5 * digamma((nv + 1.0) / 2.0)
                    - 0.5 * digamma(nv / 2.0)
                    - 0.5 / nv
                    - 0.5 * np.log1p(u2 / nv)
                    + (nv + 1.0) * u2 / (2.0 * nv * denom)
                )
                grads.append(_unbroadcast(gm * dnu, np.shape(nv)))
        return tuple(grads)

    return Node(tape, out, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# MLP forward
# ---------------------------------------------------------------------------


def mlp_forward(theta, x, widths: list[int], activation: str = "tanh"):
    """Forward pass of a fully-connected net.

    `theta` is the flat parameter segment (array or tape node) laid out as
    alternating (W_i, b_i) blocks; `x` is (n, widths[0]). Hidden layers get
    the activation, the final layer is linear. Records on the tape when the
    inputs are nodes.
    """
    if activation != "tanh":
        raise UsageError(f"unsupported activation {activation!r}")
    n_params = np.shape(_value(theta))[0] if np.ndim(_value(theta)) == 1 else -1
    expected = mlp_param_count(widths)
    if n_params != expected:
        raise DimensionError(
            f"mlp params: got length {n_params}, widths {widths} need {expected}"
        )
    xv = _value(x)
    if np.ndim(xv) != 2 or xv.shape[1] != widths[0]:
        raise DimensionError(
            f"mlp input: got shape {np.shape(xv)}, first width is {widths[0]}"
        )
    h = x
    offset = 0
    for i in range(len(widths) - 1):
        a, b = widths[i], widths[i + 1]
        w = reshape(narrow(theta, offset, offset + a * b), (a, b))
        offset += a * b
        bias = narrow(theta, offset, offset + b)
        offset += b
        h = linear(h, w, bias)
        if i < len(widths) - 2:
            h = tanh(h)
    return h


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moment buffers; single-owner, mutated in place by adam_step."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(0, np.zeros(n_params), np.zeros(n_params), lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ParamVector, grads: ParamVector) -> ParamVector:
    """One bias-corrected Adam update; returns new parameters."""
    if not params.same_layout(grads):
        raise DimensionError("params and grads have different layouts")
    if state.m.shape != params.values.shape:
        raise DimensionError("Adam state does not match parameter length")
    g = grads.values
    if not np.isfinite(g).all():
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        seg = params.layout.segment_at(bad)
        raise NumericError(f"non-finite gradient in segment {seg!r}")
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamVector(new_values, params.layout)
