"""Dense NCHW tensors with a reverse-mode autodiff tape.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
checking).  Operations are pure: they never mutate their inputs.  When a
``Tape`` is active, every operation that touches a traced tensor records a
node with a backward closure; ``backward`` then walks the tape in reverse
creation order, which is a valid topological order by construction (a node's
inputs always exist before the node itself, so cycles are impossible).

A tape and the parameters trained through it belong to a single thread.
Forward calls without an active tape are plain numpy and safe to run
concurrently on shared inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


def _as_array(data, dtype=None):
    a = np.asarray(data)
    if dtype is not None:
        return a.astype(dtype, copy=False)
    if a.dtype in (np.float32, np.float64):
        return a
    return a.astype(DEFAULT_DTYPE)


class Tensor:
    """Immutable-by-convention dense array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, dtype=None, requires_grad=False):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, no tape history, no grad requirement."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars are treated as untraced constants
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


class Node:
    __slots__ = ("tape", "inputs", "bwd", "grad", "shape", "dtype")

    def __init__(self, tape, inputs, bwd, shape, dtype):
        self.tape = tape
        self.inputs = inputs  # tuple of Node or None, aligned with the op's inputs
        self.bwd = bwd  # closure: upstream grad -> tuple of input grads; None for leaves
        self.grad = None
        self.shape = shape
        self.dtype = dtype


class Tape:
    """Records operations so ``backward`` can replay them in reverse.

    Use as a context manager::

        with Tape() as tape:
            loss = ...
            backward(loss)
        g = tape.grad_of(param.value)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _leaf(self, t: Tensor) -> Node:
        node = Node(self, (), None, t.data.shape, t.data.dtype)
        self.nodes.append(node)
        t.node = node
        return node

    def _node_of(self, t: Tensor):
        """Live node for t on this tape; creates a leaf for grad-requiring tensors."""
        node = t.node
        if node is not None and node.tape is self:
            return node
        if t.requires_grad:
            return self._leaf(t)
        return None

    def _traced(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        return t.requires_grad or (t.node is not None and t.node.tape is self)

    def add(self, out: Tensor, inputs, bwd) -> Tensor:
        in_nodes = tuple(
            self._node_of(t) if isinstance(t, Tensor) else None for t in inputs
        )
        node = Node(self, in_nodes, bwd, out.data.shape, out.data.dtype)
        self.nodes.append(node)
        out.node = node
        return out

    def grad_of(self, t: Tensor):
        """Accumulated gradient for t after backward, or None if unreached."""
        node = t.node
        if node is None or node.tape is not self:
            return None
        return node.grad


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tape_for(*tensors):
    """The active tape, if any given tensor is traced on it; else None."""
    tape = active_tape()
    if tape is None:
        return None
    for t in tensors:
        if tape._traced(t):
            return tape
    return None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) for every node reachable from the scalar loss.

    Gradients add across multiple uses of the same tensor.  Leaf gradients are
    read back through ``Tape.grad_of`` (typically via ``Param.collect``).
    """
    node = loss.node
    if node is None:
        raise ShapeError("backward: loss is not attached to an active tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = node.tape
    node.grad = np.ones_like(loss.data)
    start = tape.nodes.index(node) if tape.nodes[-1] is not node else len(tape.nodes) - 1
    for n in reversed(tape.nodes[: start + 1]):
        if n.grad is None or n.bwd is None:
            continue
        grads = n.bwd(n.grad)
        for inp, g in zip(n.inputs, grads):
            if inp is None or g is None:
                continue
            if inp.grad is None:
                inp.grad = np.zeros(inp.shape, dtype=inp.dtype)
            inp.grad += g


class Param:
    """A named, trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value, dtype=None):
        self.value = Tensor(value, dtype=dtype, requires_grad=True)
        self.grad = np.zeros_like(self.value.data)

    def collect(self, tape: Tape):
        """Add this parameter's tape gradient (if any) into the accumulator."""
        g = tape.grad_of(self.value)
        if g is not None:
            self.grad += g

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, data):
        """Replace the value in place (optimizer step); clears tape history."""
        self.value = Tensor(data, requires_grad=True)


class Buffer:
    """Non-trained module state (e.g. batch-norm running statistics)."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value)


class Module:
    """Minimal container: child modules, Params and Buffers found by attribute walk.

    Attribute insertion order fixes parameter order, so name lists are
    deterministic for a given architecture.
    """

    def _walk(self, prefix, kind):
        for name, attr in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(attr, kind):
                yield path, attr
            elif isinstance(attr, Module):
                yield from attr._walk(path, kind)
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}", kind)

    def named_params(self, prefix=""):
        yield from self._walk(prefix, Param)

    def named_buffers(self, prefix=""):
        yield from self._walk(prefix, Buffer)

    def params(self):
        for _, p in self.named_params():
            yield p

    def param_names(self):
        return [name for name, _ in self.named_params()]

    def set_training(self, flag: bool):
        self._training = flag
        for name, attr in vars(self).items():
            if isinstance(attr, Module):
                attr.set_training(flag)
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        item.set_training(flag)

    @property
    def training(self):
        return getattr(self, "_training", True)

    def train(self):
        self.set_training(True)

    def eval(self):
        self.set_training(False)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def collect_grads(self, tape: Tape):
        for p in self.params():
            p.collect(tape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, like=None):
    if isinstance(a, Tensor):
        return a
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(a, dtype=dtype))


def add(a, b):
    a, b = _coerce(a, b), _coerce(b, a)
    out = Tensor(a.data + b.data)
    tape = _tape_for(a, b)
    if tape is None:
        return out
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape.add(out, (a, b), bwd)


def sub(a, b):
    a, b = _coerce(a, b), _coerce(b, a)
    out = Tensor(a.data - b.data)
    tape = _tape_for(a, b)
    if tape is None:
        return out
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape.add(out, (a, b), bwd)


def mul(a, b):
    a, b = _coerce(a, b), _coerce(b, a)
    out = Tensor(a.data * b.data)
    tape = _tape_for(a, b)
    if tape is None:
        return out
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return tape.add(out, (a, b), bwd)


def div(a, b):
    a, b = _coerce(a, b), _coerce(b, a)
    out = Tensor(a.data / b.data)
    tape = _tape_for(a, b)
    if tape is None:
        return out
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return tape.add(out, (a, b), bwd)


def power(x: Tensor, p: float):
    """x**p for a scalar exponent; caller guarantees a valid domain (x > 0 for fractional p)."""
    out = Tensor(x.data**p)
    tape = _tape_for(x)
    if tape is None:
        return out
    xd = x.data

    def bwd(g):
        return (g * p * xd ** (p - 1.0),)

    return tape.add(out, (x,), bwd)


def log(x: Tensor):
    out = Tensor(np.log(x.data))
    tape = _tape_for(x)
    if tape is None:
        return out
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return tape.add(out, (x,), bwd)


def clip(x: Tensor, lo=None, hi=None):
    """Clamp values; clamped positions get zero gradient."""
    out = Tensor(np.clip(x.data, lo, hi))
    tape = _tape_for(x)
    if tape is None:
        return out
    inside = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi

    def bwd(g):
        return (g * inside,)

    return tape.add(out, (x,), bwd)


def sum_all(x: Tensor):
    out = Tensor(x.data.sum())
    tape = _tape_for(x)
    if tape is None:
        return out
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        return (np.broadcast_to(g.astype(dtype), shape),)

    return tape.add(out, (x,), bwd)


def mean_all(x: Tensor):
    n = x.data.size
    out = Tensor(x.data.mean())
    tape = _tape_for(x)
    if tape is None:
        return out
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        return (np.broadcast_to((g / n).astype(dtype), shape),)

    return tape.add(out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor):
    out = Tensor(np.maximum(x.data, 0.0))
    tape = _tape_for(x)
    if tape is None:
        return out
    mask = x.data > 0  # subgradient at 0 is defined as 0

    def bwd(g):
        return (g * mask,)

    return tape.add(out, (x,), bwd)


def leaky_relu(x: Tensor, slope=0.2):
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    tape = _tape_for(x)
    if tape is None:
        return out
    pos = x.data > 0

    def bwd(g):
        return (np.where(pos, g, slope * g),)

    return tape.add(out, (x,), bwd)


def sigmoid(x: Tensor):
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        return (g * y * (1.0 - y),)

    return tape.add(out, (x,), bwd)


def tanh(x: Tensor):
    y = np.tanh(x.data)
    out = Tensor(y)
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        return (g * (1.0 - y * y),)

    return tape.add(out, (x,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor):
    """Exact Gaussian-CDF form x * Phi(x)."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = Tensor((xd * phi).astype(xd.dtype, copy=False))
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (phi + xd * pdf)).astype(xd.dtype, copy=False),)

    return tape.add(out, (x,), bwd)


def identity(x: Tensor):
    return x


ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


def activation(x: Tensor, kind: str):
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ShapeError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor):
    """Channel concatenation, a first. N/H/W must match."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    for axis, name in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {name} differs, {a.shape[axis]} vs {b.shape[axis]}"
            )
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    tape = _tape_for(a, b)
    if tape is None:
        return out
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return tape.add(out, (a, b), bwd)


def slice_channels(x: Tensor, start: int, stop: int):
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(
            f"slice_channels: [{start}, {stop}) out of range for {x.shape[1]} channels"
        )
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))
    tape = _tape_for(x)
    if tape is None:
        return out
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return tape.add(out, (x,), bwd)


def pixel_shuffle(x: Tensor, r: int):
    """Rearrange channel groups of r*r into an r-times upsampled grid.

    out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]
    """
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)

    def fwd(a):
        return (
            a.reshape(n, co, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, co, h * r, w * r)
        )

    out = Tensor(fwd(x.data))
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        return (
            g.reshape(n, co, h, r, w, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w),
        )

    return tape.add(out, (x,), bwd)


def pixel_unshuffle(x: Tensor, r: int):
    """Inverse rearrangement of pixel_shuffle."""
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims {h}x{w} not divisible by r = {r}")
    ho, wo = h // r, w // r
    out = Tensor(
        x.data.reshape(n, c, ho, r, wo, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, ho, wo)
    )
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        return (
            g.reshape(n, c, r, r, ho, wo)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w),
        )

    return tape.add(out, (x,), bwd)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int):
    """Spatial window [top:top+height, left:left+width]; backward zero-pads."""
    n, c, h, w = x.shape
    if not (0 <= top and top + height <= h and 0 <= left and left + width <= w):
        raise ShapeError(
            f"crop2d window {height}x{width}@({top},{left}) exceeds input {h}x{w}"
        )
    out = Tensor(np.ascontiguousarray(x.data[:, :, top : top + height, left : left + width]))
    tape = _tape_for(x)
    if tape is None:
        return out
    shape, dtype = x.data.shape, x.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, :, top : top + height, left : left + width] = g
        return (full,)

    return tape.add(out, (x,), bwd)


def global_avg_pool(x: Tensor):
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        return (np.broadcast_to(g / (h * w), (n, c, h, w)),)

    return tape.add(out, (x,), bwd)


def avg_pool2(x: Tensor):
    """2x2 mean pooling with stride 2 (even spatial dims required)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    v = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(v)
    tape = _tape_for(x)
    if tape is None:
        return out

    def bwd(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return tape.add(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_dim(size, k, s, p):
    return (size + 2 * p - k) // s + 1


def _conv_forward_plain(xp, w, s, oh, ow):
    # padded input (N,C,Hp,Wp), weight (Cout,C,kH,kW)
    n, c = xp.shape[:2]
    cout, _, kh, kw = w.shape
    acc = np.zeros((n, cout, oh * ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s].reshape(n, c, oh * ow)
            acc += np.matmul(w[:, :, i, j], xs)
    return acc.reshape(n, cout, oh, ow)


def _conv_forward_chanwise(xp, w, s, oh, ow, groups):
    # one input channel per group (depthwise-style), m filters per group
    n = xp.shape[0]
    cout, _, kh, kw = w.shape
    m = cout // groups
    acc = np.zeros((n, groups, m, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
            wij = w[:, 0, i, j].reshape(groups, m)
            acc += xs[:, :, None] * wij[None, :, :, None, None]
    return acc.reshape(n, cout, oh, ow)


def conv2d(x: Tensor, w: Tensor, b=None, stride=1, padding=0, groups=1):
    """2D cross-correlation (no kernel flip) with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin/groups, kH, kW); b: (Cout,) or None.
    Output spatial dims are floor((dim + 2*padding - k) / stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4D input and weight")
    n, cin, h, ww_ = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups != 0:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: weight expects {cin_g} channels per group, input provides {cin // groups}"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match Cout = {cout}")
    hp, wp = h + 2 * padding, ww_ + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded spatial dims {hp}x{wp} smaller than kernel {kh}x{kw}"
        )
    oh, ow = _conv_out_dim(h, kh, stride, padding), _conv_out_dim(ww_, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    chanwise = cin_g == 1 and groups > 1
    if groups == 1:
        y = _conv_forward_plain(xp, w.data, stride, oh, ow)
    elif chanwise:
        y = _conv_forward_chanwise(xp, w.data, stride, oh, ow, groups)
    else:
        y = np.empty((n, cout, oh, ow), dtype=xp.dtype)
        mo = cout // groups
        for gi in range(groups):
            y[:, gi * mo : (gi + 1) * mo] = _conv_forward_plain(
                xp[:, gi * cin_g : (gi + 1) * cin_g], w.data[gi * mo : (gi + 1) * mo],
                stride, oh, ow,
            )
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)

    tape = _tape_for(x, w, b)
    if tape is None:
        return out
    wd = w.data
    s = stride

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        g2 = g.reshape(n, cout, oh * ow)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        if groups == 1:
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s].reshape(
                        n, cin, oh * ow
                    )
                    gw[:, :, i, j] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
                    # stride-s slice targets are disjoint for a fixed (i, j)
                    gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += np.matmul(
                        wd[:, :, i, j].T, g2
                    ).reshape(n, cin, oh, ow)
        elif chanwise:
            m = cout // groups
            gr = g.reshape(n, groups, m, oh, ow)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + s * oh : s, j : j + s * ow : s]
                    gw[:, 0, i, j] = (gr * xs[:, :, None]).sum(axis=(0, 3, 4)).reshape(cout)
                    wij = wd[:, 0, i, j].reshape(groups, m)
                    gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += (
                        gr * wij[None, :, :, None, None]
                    ).sum(axis=2)
        else:
            mo = cout // groups
            for gi in range(groups):
                gg = g2[:, gi * mo : (gi + 1) * mo]
                xpg = xp[:, gi * cin_g : (gi + 1) * cin_g]
                for i in range(kh):
                    for j in range(kw):
                        xs = xpg[:, :, i : i + s * oh : s, j : j + s * ow : s].reshape(
                            n, cin_g, oh * ow
                        )
                        gw[gi * mo : (gi + 1) * mo, :, i, j] = np.matmul(
                            gg, xs.transpose(0, 2, 1)
                        ).sum(axis=0)
                        gxp[
                            :, gi * cin_g : (gi + 1) * cin_g,
                            i : i + s * oh : s, j : j + s * ow : s,
                        ] += np.matmul(wd[gi * mo : (gi + 1) * mo, :, i, j].T, gg).reshape(
                            n, cin_g, oh, ow
                        )
        gx = gxp[:, :, padding : padding + h, padding : padding + ww_] if padding else gxp
        return gx, gw, gb

    return tape.add(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# normalization


def _norm_check(gain, bias, c, eps):
    if eps <= 0:
        raise ShapeError(f"normalization eps must be > 0, got {eps}")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"normalization gain/bias must have shape ({c},), got {gain.shape}/{bias.shape}"
        )


def batch_norm(x, gain, bias, running_mean, running_var, eps=1e-5, momentum=0.1,
               training=True):
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and updates the running arrays in
    place with an exponential moving average; eval mode normalizes by the
    running statistics.  Variance is the biased (population) estimate.
    """
    n, c, h, w = x.shape
    _norm_check(gain.value.data if isinstance(gain, Param) else gain.data,
                bias.value.data if isinstance(bias, Param) else bias.data, c, eps)
    gt = gain.value if isinstance(gain, Param) else gain
    bt = bias.value if isinstance(bias, Param) else bias
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gt.data[None, :, None, None] * xhat + bt.data[None, :, None, None]
    out = Tensor(y.astype(xd.dtype, copy=False))
    tape = _tape_for(x, gt, bt)
    if tape is None:
        return out
    m = n * h * w
    gd = gt.data

    def bwd(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            # statistics depend on x: project out mean and xhat components
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx.astype(xd.dtype, copy=False), ggain, gbias

    return tape.add(out, (x, gt, bt), bwd)


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize over the channel axis at every (n, h, w) position."""
    n, c, h, w = x.shape
    gt = gain.value if isinstance(gain, Param) else gain
    bt = bias.value if isinstance(bias, Param) else bias
    _norm_check(gt.data, bt.data, c, eps)
    xd = x.data
    mean = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    y = gt.data[None, :, None, None] * xhat + bt.data[None, :, None, None]
    out = Tensor(y.astype(xd.dtype, copy=False))
    tape = _tape_for(x, gt, bt)
    if tape is None:
        return out
    gd = gt.data

    def bwd(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        mean_g = gxhat.mean(axis=1, keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        return gx.astype(xd.dtype, copy=False), ggain, gbias

    return tape.add(out, (x, gt, bt), bwd)


def normalize(x, kind, gain, bias, eps=1e-5, state=None, training=True):
    """Dispatch helper covering both normalization kinds behind one surface."""
    if kind == "batch":
        if state is None:
            raise ShapeError("batch normalization needs running-statistics state")
        rm, rv = state
        return batch_norm(x, gain, bias, rm, rv, eps=eps, training=training)
    if kind == "layer":
        return layer_norm(x, gain, bias, eps=eps)
    raise ShapeError(f"unknown normalization kind {kind!r}")


def conv_weight_init(rng, shape):
    """He-style normal init for a (Cout, Cin_g, kH, kW) convolution weight."""
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(fn, wrt, n_probes=20, eps=1e-6, tol=1e-4, rng=None):
    """Central finite-difference check of reverse-mode gradients.

    fn() is evaluated under a fresh tape and must return a scalar Tensor
    built from the float64 tensors in `wrt`.  Returns the worst relative
    error over `n_probes` randomly chosen coordinates per tensor; raises
    AssertionError when it exceeds `tol`.  The error denominator is floored
    at 1e-3 so near-zero coordinates are held to a 1e-7 absolute bound
    instead of the difference-quotient noise floor.
    """
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ShapeError("gradcheck requires float64 tensors")
        t.requires_grad = True

    with Tape() as tape:
        loss = fn()
        backward(loss)
        analytic = [np.array(tape.grad_of(t)) if tape.grad_of(t) is not None
                    else np.zeros_like(t.data) for t in wrt]

    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        n_coords = min(n_probes, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = fn().item()
            flat[idx] = orig - eps
            fm = fn().item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = ga.reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            worst = max(worst, err)
            if err > tol:
                raise AssertionError(
                    f"gradient mismatch at coord {idx}: analytic {a:.8g}, "
                    f"numeric {numeric:.8g}, rel err {err:.3g}"
                )
    return worst
