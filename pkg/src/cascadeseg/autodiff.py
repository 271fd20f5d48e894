"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Everything downstream (heads, losses, Hessian probes) builds on this module.
The primitive set is deliberately small so that every backward rule can be
checked against central finite differences.
"""

import numpy as np
from dataclasses import dataclass, field
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class Tape:
    """Ordered record of one forward pass; node inputs always precede the node."""

    def __init__(self):
        self.nodes = []

    def add(self, node):
        node._idx = len(self.nodes)
        self.nodes.append(node)

    def release(self):
        """Drop the recorded graph so its buffers free immediately by refcount.

        tape.nodes and Tensor.tape reference each other, so an abandoned graph
        only frees on a cyclic-gc pass; loops that build one large graph per
        step would otherwise accumulate gigabytes between passes. Node .data
        and .grad survive a release."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
            node.forward_fn = None
            node.tape = None
        self.nodes = []

    def replay(self):
        """Recompute every non-leaf node from its parents; returns True when the
        recomputed values are bit-identical to the recorded ones."""
        for node in self.nodes:
            if node.forward_fn is None:
                continue
            fresh = node.forward_fn(*[p.data for p in node.parents])
            if not np.array_equal(fresh, node.data):
                return False
        return True


class Tensor:
    """A node in the computation graph. Leaves carry parameters or constants."""

    __slots__ = ("data", "tape", "parents", "backward_fn", "forward_fn",
                 "requires_grad", "grad", "name", "_idx")

    # defer to the reflected dunder ops when mixed with raw ndarrays
    __array_ufunc__ = None

    def __init__(self, data, tape=None, parents=(), backward_fn=None,
                 forward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._idx = None
        if tape is not None:
            tape.add(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # convenience arithmetic; raw ndarrays/scalars are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.tape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.tape))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.tape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.tape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.tape), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.tape))

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(data, tape, name=None, requires_grad=True):
    """Create a leaf node (parameter or input) on the given tape."""
    return Tensor(data, tape=tape, requires_grad=requires_grad, name=name)


def release(output):
    """Free the graph that produced `output` (see Tape.release)."""
    if output.tape is not None:
        output.tape.release()


def _as_tensor(value, tape):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, tape=tape, requires_grad=False)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _tape_of(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _node(out_data, parents, backward_fn, forward_fn=None, name=None):
    return Tensor(out_data, tape=_tape_of(*parents), parents=parents,
                  backward_fn=backward_fn, forward_fn=forward_fn, name=name)


# ---------------------------------------------------------------------------
# elementwise primitives


def _coerce(a, b):
    """Allow raw ndarrays/scalars as constant operands of binary primitives."""
    if not isinstance(a, Tensor):
        a = _as_tensor(a, _tape_of(b))
    if not isinstance(b, Tensor):
        b = _as_tensor(b, _tape_of(a))
    return a, b


def add(a, b, name=None):
    a, b = _coerce(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw, forward_fn=lambda x, y: x + y, name=name)


def sub(a, b, name=None):
    a, b = _coerce(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), bw, forward_fn=lambda x, y: x - y, name=name)


def mul(a, b, name=None):
    a, b = _coerce(a, b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw, forward_fn=lambda x, y: x * y, name=name)


def div(a, b, name=None):
    a, b = _coerce(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), bw, forward_fn=lambda x, y: x / y, name=name)


def pow_const(a, p, name=None):
    """Elementwise a**p for a constant exponent p."""
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), bw, forward_fn=lambda x: x ** p, name=name)


def clip(a, lo, hi, name=None):
    """Clamp values into [lo, hi]; gradient is zero outside the open interval."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * inside,)

    return _node(out, (a,), bw, forward_fn=lambda x: np.clip(x, lo, hi), name=name)


def relu(a, name=None):
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return _node(out, (a,), bw, forward_fn=lambda x: np.maximum(x, 0.0), name=name)


def sigmoid(a, name=None):
    out = sigmoid_raw(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bw, forward_fn=sigmoid_raw, name=name)


def sigmoid_raw(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log(a, name=None):
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _node(out, (a,), bw, forward_fn=np.log, name=name)


def softmax(a, axis=-1, name=None):
    out = softmax_raw(a.data, axis)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _node(out, (a,), bw, forward_fn=lambda x: softmax_raw(x, axis),
                 name=name)


def softmax_raw(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(a, axis=None, keepdims=False, name=None):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), bw,
                 forward_fn=lambda x: x.sum(axis=axis, keepdims=keepdims),
                 name=name)


def tmean(a, axis=None, keepdims=False, name=None):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else out.size and a.data.size // out.size
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _node(out, (a,), bw,
                 forward_fn=lambda x: x.mean(axis=axis, keepdims=keepdims),
                 name=name)


def reshape(a, shape, name=None):
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), bw, forward_fn=lambda x: x.reshape(shape), name=name)


def concat(tensors, axis=0, name=None):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _node(out, tuple(tensors), bw,
                 forward_fn=lambda *xs: np.concatenate(xs, axis=axis), name=name)


def matmul(a, b, name=None):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ "
                         f"{b.data.shape} (node {name!r})")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ "
                         f"{b.data.shape} (node {name!r})")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bw, forward_fn=lambda x, y: x @ y, name=name)


# ---------------------------------------------------------------------------
# spatial primitives


def _dilated_windows(x, k, dilation):
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eff = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (eff, eff), axis=(2, 3))
    return win[..., ::dilation, ::dilation]  # (B, C, H, W, k, k)


def conv2d_raw(x, w, b=None, dilation=1):
    """Stride-1 zero-padded (same-size) 2-D convolution on raw arrays."""
    k = w.shape[2]
    win = _dilated_windows(x, k, dilation)
    out = np.einsum("bchwuv,ocuv->bohw", win, w, optimize=True)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return out


def conv2d(x, w, b=None, dilation=1, name=None):
    """2-D convolution, stride 1, zero padding to preserve spatial size.

    x: (B, Cin, H, W); w: (Cout, Cin, k, k) with odd k; b: (Cout,) or None.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.data.shape} "
                         f"and {w.data.shape} (node {name!r})")
    B, C, H, W = x.data.shape
    O, C2, kh, kw = w.data.shape
    if C != C2 or kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d weight {w.data.shape} incompatible with input "
                         f"{x.data.shape}; odd square kernels only (node {name!r})")
    k = kh
    win = _dilated_windows(x.data, k, dilation)
    out = np.einsum("bchwuv,ocuv->bohw", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        dw = np.einsum("bchwuv,bohw->ocuv", win, g, optimize=True)
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gwin = _dilated_windows(g, k, dilation)
        dx = np.einsum("bohwuv,couv->bchw", gwin, wflip, optimize=True)
        if b is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    if b is None:
        fwd = lambda xd, wd: conv2d_raw(xd, wd, None, dilation)
    else:
        fwd = lambda xd, wd, bd: conv2d_raw(xd, wd, bd, dilation)
    return _node(out, parents, bw, forward_fn=fwd, name=name)


def _bilinear_matrix(n_out, n_in):
    """Dense interpolation matrix for half-pixel-aligned bilinear resampling."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[o, i0] += 1.0 - w
        m[o, i1] += w
    return m


def upsample_bilinear(x, factor, name=None):
    """Bilinear upsampling of a (B, C, H, W) tensor by an integer factor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got {x.data.shape} "
                         f"(node {name!r})")
    B, C, H, W = x.data.shape
    ry = _bilinear_matrix(H * factor, H)
    rx = _bilinear_matrix(W * factor, W)
    out = np.einsum("ij,bcjk,lk->bcil", ry, x.data, rx, optimize=True)

    def bw(g):
        return (np.einsum("ij,bcik,kl->bcjl", ry, g, rx, optimize=True),)

    return _node(out, (x,), bw,
                 forward_fn=lambda xd: np.einsum("ij,bcjk,lk->bcil", ry, xd, rx,
                                                 optimize=True),
                 name=name)


# ---------------------------------------------------------------------------
# backward pass


def backward(output, seed=None):
    """Propagate gradients from a tape output back to every node that requires
    them. Leaves that never appear on the tape keep grad = None (i.e. zero)."""
    if output.tape is None:
        raise AutodiffError("output is not attached to a tape")
    if seed is None:
        if output.data.size != 1:
            raise AutodiffError("non-scalar output requires an explicit seed")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.data.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape "
                         f"{output.data.shape}")
    nodes = output.tape.nodes
    grads = [None] * len(nodes)
    grads[output._idx] = seed
    for i in range(output._idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads[parent._idx] is None:
                grads[parent._idx] = pg
            else:
                grads[parent._idx] = grads[parent._idx] + pg


def grad_or_zero(t):
    """Gradient of a leaf, or an exact zero array when it is off-tape."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_gradient(loss_fn, theta, step=1e-5):
    """Central-difference gradient of a scalar loss over a flat vector."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        probe = theta.copy()
        probe[i] = theta[i] + step
        hi = loss_fn(probe)
        probe[i] = theta[i] - step
        lo = loss_fn(probe)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise AutodiffError(f"non-finite loss at finite-difference probe of "
                                f"coordinate {i}")
        g[i] = (hi - lo) / (2.0 * step)
    return g


# ---------------------------------------------------------------------------
# first-order optimizers


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam state over a flat parameter vector.

    ``momentum`` doubles as Adam's beta1.
    """
    kind: str = "sgd-momentum"
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def step(opt, theta, grad, frozen_mask=None):
    """One optimizer step. Frozen coordinates are returned bit-identical."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ShapeError(f"parameter/gradient length mismatch: {theta.shape} vs "
                         f"{grad.shape}")
    if frozen_mask is None:
        frozen_mask = np.zeros(theta.shape, dtype=bool)
    frozen_mask = np.asarray(frozen_mask, dtype=bool)
    if frozen_mask.shape != theta.shape:
        raise ShapeError(f"parameter/mask length mismatch: {theta.shape} vs "
                         f"{frozen_mask.shape}")

    live = ~frozen_mask
    g = np.where(live, grad, 0.0)
    if opt.weight_decay:
        g = g + np.where(live, opt.weight_decay * theta, 0.0)

    new = theta.copy()
    if opt.kind == "sgd-momentum":
        if opt.m is None:
            opt.m = np.zeros_like(theta)
        opt.m = opt.momentum * opt.m + g
        new[live] = theta[live] - opt.lr * opt.m[live]
    else:
        if opt.m is None:
            opt.m = np.zeros_like(theta)
            opt.v = np.zeros_like(theta)
        opt.t += 1
        b1, b2 = opt.momentum, opt.beta2
        opt.m = b1 * opt.m + (1 - b1) * g
        opt.v = b2 * opt.v + (1 - b2) * g * g
        mhat = opt.m / (1 - b1 ** opt.t)
        vhat = opt.v / (1 - b2 ** opt.t)
        upd = opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
        new[live] = theta[live] - upd[live]
    return new
