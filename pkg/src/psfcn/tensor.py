"""Dense NCHW float32 tensors with tape-based reverse-mode differentiation.

Tensors are immutable values. Operations called while a :class:`Tape` is
active record a node (operands, output, backward rule) whenever any operand
requires a gradient; :func:`backward` then walks the tape in reverse.

    >>> x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tensor_sum(mul(x, x))
    >>> backward(tape, loss)[x].shape
    (1, 1, 2, 2)
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError, ValidationError

DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        self._init(arr, requires_grad, name)

    def _init(self, arr, requires_grad, name):
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most 4-D, got {arr.ndim}-D")
        if arr.ndim < 4:
            arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
        if arr.size == 0:
            raise ShapeError(f"all shape components must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False, name=None):
        t = cls.__new__(cls)
        t._init(np.asarray(arr, dtype=DTYPE), requires_grad, name)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: object  # callable(grad) -> sequence of ndarray | None, one per input


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    _produced: set = field(default_factory=set, repr=False)

    def record(self, output, inputs, backward_fn):
        self.nodes.append(Node(tuple(inputs), output, backward_fn))
        self._produced.add(id(output))

    def __contains__(self, tensor):
        return id(tensor) in self._produced

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False


_TAPES = []


_BRANCH_RECORDERS = []


class BranchRecorder:
    """Collects the branch pattern of piecewise ops (leaky ReLU signs, max-fusion
    argmax) evaluated while active. Two evaluations with equal signatures lie on
    the same linear piece, which finite-difference checks rely on."""

    def __init__(self):
        self.patterns = []

    def __enter__(self):
        _BRANCH_RECORDERS.append(self)
        return self

    def __exit__(self, *exc):
        _BRANCH_RECORDERS.remove(self)
        return False

    def signature(self):
        return b"".join(np.ascontiguousarray(p).tobytes() for p in self.patterns)


def _record_branch(pattern):
    if _BRANCH_RECORDERS:
        _BRANCH_RECORDERS[-1].patterns.append(pattern)


def active_tape():
    return _TAPES[-1] if _TAPES else None


class GradMap:
    """Gradients keyed by tensor identity."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        return self._grads[id(tensor)]

    def get(self, tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        for key, g in self._grads.items():
            yield self._tensors[key], g


def backward(tape, loss):
    """Accumulate d(loss)/d(t) for every tensor on the tape that requires it."""
    if loss.size != 1:
        raise ShapeError(f"loss must have exactly one element, got shape {loss.shape}")
    if loss not in tape:
        raise ValidationError("loss tensor was not produced on this tape")
    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    tensors = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE).reshape(inp.shape)
                tensors[key] = inp
    return GradMap(grads, tensors)


def _make(out, inputs, backward_fn):
    tape = active_tape()
    record = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=record)
    if record:
        tape.record(result, inputs, backward_fn)
    return result


def _same_shape(a, b, what):
    if a.shape != b.shape:
        dims = {n: (x, y) for n, x, y in zip("NCHW", a.shape, b.shape) if x != y}
        raise ShapeError(f"{what}: operand shapes differ", dims)


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b):
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, s):
    s = DTYPE(s)
    return _make(x.data * s, (x,), lambda g: (g * s,))


def tensor_sum(x, offset=0.0):
    """Sum of all elements. ``offset`` is subtracted inside the float64
    accumulator before rounding, which lets finite-difference probes resolve
    changes far below float32 spacing at the loss magnitude."""
    total = np.array(x.data.sum(dtype=np.float64) - offset, dtype=DTYPE).reshape(1, 1, 1, 1)
    return _make(total, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=DTYPE),))


def tensor_mean(x, offset=0.0):
    n = x.size
    total = np.array(x.data.sum(dtype=np.float64) / n - offset, dtype=DTYPE).reshape(1, 1, 1, 1)
    return _make(total, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0] / n, dtype=DTYPE),))


def leaky_relu(x, slope=0.1):
    if not 0.0 <= slope < 1.0:
        raise ValidationError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    slope = DTYPE(slope)
    pos = x.data >= 0
    _record_branch(pos)
    out = np.where(pos, x.data, x.data * slope)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def concat_channels(tensors):
    tensors = list(tensors)
    if not tensors:
        raise ValidationError("concat_channels requires at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError("concat_channels: N/H/W must agree", {"NHW": (ref, t.shape)})
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def back(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors))]

    return _make(out, tensors, back)


def l2_normalize_channels(x, eps=1e-12):
    """Scale every per-pixel 3-vector to unit length; x / max(|x|, eps)."""
    if x.shape[1] != 3:
        raise ShapeError("l2_normalize_channels expects 3 channels", {"C": (x.shape[1], 3)})
    norm = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = (x.data / denom).astype(DTYPE)

    def back(g):
        proj = np.sum(g.astype(np.float64) * y, axis=1, keepdims=True)
        gx = np.where(norm > eps, (g - y * proj) / denom, g / eps)
        return (gx.astype(DTYPE),)

    return _make(y, (x,), back)


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------

def _check_fusion_inputs(features):
    features = list(features)
    if not features:
        raise ValidationError("fusion requires >= 1 feature map")
    for f in features[1:]:
        _same_shape(features[0], f, "fusion")
    return features


def max_fuse(features):
    """Elementwise max over a list of equally shaped tensors.

    Returns ``(fused, argmax)``; ties resolve to the lowest list index and
    the backward pass routes each gradient element to that source only.
    """
    features = _check_fusion_inputs(features)
    stack = np.stack([f.data for f in features])
    argmax = np.argmax(stack, axis=0)
    _record_branch(argmax)
    out = np.take_along_axis(stack, argmax[None], axis=0)[0]

    def back(g):
        return [np.where(argmax == i, g, DTYPE(0)) for i in range(len(features))]

    return _make(out, features, back), argmax


def avg_fuse(features):
    """Elementwise mean; accumulated in float64 so the result does not depend on order."""
    features = _check_fusion_inputs(features)
    q = len(features)
    acc = np.zeros(features[0].shape, dtype=np.float64)
    for f in features:
        acc += f.data
    out = (acc / q).astype(DTYPE)
    return _make(out, features, lambda g: [g / DTYPE(q)] * q)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_bias(bias, cout, op):
    if bias is None:
        return None
    if bias.size != cout:
        raise ShapeError(f"{op}: bias length must equal output channels", {"Cout": (bias.size, cout)})
    return bias.data.reshape(1, cout, 1, 1)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,k,k)."""
    if stride < 1 or pad < 0:
        raise ValidationError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError("conv2d: input channels do not match kernel", {"Cin": (cin, wcin)})
    if k != k2:
        raise ShapeError("conv2d: kernel must be square", {"k": (k, k2)})
    ho, wo = kernels.conv_out_size(h, k, stride, pad), kernels.conv_out_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input", {"H": (h + 2 * pad, k), "W": (w + 2 * pad, k)})
    b = _check_bias(bias, cout, "conv2d")

    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b

    def back(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = kernels.col2im(wmat.T @ gm, x.shape, k, stride, pad) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(bias.shape) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, back)


def deconv2d(x, weight, bias=None, stride=1, pad=0):
    """Transposed convolution; ``weight`` is (Cin,Cout,k,k) as in conv2d's adjoint.

    Output size is (H-1)*stride - 2*pad + k, so that conv2d with the same
    kernel, stride and pad maps the output back to the input's spatial size.
    """
    if stride < 1 or pad < 0:
        raise ValidationError(f"deconv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError("deconv2d: input channels do not match kernel", {"Cin": (cin, wcin)})
    if k != k2:
        raise ShapeError("deconv2d: kernel must be square", {"k": (k, k2)})
    ho, wo = (h - 1) * stride - 2 * pad + k, (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError("deconv2d: padding removes the whole output", {"H": (ho, 1), "W": (wo, 1)})
    b = _check_bias(bias, cout, "deconv2d")

    wmat = weight.data.reshape(cin, -1)
    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    out = kernels.col2im(wmat.T @ xm, (n, cout, ho, wo), k, stride, pad)
    if b is not None:
        out = out + b

    def back(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), k, stride, pad)
        gx = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        gw = (xm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE).reshape(bias.shape) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, back)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def cosine_loss(pred, target, mask=None, offset=0.0):
    """Mean of (1 - pred . target) over masked-in pixels.

    ``pred`` is an N x 3 x H x W tensor; ``target`` a plain array of the same
    shape; ``mask`` an N x H x W (or N x 1 x H x W) boolean array. ``offset``
    behaves as in :func:`tensor_sum`.
    """
    target = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    if pred.shape[1] != 3:
        raise ShapeError("cosine_loss expects 3-channel normal maps", {"C": (pred.shape[1], 3)})
    if mask is None:
        m = np.ones((pred.shape[0], 1, pred.shape[2], pred.shape[3]), dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool).reshape(pred.shape[0], 1, pred.shape[2], pred.shape[3])
    count = int(m.sum())
    if count == 0:
        raise ValidationError("no valid pixels")
    dots = np.sum(pred.data.astype(np.float64) * target, axis=1, keepdims=True)
    value = np.sum((1.0 - dots)[m]) / count - offset
    out = np.array(value, dtype=DTYPE).reshape(1, 1, 1, 1)

    def back(g):
        return ((-g.reshape(-1)[0] / count) * target * m,)

    return _make(out, (pred,), back)
