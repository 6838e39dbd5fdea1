"""Dense tensor arithmetic with reverse-mode differentiation.

A deliberately small tape-based engine: only the operations the
segmentation networks need (2D/3D convolution, transposed convolution,
average pooling, relu/sigmoid/softmax, elementwise add/mul and full
reductions), plus the SGD-with-Nesterov-momentum optimizer used for
training. Everything runs on numpy arrays; convolutions are lowered to
a single GEMM per call so single-core throughput stays BLAS-bound.

Conventions:
  * tensors are float32 or float64 and keep their dtype through ops;
  * forward outputs are validated to be finite (NumericError otherwise);
  * spatial ops accept either the documented unbatched layout
    (``[C, ...]``) or the same layout with one leading batch axis.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """A dense n-dimensional array plus the tape hooks for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every reachable parameter."""
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()

    # -- operator sugar (same-shape or scalar operands only) ------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        return div(self, other)

    def sum(self):
        return tensor_sum(self)


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    tracked = [p for p in parents if p.requires_grad]
    if tracked:
        out.requires_grad = True
        out._parents = tuple(tracked)
        out._backward = backward
    return out


def _is_scalar(x):
    return isinstance(x, numbers.Number) or (isinstance(x, Tensor) and x.ndim == 0)


def _binary_shapes(a, b, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad, tensor):
    # scalar operand of an elementwise op: sum the broadcast gradient back down
    if tensor.ndim == 0 and np.ndim(grad) != 0:
        return np.sum(grad, dtype=grad.dtype)
    return grad


# -- elementwise arithmetic ---------------------------------------------------
# Python-number operands stay raw scalars so float32 graphs are not promoted.

def add(a, b):
    if isinstance(b, numbers.Number):
        a = _wrap(a)
        data = a.data + b

        def backward(grad):
            a._accumulate(grad)

        return _result(data, (a,), backward, "add")
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    data = a.data + b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_reduce_to(grad, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(grad, b))

    return _result(data, (a, b), backward, "add")


def mul(a, b):
    if isinstance(b, numbers.Number):
        a = _wrap(a)
        data = a.data * b

        def backward(grad):
            a._accumulate(grad * b)

        return _result(data, (a,), backward, "mul")
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_reduce_to(grad * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(grad * a.data, b))

    return _result(data, (a, b), backward, "mul")


def div(a, b):
    if isinstance(b, numbers.Number):
        return mul(a, 1.0 / b)
    a, b = _wrap(a), _wrap(b)
    if not _is_scalar(b):
        _binary_shapes(a, b, "div")
    data = a.data / b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_reduce_to(grad / b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-grad * a.data / (b.data * b.data), b))

    return _result(data, (a, b), backward, "div")


def tensor_sum(x):
    """Full reduction to a 0-d tensor."""
    x = _wrap(x)
    data = np.sum(x.data)

    def backward(grad):
        x._accumulate(np.broadcast_to(grad, x.shape).astype(x.dtype, copy=False))

    return _result(data, (x,), backward, "sum")


def reshape(x, shape):
    x = _wrap(x)
    data = x.data.reshape(shape)

    def backward(grad):
        x._accumulate(grad.reshape(x.shape))

    return _result(data, (x,), backward, "reshape")


def stack_pair(a, b):
    """Stack two equally shaped tensors along a new axis before the last two."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError(f"stack_pair: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise DimensionError("stack_pair: operands need at least two axes")
    axis = a.ndim - 2
    data = np.stack((a.data, b.data), axis=axis)

    def backward(grad):
        ga, gb = np.moveaxis(grad, axis, 0)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _result(data, (a, b), backward, "stack_pair")


def split_pair(x, axis=0):
    """Inverse of a 2-way stack: return the two slabs along ``axis``."""
    x = _wrap(x)
    if x.shape[axis] != 2:
        raise DimensionError(f"split_pair: axis {axis} has extent {x.shape[axis]}, expected 2")
    slab_a = np.ascontiguousarray(np.take(x.data, 0, axis=axis))
    slab_b = np.ascontiguousarray(np.take(x.data, 1, axis=axis))

    def backward_a(grad):
        full = np.zeros_like(x.data)
        np.moveaxis(full, axis, 0)[0] = grad
        x._accumulate(full)

    def backward_b(grad):
        full = np.zeros_like(x.data)
        np.moveaxis(full, axis, 0)[1] = grad
        x._accumulate(full)

    out_a = _result(slab_a, (x,), backward_a, "split_pair")
    out_b = _result(slab_b, (x,), backward_b, "split_pair")
    return out_a, out_b


# -- activations ---------------------------------------------------------------

def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    x = _wrap(x)
    data = np.maximum(x.data, 0)

    def backward(grad):
        x._accumulate(grad * (x.data > 0))

    return _result(data, (x,), backward, "relu")


def sigmoid(x):
    """Numerically stable logistic function."""
    x = _wrap(x)
    v = x.data
    data = np.empty_like(v)
    pos = v >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    data[~pos] = ev / (1.0 + ev)

    def backward(grad):
        x._accumulate(grad * data * (1.0 - data))

    return _result(data, (x,), backward, "sigmoid")


def softmax_channels(x):
    """Softmax over a leading 2-channel axis, stabilized by max subtraction."""
    x = _wrap(x)
    if x.ndim < 1 or x.shape[0] != 2:
        raise DimensionError(f"softmax_channels: expected 2 leading channels, got shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=0, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=0, keepdims=True)

    def backward(grad):
        dot = np.sum(grad * data, axis=0, keepdims=True)
        x._accumulate(data * (grad - dot))

    return _result(data, (x,), backward, "softmax_channels")


# -- convolution family ---------------------------------------------------------

def _batched(data, unbatched_ndim):
    if data.ndim == unbatched_ndim:
        return data[None], True
    if data.ndim == unbatched_ndim + 1:
        return data, False
    raise DimensionError(
        f"expected {unbatched_ndim} or {unbatched_ndim + 1} axes, got shape {data.shape}"
    )


def _conv_pad(kernel_spatial, supported, op):
    if kernel_spatial not in supported:
        raise ConfigError(f"{op}: unsupported kernel shape {kernel_spatial}")
    return supported[kernel_spatial]


def _corr_nd(x, k, pad):
    """Cross-correlate x [N,C,*S] with k [F,C,*K]; stride 1, symmetric zero pad."""
    spatial = x.ndim - 2
    if any(p > 0 for p in pad):
        width = ((0, 0), (0, 0)) + tuple((p, p) for p in pad)
        x = np.pad(x, width)
    win = sliding_window_view(x, k.shape[2:], axis=tuple(range(2, 2 + spatial)))
    # win: [N, C, *out_spatial, *kernel_spatial] -> columns [N*prod(out), C*prod(k)]
    n = win.shape[0]
    out_spatial = win.shape[2:2 + spatial]
    perm = (0,) + tuple(range(2, 2 + spatial)) + (1,) + tuple(range(2 + spatial, win.ndim))
    cols = win.transpose(perm).reshape(n * int(np.prod(out_spatial)), -1)
    out = cols @ k.reshape(k.shape[0], -1).T
    out = out.reshape((n,) + out_spatial + (k.shape[0],))
    return np.moveaxis(out, -1, 1)


def _corr_nd_weight_grad(x, grad, kernel_spatial, pad):
    """d(out)/d(kernel): correlate padded x with the output gradient."""
    spatial = x.ndim - 2
    if any(p > 0 for p in pad):
        width = ((0, 0), (0, 0)) + tuple((p, p) for p in pad)
        x = np.pad(x, width)
    win = sliding_window_view(x, kernel_spatial, axis=tuple(range(2, 2 + spatial)))
    axes = (0,) + tuple(range(2, 2 + spatial))
    return np.tensordot(grad, win, axes=(axes, axes))


def _conv_nd(x_t, k_t, b_t, supported, op, unbatched_ndim):
    x_data, squeeze = _batched(x_t.data, unbatched_ndim)
    k = k_t.data
    if k.ndim != unbatched_ndim + 1:
        raise DimensionError(f"{op}: kernel must have {unbatched_ndim + 1} axes, got {k.shape}")
    if x_data.shape[1] != k.shape[1]:
        raise DimensionError(
            f"{op}: input channels {x_data.shape[1]} != kernel channels {k.shape[1]}"
        )
    if b_t.data.shape != (k.shape[0],):
        raise DimensionError(f"{op}: bias shape {b_t.data.shape} != ({k.shape[0]},)")
    pad = _conv_pad(k.shape[2:], supported, op)
    spatial = unbatched_ndim - 1
    if any(x_data.shape[2 + i] + 2 * pad[i] < k.shape[2 + i] for i in range(spatial)):
        raise DimensionError(f"{op}: input {x_data.shape} smaller than kernel {k.shape}")

    out = _corr_nd(x_data, k, pad)
    out += b_t.data.reshape((1, -1) + (1,) * spatial)

    def backward(grad):
        g = grad if not squeeze else grad[None]
        if b_t.requires_grad:
            b_t._accumulate(g.sum(axis=(0,) + tuple(range(2, 2 + spatial))))
        if k_t.requires_grad:
            k_t._accumulate(_corr_nd_weight_grad(x_data, g, k.shape[2:], pad))
        if x_t.requires_grad:
            # full correlation with the flipped kernel recovers the input grad
            flip = tuple(slice(None, None, -1) for _ in range(spatial))
            k_rot = np.ascontiguousarray(k[(slice(None), slice(None)) + flip].swapaxes(0, 1))
            back_pad = tuple(k.shape[2 + i] - 1 - pad[i] for i in range(spatial))
            gx = _corr_nd(g, k_rot, back_pad)
            x_t._accumulate(gx[0] if squeeze else gx)

    result = _result(out[0] if squeeze else out, (x_t, k_t, b_t), backward, op)
    return result


def conv2d(x, kernels, bias):
    """2D convolution, stride 1. Supports 3x3 kernels (pad 1) and 1x1 (pad 0).

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``kernels`` is ``[F,C,kh,kw]``.
    Output spatial dims equal input spatial dims for both kernel shapes.
    """
    return _conv_nd(_wrap(x), _wrap(kernels), _wrap(bias),
                    {(3, 3): (1, 1), (1, 1): (0, 0)}, "conv2d", 3)


def conv3d(x, kernels, bias):
    """3D convolution, stride 1. Supports 3x3x3 kernels (pad 1) and 2x1x1 (pad 0).

    ``x`` is ``[C,D,H,W]`` or ``[N,C,D,H,W]``; ``kernels`` is ``[F,C,kd,kh,kw]``.
    3x3x3 preserves spatial dims; 2x1x1 shrinks the depth axis by one.
    """
    return _conv_nd(_wrap(x), _wrap(kernels), _wrap(bias),
                    {(3, 3, 3): (1, 1, 1), (2, 1, 1): (0, 0, 0)}, "conv3d", 4)


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = _wrap(x)
    data, squeeze = _batched(x.data, 3)
    n, c, h, w = data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(grad):
        g = grad if not squeeze else grad[None]
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] * 0.25,
            (n, c, h // 2, 2, w // 2, 2),
        ).reshape(n, c, h, w)
        x._accumulate(expanded if not squeeze else expanded[0])

    return _result(out[0] if squeeze else out, (x,), backward, "avg_pool2")


def deconv2(x, kernels, bias):
    """Transposed 2x2 convolution with stride 2: doubles both spatial dims.

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``kernels`` is ``[C_in,C_out,2,2]``.
    Stride equals the kernel size, so each input pixel paints a disjoint
    2x2 output block.
    """
    x_t, k_t, b_t = _wrap(x), _wrap(kernels), _wrap(bias)
    data, squeeze = _batched(x_t.data, 3)
    k = k_t.data
    if k.ndim != 4 or k.shape[2:] != (2, 2):
        raise DimensionError(f"deconv2: kernel must be [C_in,C_out,2,2], got {k.shape}")
    if data.shape[1] != k.shape[0]:
        raise DimensionError(f"deconv2: input channels {data.shape[1]} != kernel {k.shape[0]}")
    if b_t.data.shape != (k.shape[1],):
        raise DimensionError(f"deconv2: bias shape {b_t.data.shape} != ({k.shape[1]},)")
    n, c, h, w = data.shape
    f = k.shape[1]
    t = np.tensordot(data, k, axes=([1], [0]))        # [N,H,W,F,2,2]
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, f, 2 * h, 2 * w)
    out = out + b_t.data.reshape(1, -1, 1, 1)

    def backward(grad):
        g = grad if not squeeze else grad[None]
        gv = g.reshape(n, f, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # [N,H,W,F,2,2]
        if b_t.requires_grad:
            b_t._accumulate(g.sum(axis=(0, 2, 3)))
        if k_t.requires_grad:
            k_t._accumulate(np.tensordot(data, gv, axes=([0, 2, 3], [0, 1, 2])))
        if x_t.requires_grad:
            gx = np.tensordot(gv, k, axes=([3, 4, 5], [1, 2, 3]))    # [N,H,W,C]
            gx = np.moveaxis(gx, -1, 1)
            x_t._accumulate(gx if not squeeze else gx[0])

    return _result(out[0] if squeeze else out, (x_t, k_t, b_t), backward, "deconv2")


# -- parameters and optimizer ----------------------------------------------------

@dataclass
class OptimizerConfig:
    """SGD hyperparameters: Nesterov momentum plus per-epoch learning-rate decay."""

    learning_rate0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_epoch_decay: float = 0.03

    def __post_init__(self):
        if not self.learning_rate0 > 0:
            raise ConfigError(f"learning_rate0 must be positive, got {self.learning_rate0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 <= self.lr_epoch_decay < 1:
            raise ConfigError(f"lr_epoch_decay must be in [0,1), got {self.lr_epoch_decay}")


def learning_rate(config: OptimizerConfig, epoch: int) -> float:
    """Multiplicative schedule: lr0 * (1 - decay)^epoch."""
    return config.learning_rate0 * (1.0 - config.lr_epoch_decay) ** epoch


class Parameter:
    """A named learnable tensor with its momentum buffer."""

    __slots__ = ("name", "value", "velocity")

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.velocity = np.zeros_like(self.value.data)

    @property
    def gradient(self):
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def sgd_nesterov_step(params, config: OptimizerConfig, epoch: int) -> None:
    """Apply one Nesterov-momentum update to every parameter, then zero grads.

    Per parameter: ``g = grad + wd*value``, ``v = mu*v + g``,
    ``value -= lr(epoch) * (g + mu*v)``. If any gradient contains a
    non-finite value the whole step aborts before touching anything.
    """
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    params = list(params)
    for p in params:
        if p.value.grad is not None and not np.all(np.isfinite(p.value.grad)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
    lr = learning_rate(config, epoch)
    mu = config.momentum
    wd = config.weight_decay
    for p in params:
        g = p.gradient
        if wd:
            g = g + wd * p.value.data
        p.velocity = mu * p.velocity + g
        p.value.data -= (lr * (g + mu * p.velocity)).astype(p.value.dtype, copy=False)
        p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    """Weights drawn uniformly on [-sqrt(6/fan_in), +sqrt(6/fan_in)]."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
