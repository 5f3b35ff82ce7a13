# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
# implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Differentiable operations on :py:class:`ewastenet.tensor.Tensor`.

Images are NCHW; kernels are [C_out, C_in, K, K]; linear weights are
[in, out]. Convolutions are cross-correlations.
"""

import numpy as np
from scipy import special

from ewastenet.common import exceptions
from ewastenet.common.i18n import _
from ewastenet.tensor import Function, Tensor


LUMA_WEIGHTS = (0.299, 0.587, 0.114)
"""ITU-R BT.601 luma coefficients for R, G, B."""

PADDING_MODES = ('same', 'valid')
ACTIVATIONS = ('relu', 'gelu', 'sigmoid', 'identity')
POOL_KINDS = ('avg', 'max')
POOL_AXES = ('spatial', 'channel')


def as_tensor(value):
    """Wrap numbers and arrays into a constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value))


def unbroadcast(grad, shape):
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, *shapes):
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise exceptions.ShapeError(
            _('Shapes are not broadcastable for %s') % op, *shapes)


# Elementwise arithmetic


class Add(Function):

    def forward(self, a, b):
        _check_broadcast('add', a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Mul(Function):

    def forward(self, a, b):
        _check_broadcast('mul', a.shape, b.shape)
        self.saved['a'], self.saved['b'] = a, b
        return a * b

    def backward(self, grad):
        a, b = self.saved['a'], self.saved['b']
        return (unbroadcast(grad * b, a.shape),
                unbroadcast(grad * a, b.shape))


class Scale(Function):

    def forward(self, x, factor):
        self.saved['factor'] = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.saved['factor'],)


def add(a, b):
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a, b):
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(x, factor):
    """Multiply by a constant scalar."""
    return Scale.apply(as_tensor(x), factor=float(factor))


class MatMul(Function):

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise exceptions.ShapeError(
                _('Inner dimensions do not match for matmul'),
                a.shape, b.shape)
        self.saved['a'], self.saved['b'] = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved['a'], self.saved['b']
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


def matmul(a, b):
    """Batched matrix product; a 2-D right operand is shared by the batch."""
    return MatMul.apply(as_tensor(a), as_tensor(b))


def linear(x, weight, bias=None):
    """x @ weight + bias with weight stored as [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# Structural operations


class Reshape(Function):

    def forward(self, x, shape):
        try:
            return x.reshape(shape)
        except ValueError:
            raise exceptions.ShapeError(
                _('Cannot reshape'), x.shape, shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):

    def forward(self, x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise exceptions.ShapeError(
                _('Invalid permutation %s') % (axes,), x.shape)
        self.saved['axes'] = axes
        return x.transpose(axes)

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.saved['axes'])),)


class Slice(Function):

    def forward(self, x, index):
        self.saved['index'] = index
        return x[index].copy()

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        out[self.saved['index']] = grad
        return (out,)


class Concat(Function):

    def forward(self, *arrays, axis):
        first = arrays[0].shape
        for arr in arrays[1:]:
            if (arr.ndim != len(first) or
                    any(d1 != d2 for i, (d1, d2) in
                        enumerate(zip(arr.shape, first))
                        if i != axis % len(first))):
                raise exceptions.ShapeError(
                    _('Cannot concatenate along axis %d') % axis,
                    first, arr.shape)
        self.saved['axis'] = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        sizes = [t.shape[self.saved['axis']] for t in self.inputs]
        return tuple(np.split(grad, np.cumsum(sizes)[:-1],
                              axis=self.saved['axis']))


class Sum(Function):

    def forward(self, x, axis, keepdims):
        self.saved['axis'], self.saved['keepdims'] = axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        axis = self.saved['axis']
        if axis is not None and not self.saved['keepdims']:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Expand(Function):

    def forward(self, x, shape):
        _check_broadcast('expand', x.shape, shape)
        return np.broadcast_to(x, shape).copy()

    def backward(self, grad):
        return (unbroadcast(grad, self.inputs[0].shape),)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes):
    return Transpose.apply(x, axes=tuple(axes))


def slice_(x, index):
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 0))``."""
    return Slice.apply(x, index=index)


def concat(tensors, axis):
    if not tensors:
        raise ValueError(_('Nothing to concatenate'))
    return Concat.apply(*tensors, axis=axis)


def sum_(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def expand(x, shape):
    return Expand.apply(x, shape=tuple(shape))


# Convolution


def _conv_geometry(size, kernel, stride, dilation, pad):
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel, dilation=1):
    """Per-side zero padding keeping spatial dims at stride 1."""
    if kernel % 2 != 1:
        raise exceptions.ShapeError(
            _('Same padding requires an odd kernel, got %d') % kernel)
    return (kernel - 1) * dilation // 2


class Conv2d(Function):
    """2-D cross-correlation of NCHW input with an [O, C, K, K] kernel.

    Computed tap by tap as a tensor contraction over input channels, which
    keeps memory at one output-sized buffer per tap.
    """

    def forward(self, x, w, stride, dilation, padding):
        if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise exceptions.ShapeError(
                _('conv2d expects NCHW input and a square kernel'),
                x.shape, w.shape)
        if x.shape[1] != w.shape[1]:
            raise exceptions.ShapeError(
                _('Input channels do not match the kernel'),
                x.shape, w.shape)
        if padding not in PADDING_MODES:
            raise ValueError(_('Unknown padding %s') % padding)
        if stride < 1 or dilation < 1:
            raise ValueError(_('stride and dilation must be positive'))
        k = w.shape[2]
        pad = same_padding(k, dilation) if padding == 'same' else 0
        out_h = _conv_geometry(x.shape[2], k, stride, dilation, pad)
        out_w = _conv_geometry(x.shape[3], k, stride, dilation, pad)
        if out_h < 1 or out_w < 1:
            raise exceptions.ShapeError(
                _('Kernel does not fit into the input'), x.shape, w.shape)

        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((x.shape[0], w.shape[0], out_h, out_w),
                       dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                patch = self._window(xp, i, j, out_h, out_w,
                                     stride, dilation)
                out += np.tensordot(patch, w[:, :, i, j],
                                    axes=([1], [1])).transpose(0, 3, 1, 2)
        self.saved.update(xp=xp, w=w, pad=pad, stride=stride,
                          dilation=dilation)
        return out

    @staticmethod
    def _window(xp, i, j, out_h, out_w, stride, dilation):
        top, left = i * dilation, j * dilation
        return xp[:, :,
                  top:top + stride * (out_h - 1) + 1:stride,
                  left:left + stride * (out_w - 1) + 1:stride]

    def backward(self, grad):
        xp, w = self.saved['xp'], self.saved['w']
        pad, stride = self.saved['pad'], self.saved['stride']
        dilation = self.saved['dilation']
        k = w.shape[2]
        out_h, out_w = grad.shape[2:]
        grad_xp = np.zeros_like(xp, dtype=grad.dtype)
        grad_w = np.zeros_like(w, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                patch = self._window(xp, i, j, out_h, out_w,
                                     stride, dilation)
                grad_w[:, :, i, j] = np.tensordot(
                    grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                window = self._window(grad_xp, i, j, out_h, out_w,
                                      stride, dilation)
                window += np.tensordot(
                    grad, w[:, :, i, j],
                    axes=([1], [0])).transpose(0, 3, 1, 2)
        h, w_ = grad_xp.shape[2] - 2 * pad, grad_xp.shape[3] - 2 * pad
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w_]
        return np.ascontiguousarray(grad_x), grad_w


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding='same'):
    """2-D convolution (cross-correlation) with optional per-channel bias.

    :param x: input [N, C, H, W].
    :param weight: kernel [O, C, K, K].
    :param bias: optional [O].
    :param padding: ``same`` pads (K-1)*dilation/2 zeros per side and needs
        an odd K, ``valid`` does not pad.
    """
    out = Conv2d.apply(x, weight, stride=int(stride),
                       dilation=int(dilation), padding=padding)
    if bias is not None:
        out = add(out, reshape(bias, (1, bias.shape[0], 1, 1)))
    return out


class Pad(Function):
    """Spatial padding of NCHW input, ``edge`` replicates border pixels."""

    def forward(self, x, width, mode):
        if mode not in ('edge', 'constant'):
            raise ValueError(_('Unknown padding mode %s') % mode)
        self.saved['width'], self.saved['mode'] = width, mode
        return np.pad(x, ((0, 0), (0, 0), (width, width), (width, width)),
                      mode=mode)

    def backward(self, grad):
        p = self.saved['width']
        if p == 0:
            return (grad,)
        h, w = self.inputs[0].shape[2:]
        core = grad[:, :, p:p + h, :].copy()
        if self.saved['mode'] == 'edge':
            core[:, :, 0, :] += grad[:, :, :p, :].sum(axis=2)
            core[:, :, -1, :] += grad[:, :, p + h:, :].sum(axis=2)
        out = core[:, :, :, p:p + w].copy()
        if self.saved['mode'] == 'edge':
            out[:, :, :, 0] += core[:, :, :, :p].sum(axis=3)
            out[:, :, :, -1] += core[:, :, :, p + w:].sum(axis=3)
        return (out,)


def pad(x, width, mode='edge'):
    return Pad.apply(x, width=int(width), mode=mode)


# Activations and normalization


class ReLU(Function):

    def forward(self, x):
        self.saved['mask'] = x > 0
        return np.where(self.saved['mask'], x, 0)

    def backward(self, grad):
        return (grad * self.saved['mask'],)


class GELU(Function):
    """Exact Gaussian error linear unit, x * Phi(x)."""

    def forward(self, x):
        self.saved['x'] = x
        return 0.5 * x * (1.0 + special.erf(x / np.sqrt(2.0)))

    def backward(self, grad):
        x = self.saved['x']
        cdf = 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (grad * (cdf + x * pdf),)


class Sigmoid(Function):

    def forward(self, x):
        out = special.expit(x)
        self.saved['out'] = out
        return out

    def backward(self, grad):
        out = self.saved['out']
        return (grad * out * (1.0 - out),)


class Softmax(Function):

    def forward(self, x, axis):
        out = special.softmax(x, axis=axis)
        self.saved['out'], self.saved['axis'] = out, axis
        return out

    def backward(self, grad):
        out, axis = self.saved['out'], self.saved['axis']
        inner = np.sum(grad * out, axis=axis, keepdims=True)
        return (out * (grad - inner),)


def relu(x):
    return ReLU.apply(x)


def gelu(x):
    return GELU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def softmax(x, axis=-1):
    """Numerically stable softmax along axis."""
    return Softmax.apply(x, axis=axis)


def activation(x, kind):
    """Apply an activation by name."""
    if kind == 'relu':
        return relu(x)
    elif kind == 'gelu':
        return gelu(x)
    elif kind == 'sigmoid':
        return sigmoid(x)
    elif kind == 'identity':
        return x
    raise ValueError(_('Unknown activation %(kind)s, expected one of '
                       '%(all)s') % {'kind': kind,
                                     'all': ', '.join(ACTIVATIONS)})


class LayerNorm(Function):

    def forward(self, x, gamma, beta, eps):
        if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
            raise exceptions.ShapeError(
                _('LayerNorm parameters must match the last axis'),
                x.shape, gamma.shape, beta.shape)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        self.saved.update(xhat=xhat, inv_std=inv_std, gamma=gamma)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std = self.saved['xhat'], self.saved['inv_std']
        gamma = self.saved['gamma']
        d = xhat.shape[-1]
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = np.sum(grad * xhat, axis=lead)
        grad_beta = np.sum(grad, axis=lead)
        dxhat = grad * gamma
        grad_x = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
        return grad_x, grad_gamma, grad_beta


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    return LayerNorm.apply(x, gamma, beta, eps=float(eps))


class GlobalPool(Function):
    """Average or max pooling of NCHW input over all of one domain.

    ``spatial`` pooling yields [N, C, 1, 1], ``channel`` pooling yields
    [N, 1, H, W]. Max pooling routes the gradient to the first maximum.
    """

    def forward(self, x, kind, over):
        if x.ndim != 4:
            raise exceptions.ShapeError(
                _('Global pooling expects NCHW input'), x.shape)
        if kind not in POOL_KINDS or over not in POOL_AXES:
            raise ValueError(_('Unknown pooling %(kind)s over %(over)s') %
                             {'kind': kind, 'over': over})
        self.saved['kind'], self.saved['over'] = kind, over
        n, c = x.shape[:2]
        if over == 'spatial':
            if kind == 'avg':
                return x.mean(axis=(2, 3), keepdims=True)
            flat = x.reshape(n, c, -1)
            idx = np.argmax(flat, axis=2)[..., None]
            self.saved['idx'] = idx
            return np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)
        if kind == 'avg':
            return x.mean(axis=1, keepdims=True)
        idx = np.argmax(x, axis=1)[:, None]
        self.saved['idx'] = idx
        return np.take_along_axis(x, idx, axis=1)

    def backward(self, grad):
        shape = self.inputs[0].shape
        kind, over = self.saved['kind'], self.saved['over']
        n, c = shape[:2]
        if over == 'spatial':
            if kind == 'avg':
                hw = shape[2] * shape[3]
                out = np.broadcast_to(grad / hw, shape)
                return (out.copy(),)
            out = np.zeros((n, c, shape[2] * shape[3]), dtype=grad.dtype)
            np.put_along_axis(out, self.saved['idx'], grad.reshape(n, c, 1),
                              axis=2)
            return (out.reshape(shape),)
        if kind == 'avg':
            return (np.broadcast_to(grad / c, shape).copy(),)
        out = np.zeros(shape, dtype=grad.dtype)
        np.put_along_axis(out, self.saved['idx'], grad, axis=1)
        return (out,)


def pool_global(x, kind='avg', over='spatial'):
    return GlobalPool.apply(x, kind=kind, over=over)


class Dropout(Function):

    def forward(self, x, mask):
        self.saved['mask'] = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.saved['mask'],)


def dropout(x, p, training, rng=None):
    """Inverted dropout: zero each value with probability p, scale the rest.

    Returns x itself outside training or when p is 0.

    :param rng: numpy Generator, required in training mode.
    :raises: ValueError if p is outside [0, 1).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(_('Dropout probability must be in [0, 1), got %s')
                         % p)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError(_('Dropout in training mode requires a generator'))
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.data.dtype) / (1.0 - p)
    return Dropout.apply(x, mask=mask)


class CrossEntropy(Function):

    def forward(self, logits, labels):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise exceptions.ShapeError(
                _('cross_entropy expects [N, C] logits and [N] labels'),
                logits.shape, labels.shape)
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ValueError(_('Label out of range [0, %d)') %
                             logits.shape[1])
        rows = np.arange(logits.shape[0])
        lse = special.logsumexp(logits, axis=1)
        self.saved['labels'] = labels
        self.saved['probs'] = np.exp(logits - lse[:, None])
        return np.mean(lse - logits[rows, labels])

    def backward(self, grad):
        probs, labels = self.saved['probs'], self.saved['labels']
        out = probs.copy()
        out[np.arange(len(labels)), labels] -= 1.0
        return (out * (grad / len(labels)),)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Computed from log-sum-exp on the logits, so it stays finite for any
    finite input.
    """
    labels = np.asarray(labels, dtype=np.int64)
    return CrossEntropy.apply(logits, labels=labels)


def luma(x):
    """Convert NCHW RGB to a single luma channel [N, 1, H, W]."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise exceptions.ShapeError(_('luma expects [N, 3, H, W] input'),
                                    x.shape)
    weight = Tensor(np.array(LUMA_WEIGHTS).reshape(1, 3, 1, 1))
    return conv2d(x, weight, padding='valid')
