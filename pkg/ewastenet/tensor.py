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

"""Dense tensors with reverse-mode automatic differentiation.

A :py:class:`Tensor` wraps a row-major numpy array. Every differentiable
operation is a :py:class:`Function` subclass; applying it records the
function as the creator of its output, which forms an acyclic graph that
:py:func:`backward` walks in reverse topological order.
"""

import contextlib
import logging

import numpy as np

from ewastenet.common import exceptions
from ewastenet.common.i18n import _


LOG = logging.getLogger(__name__)

_STATE = {'dtype': np.float32, 'grad_enabled': True}


@contextlib.contextmanager
def precision(dtype):
    """Coerce tensors created inside the block to dtype.

    The model math runs in float32; the finite-difference checker switches
    to float64.
    """
    previous = _STATE['dtype']
    _STATE['dtype'] = np.dtype(dtype).type
    try:
        yield
    finally:
        _STATE['dtype'] = previous


def default_dtype():
    """Floating type new tensors are coerced to."""
    return _STATE['dtype']


@contextlib.contextmanager
def no_grad():
    """Do not record operations inside the block (inference mode)."""
    previous = _STATE['grad_enabled']
    _STATE['grad_enabled'] = False
    try:
        yield
    finally:
        _STATE['grad_enabled'] = previous


def is_grad_enabled():
    return _STATE['grad_enabled']


class Function(object):
    """A recorded operation, the computation record of the graph.

    Subclasses implement :py:meth:`forward` on numpy arrays and
    :py:meth:`backward`, which receives the gradient with respect to the
    output and returns one gradient per input (``None`` for inputs that are
    not differentiable). Values needed by backward go to ``self.saved``.
    """

    def __init__(self, *inputs):
        self.inputs = inputs
        self.saved = {}

    @property
    def op_kind(self):
        return type(self).__name__

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError()

    def backward(self, grad):
        raise NotImplementedError()

    @classmethod
    def apply(cls, *inputs, **kwargs):
        """Run the operation on tensors and record it if needed."""
        func = cls(*inputs)
        out = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = (_STATE['grad_enabled']
                         and any(t.requires_grad for t in inputs))
        if not requires_grad:
            func.saved.clear()
        return Tensor(out, requires_grad=requires_grad,
                      creator=func if requires_grad else None)


class Tensor(object):
    """An n-dimensional array of floats with an optional gradient slot.

    :ivar data: numpy array, treated as immutable once an operation
        produced it.
    :ivar requires_grad: whether gradients flow to this tensor.
    :ivar grad: accumulated gradient (numpy array of the same shape) or
        None.
    :ivar creator: the :py:class:`Function` that produced this tensor, None
        for leaves.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, creator=None, name=None):
        self.data = np.ascontiguousarray(data, dtype=_STATE['dtype'])
        if any(dim < 1 for dim in self.data.shape):
            raise exceptions.ShapeError(
                _('Tensor dimensions must be positive'), self.data.shape)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.creator = creator
        self.name = name

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

    @property
    def is_leaf(self):
        return self.creator is None

    def numpy(self):
        """Return a copy of the underlying array."""
        return self.data.copy()

    def item(self):
        return self.data.item()

    def zero_grad(self):
        """Reset the accumulated gradient to zeros."""
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self):
        backward(self)

    def _functional(self):
        from ewastenet import functional
        return functional

    def __add__(self, other):
        return self._functional().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        F = self._functional()
        return F.add(self, F.scale(F.as_tensor(other), -1.0))

    def __rsub__(self, other):
        F = self._functional()
        return F.add(F.scale(self, -1.0), other)

    def __mul__(self, other):
        F = self._functional()
        if isinstance(other, (int, float)):
            return F.scale(self, other)
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self._functional().scale(self, -1.0)

    def __matmul__(self, other):
        return self._functional().matmul(self, other)

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s%s%s)' % (
            list(self.shape), self.dtype,
            ', requires_grad=True' if self.requires_grad else '',
            ', name=%s' % self.name if self.name else '')


def _topological_order(root):
    """Return graph nodes reachable from root, parents before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``grad`` of every leaf tensor the scalar loss depends on.

    Gradients accumulate (``+=``) into existing ``grad`` arrays; use
    ``zero_grad`` between steps.

    :param loss: a tensor with exactly one element.
    :raises: ShapeError if loss is not a scalar.
    :raises: ValueError if loss does not depend on any tensor requiring
        gradients.
    """
    if loss.size != 1:
        raise exceptions.ShapeError(
            _('Backward requires a scalar loss'), loss.shape)
    if not loss.requires_grad:
        raise ValueError(
            _('Loss does not depend on any tensor requiring gradients'))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            if node.grad is None:
                node.grad = np.array(grad, dtype=node.data.dtype)
            else:
                node.grad = node.grad + grad
            continue
        parent_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.inputs, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise exceptions.ShapeError(
                    _('Gradient of %s does not match its input') %
                    node.creator.op_kind, parent_grad.shape, parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
