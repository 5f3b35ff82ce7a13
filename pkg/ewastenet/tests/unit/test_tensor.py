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

import unittest

import numpy as np
from numpy import testing as npt

from ewastenet.common import exceptions
from ewastenet import functional as F
from ewastenet import tensor


class TestTensor(unittest.TestCase):
    def test_coerces_to_float32(self):
        t = tensor.Tensor([[1, 2], [3, 4]])
        self.assertEqual(np.float32, t.dtype)
        self.assertEqual((2, 2), t.shape)
        self.assertIsNone(t.grad)
        self.assertTrue(t.is_leaf)

    def test_precision(self):
        with tensor.precision(np.float64):
            self.assertEqual(np.float64, tensor.Tensor([1.0]).dtype)
        self.assertEqual(np.float32, tensor.Tensor([1.0]).dtype)

    def test_zero_sized_dimension(self):
        self.assertRaises(exceptions.ShapeError, tensor.Tensor,
                          np.zeros((2, 0)))

    def test_zero_grad(self):
        t = tensor.Tensor(np.ones((2, 3)), requires_grad=True)
        t.zero_grad()
        npt.assert_array_equal(np.zeros((2, 3)), t.grad)

    def test_numpy_is_a_copy(self):
        t = tensor.Tensor([1.0, 2.0])
        arr = t.numpy()
        arr[0] = 42
        self.assertEqual(1.0, t.data[0])

    def test_repr(self):
        t = tensor.Tensor([1.0], requires_grad=True, name='w')
        self.assertIn('requires_grad=True', repr(t))
        self.assertIn('name=w', repr(t))


class TestBackward(unittest.TestCase):
    def test_simple_chain(self):
        x = tensor.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = F.sum_(F.scale(x, 3.0))
        loss.backward()
        npt.assert_allclose([3.0, 3.0, 3.0], x.grad)

    def test_shared_node(self):
        x = tensor.Tensor([1.0, -2.0], requires_grad=True)
        loss = F.sum_(x * x)
        tensor.backward(loss)
        npt.assert_allclose([2.0, -4.0], x.grad)

    def test_diamond(self):
        x = tensor.Tensor([2.0], requires_grad=True)
        y = F.scale(x, 2.0)
        loss = F.sum_(y * y + y)
        tensor.backward(loss)
        # d/dx (4x^2 + 2x) = 8x + 2
        npt.assert_allclose([18.0], x.grad)

    def test_accumulates(self):
        x = tensor.Tensor([1.0], requires_grad=True)
        tensor.backward(F.sum_(F.scale(x, 2.0)))
        tensor.backward(F.sum_(F.scale(x, 2.0)))
        npt.assert_allclose([4.0], x.grad)
        x.zero_grad()
        tensor.backward(F.sum_(F.scale(x, 2.0)))
        npt.assert_allclose([2.0], x.grad)

    def test_non_scalar(self):
        x = tensor.Tensor([1.0, 2.0], requires_grad=True)
        self.assertRaises(exceptions.ShapeError, tensor.backward,
                          F.scale(x, 2.0))

    def test_no_graph(self):
        x = tensor.Tensor([1.0])
        self.assertRaises(ValueError, tensor.backward, F.sum_(x))

    def test_constants_get_no_grad(self):
        x = tensor.Tensor([1.0, 2.0], requires_grad=True)
        c = tensor.Tensor([5.0, 6.0])
        tensor.backward(F.sum_(x * c))
        npt.assert_allclose([5.0, 6.0], x.grad)
        self.assertIsNone(c.grad)

    def test_deep_chain_is_not_recursive(self):
        x = tensor.Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = F.scale(y, 1.0)
        tensor.backward(F.sum_(y))
        npt.assert_allclose([1.0], x.grad)


class TestNoGrad(unittest.TestCase):
    def test_not_recorded(self):
        x = tensor.Tensor([1.0], requires_grad=True)
        with tensor.no_grad():
            self.assertFalse(tensor.is_grad_enabled())
            y = F.scale(x, 2.0)
        self.assertTrue(tensor.is_grad_enabled())
        self.assertIsNone(y.creator)
        self.assertFalse(y.requires_grad)

    def test_restored_on_error(self):
        try:
            with tensor.no_grad():
                raise RuntimeError()
        except RuntimeError:
            pass
        self.assertTrue(tensor.is_grad_enabled())
