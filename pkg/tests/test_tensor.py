import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustfs import tensor as T
from robustfs.errors import LabelError, ShapeError, ZeroVectorError
from robustfs.tensor import Tensor, grad_check, numerical_grad


def _finite_floats(lo=-5.0, hi=5.0):
    return st.floats(lo, hi, allow_nan=False, allow_infinity=False, width=32)


class TestForward:
    def test_relu(self):
        assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_cross_entropy_uniform(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_cross_entropy_per_sample(self):
        losses = T.softmax_cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 1]), reduction="none")
        assert losses.shape == (2,)
        np.testing.assert_allclose(losses.data, [math.log(2)] * 2, rtol=1e-6)

    def test_l2_normalize_345(self):
        np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-6)

    def test_matmul_and_affine(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        w = Tensor(np.ones((3, 2), dtype=np.float32))
        b = Tensor(np.array([1.0, -1.0], dtype=np.float32))
        np.testing.assert_array_equal(T.affine(x, w, b).data, [[4.0, 2.0], [13.0, 11.0]])
        np.testing.assert_array_equal((x @ w).data, [[3.0, 3.0], [12.0, 12.0]])

    def test_sqrt_clamps_negative(self):
        out = T.sqrt(Tensor([-4.0, 0.0, 9.0]))
        assert out.data.tolist() == [0.0, 0.0, 3.0]

    def test_clamp_and_sign(self):
        assert T.clamp(Tensor([-1.0, 0.5, 2.0]), 0.0, 1.0).data.tolist() == [0.0, 0.5, 1.0]
        assert T.sign(Tensor([-3.0, 0.0, 2.0])).data.tolist() == [-1.0, 0.0, 1.0]

    def test_float32_default(self):
        assert (Tensor([1, 2]) * 2.5).dtype == np.float32
        assert T.relu(Tensor(np.ones(3, dtype=np.float64))).dtype == np.float64

    def test_no_graph_without_requires_grad(self):
        out = T.relu(Tensor([1.0]) * 2.0)
        assert not out.requires_grad and out.parents == ()

    def test_graph_recorded_with_requires_grad(self):
        x = Tensor([1.0], requires_grad=True)
        out = T.relu(x * 2.0)
        assert out.requires_grad and out.op == "relu"

    def test_graph_is_forward_ordered(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        w = Tensor(np.ones((3, 2)), requires_grad=True)
        out = T.mean(T.relu(x @ w))
        stack, seen = [out], set()
        while stack:
            node = stack.pop()
            seen.add(node.id)
            for p in node.parents:
                assert p.id < node.id
                stack.append(p)


class TestErrors:
    def test_add_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError) as info:
            Tensor(np.ones(3)) + Tensor(np.ones(4))
        assert info.value.primitive == "add"
        assert info.value.shapes == ((3,), (4,))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError, match="affine"):
            T.affine(np.ones((2, 3)), np.ones((3, 2)), np.ones(3))

    @pytest.mark.parametrize("label", [-1, 2])
    def test_label_out_of_range(self, label):
        with pytest.raises(LabelError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), np.array([label]))

    def test_zero_vector_normalize(self):
        with pytest.raises(ZeroVectorError):
            T.l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))

    def test_backward_non_scalar(self):
        with pytest.raises(ShapeError, match="backward"):
            T.backward(Tensor(np.ones(2), requires_grad=True) * 1.0)


class TestBackward:
    def test_linear_map(self):
        x = Tensor([0.3, 0.7], requires_grad=True)
        T.backward(T.sum(x * Tensor([1.0, -2.0])))
        assert x.grad.tolist() == [1.0, -2.0]

    def test_sqrt_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.backward(T.sum(T.sqrt(x)))
        assert x.grad.tolist() == [0.0]

    def test_relu_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.backward(T.sum(T.relu(x)))
        assert x.grad.tolist() == [0.0]

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            T.backward(T.sum(x * 3.0))
        assert x.grad.tolist() == [6.0, 6.0]
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        T.backward(T.sum(y + y))
        assert x.grad.tolist() == [8.0]

    def test_sign_has_no_edge(self):
        x = Tensor([0.5, -0.5], requires_grad=True)
        s = T.sign(x)
        assert not s.requires_grad and s.parents == ()

    def test_two_layer_net_against_finite_differences(self):
        rng = np.random.default_rng(0)
        w1 = rng.normal(size=(5, 7)) * 0.5
        b1 = rng.normal(size=7) * 0.1
        w2 = rng.normal(size=(7, 3)) * 0.5
        labels = np.array([0, 2])

        def f(x):
            return T.softmax_cross_entropy(T.affine(T.relu(T.affine(x, w1, b1)), w2, np.zeros(3)), labels)

        x = rng.uniform(size=(2, 5))
        leaf = Tensor(x, requires_grad=True)
        T.backward(f(leaf))
        numeric = numerical_grad(f, x, 1e-3)
        rel = np.abs(leaf.grad - numeric) / np.maximum(1e-8, np.abs(leaf.grad) + np.abs(numeric))
        assert rel.max() < 1e-4


class TestGradCheck:
    def test_quadratic(self):
        err = grad_check(lambda x: T.sum(x * x) * 0.5, np.array([1.0, 2.0]))
        assert err < 1e-8

    def test_softmax_ce_of_affine(self):
        rng = np.random.default_rng(3)
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        y = np.array([1, 0])
        assert grad_check(lambda x: T.softmax_cross_entropy(T.affine(x, w, b), y), rng.normal(size=(2, 4))) < 1e-4

    def test_relu_kink_excluded(self):
        assert grad_check(lambda x: T.sum(T.relu(x)), np.array([0.0])) == 0.0

    def test_relu_kink_would_fail_without_exclusion(self):
        assert grad_check(lambda x: T.sum(T.relu(x)), np.array([0.0]), skip_kinks=False) > 0.1

    def test_nearby_kink_resolved_by_smaller_step(self):
        # the kink at 0 lies inside the h=1e-3 stencil but outside h/10
        x = np.array([6e-4])
        assert grad_check(lambda t: T.sum(T.relu(t)), x, skip_kinks=False) > 0.1
        assert grad_check(lambda t: T.sum(T.relu(t)), x) < 1e-10

    def test_wrong_gradient_near_kink_still_detected(self):
        def broken(x):
            out = T.sum(T.relu(x))
            out._backward = lambda g: (np.full(1, 2.0),)  # deliberately wrong
            return out

        assert grad_check(broken, np.array([6e-4])) > 0.3

    def test_wrong_gradient_detected(self):
        def broken(x):
            out = T.sum(x * x)
            out._backward = lambda g: (np.zeros(1),)  # deliberately wrong
            return out

        assert grad_check(broken, np.array([1.5])) > 0.5

    def test_coordinate_subset(self):
        x = np.array([[0.5, -1.0], [2.0, 3.0]])
        def square(t):
            return T.sum(t * t)

        assert grad_check(square, x, coords=[0, 3]) < 1e-8
        np.testing.assert_allclose(numerical_grad(square, x, 1e-3, coords=[3, 1]), [6.0, -2.0], rtol=1e-6)

    def test_nan_reported_as_failure(self):
        def f(x):
            return T.sum(x * float("nan"))

        assert grad_check(f, np.array([1.0])) == float("inf")


# Each primitive on 20 random inputs away from kinks.
PRIMITIVES = {
    "add": lambda x, c: T.sum((x + c) * c),
    "sub": lambda x, c: T.sum((x - c) * c),
    "mul": lambda x, c: T.sum(x * c),
    "scalar": lambda x, c: T.sum((x * 2.5 + 1.0) * c),
    "matmul": lambda x, c: T.sum(T.matmul(x, Tensor(c.data.T)) * 1.0),
    "transpose": lambda x, c: T.sum(T.matmul(x.T, c)),
    "relu": lambda x, c: T.sum(T.relu(x) * c),
    "sqrt": lambda x, c: T.sum(T.sqrt(x) * c),
    "power": lambda x, c: T.sum(T.power(x, 0.3) * c),
    "clamp": lambda x, c: T.sum(T.clamp(x, -0.5, 0.5) * c),
    "mean": lambda x, c: T.mean(x * c),
    "l2_normalize": lambda x, c: T.sum(T.l2_normalize(x) * c),
    "cross_entropy": lambda x, c: T.softmax_cross_entropy(x * 2.0, np.array([0, 2, 1])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f = PRIMITIVES[name]
    for _ in range(20):
        x = rng.uniform(-1, 1, size=(3, 4))
        if name in ("sqrt", "power"):
            x = rng.uniform(0.2, 2, size=(3, 4))
        elif name in ("relu", "clamp"):
            # keep every coordinate at least 0.05 away from the kinks at 0 and +-0.5
            x = rng.choice([-0.8, -0.25, 0.25, 0.8], size=x.shape) + rng.uniform(-0.15, 0.15, size=x.shape)
        c = Tensor(rng.normal(size=(3, 4)))
        err = grad_check(lambda t: f(t, c), x, 1e-5, skip_kinks=False)
        assert err < 1e-4, (name, err)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 16), elements=_finite_floats()))
def test_l2_normalize_unit_norm(v):
    if not np.any(v):
        with pytest.raises(ZeroVectorError):
            T.l2_normalize(Tensor(v))
        return
    if np.abs(v).max() < 1e-6:
        v = v / np.abs(v).max()
    out = T.l2_normalize(Tensor(v)).data
    assert abs(float(np.linalg.norm(out.astype(np.float64))) - 1.0) < 1e-5


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 16), elements=_finite_floats(-100, 100)))
def test_forward_is_nan_free(v):
    t = Tensor(v)
    for out in (T.sqrt(t), T.relu(t), T.power(t, 0.5), T.power(t, 0.3), T.clamp(t, 0, 1)):
        assert not np.any(np.isnan(out.data))
