import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustfs import tensor as T
from robustfs.attack import AttackConfig, fgsm, pgd, project
from robustfs.errors import ShapeError
from robustfs.network import MlpSpec, Network
from robustfs.tensor import Tensor


def row_sum(t: Tensor) -> Tensor:
    """``[n, d] -> [n]`` reduction, enough for per-sample linear losses."""
    shape, dtype = t.shape, t.dtype
    return T._record(t.data.sum(axis=1), "row_sum", (t,), lambda g: (np.broadcast_to(g[:, None], shape).astype(dtype),))


def linear_loss(w):
    w = np.asarray(w, dtype=np.float32)
    return lambda x, y: row_sum(x * Tensor(np.broadcast_to(w, x.shape).copy()))


@pytest.fixture(scope="module")
def mlp_loss():
    net = Network.init(MlpSpec(6, (8,), 5, 3), seed=2)
    return lambda x, y: T.softmax_cross_entropy(net.logits(x), y, reduction="none")


def f32(*v):
    return np.array(v, dtype=np.float32)


class TestClosedForm:
    def test_pgd_linear_loss_saturates_box(self):
        res = pgd(linear_loss([1, -1]), f32([0.5, 0.5]), None, AttackConfig(0.1, 0.05, 7, random_start=False))
        np.testing.assert_array_equal(res.x_adv, f32([0.5, 0.5]) + f32([0.1, -0.1]))
        np.testing.assert_allclose(res.x_adv, [[0.6, 0.4]], atol=1e-7)
        assert res.delta_linf == pytest.approx(0.1, abs=1e-6)

    def test_pgd_needs_two_steps_to_saturate(self):
        cfg = AttackConfig(0.1, 0.05, 1, random_start=False)
        one = pgd(linear_loss([1, -1]), f32([0.5, 0.5]), None, cfg)
        np.testing.assert_allclose(one.x_adv, [[0.55, 0.45]], atol=1e-7)

    def test_fgsm_linear_loss(self):
        res = fgsm(linear_loss([1, -1]), f32([0.5, 0.5]), None, 0.1)
        np.testing.assert_allclose(res.x_adv, [[0.6, 0.4]], atol=1e-7)

    def test_fgsm_boundary_clip(self):
        res = fgsm(linear_loss([1]), f32([0.99]), None, 0.1)
        assert res.x_adv.tolist() == [[1.0]]

    def test_linear_loss_never_decreases(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(size=5)
            x = rng.uniform(size=(3, 5)).astype(np.float32)
            res = pgd(linear_loss(w), x, None, AttackConfig(0.05, 0.02, 3, random_start=False))
            assert res.loss_adv >= res.loss_clean

    def test_project_order(self):
        out = project(f32([1.5, -0.5, 0.3]), f32([0.95, 0.02, 0.5]), 0.1)
        np.testing.assert_allclose(out, [[1.0, 0.0, 0.4]], atol=1e-7)


class TestReductions:
    @pytest.mark.parametrize("random_start", [True, False])
    def test_eps_zero_is_identity(self, mlp_loss, random_start):
        x = np.random.default_rng(1).uniform(size=(4, 6)).astype(np.float32)
        res = pgd(mlp_loss, x, np.array([0, 1, 2, 0]), AttackConfig(0.0, 0.01, 9, random_start))
        assert res.x_adv.tobytes() == x.tobytes()

    def test_eps_zero_fgsm(self, mlp_loss):
        x = np.random.default_rng(1).uniform(size=(4, 6)).astype(np.float32)
        assert fgsm(mlp_loss, x, np.array([0, 1, 2, 0]), 0.0).x_adv.tobytes() == x.tobytes()

    def test_zero_iterations_is_identity(self, mlp_loss):
        x = np.random.default_rng(2).uniform(size=(4, 6)).astype(np.float32)
        res = pgd(mlp_loss, x, np.array([0, 1, 2, 0]), AttackConfig(0.3, 0.1, 0, True))
        assert res.x_adv.tobytes() == x.tobytes()
        assert res.delta_linf == 0.0 and res.loss_adv == res.loss_clean

    def test_single_step_pgd_equals_fgsm(self, mlp_loss):
        rng = np.random.default_rng(3)
        for _ in range(25):
            x = rng.uniform(size=(5, 6)).astype(np.float32)
            y = rng.integers(0, 3, size=5)
            eps = float(rng.uniform(0.001, 0.5))
            a = pgd(mlp_loss, x, y, AttackConfig(eps, eps, 1, random_start=False)).x_adv
            b = fgsm(mlp_loss, x, y, eps).x_adv
            assert a.tobytes() == b.tobytes()


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(
        seed=st.integers(0, 2**31 - 1),
        eps=st.floats(0.0, 0.6),
        alpha=st.floats(0.001, 0.5),
        iters=st.integers(0, 6),
        random_start=st.booleans(),
    )
    def test_constraints(self, mlp_loss, seed, eps, alpha, iters, random_start):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(3, 6)).astype(np.float32)
        x[0, :2] = (0.0, 1.0)
        res = pgd(mlp_loss, x, rng.integers(0, 3, size=3), AttackConfig(eps, alpha, iters, random_start, seed))
        assert np.abs(res.x_adv.astype(np.float64) - x).max() <= eps + 1e-6
        assert res.x_adv.min() >= 0 and res.x_adv.max() <= 1
        assert res.delta_linf <= eps + 1e-6

    def test_seed_determinism(self, mlp_loss):
        x = np.random.default_rng(4).uniform(size=(4, 6)).astype(np.float32)
        y = np.array([2, 1, 0, 1])
        runs = [pgd(mlp_loss, x, y, AttackConfig(0.1, 0.02, 5, True, seed=s)).x_adv.tobytes() for s in (7, 7, 8)]
        assert runs[0] == runs[1] != runs[2]

    def test_attack_raises_loss(self, mlp_loss):
        x = np.random.default_rng(5).uniform(size=(16, 6)).astype(np.float32)
        y = np.random.default_rng(6).integers(0, 3, size=16)
        res = pgd(mlp_loss, x, y, AttackConfig(0.2, 0.05, 10, random_start=False))
        assert res.loss_adv > res.loss_clean


class TestErrors:
    def test_loss_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pgd(lambda x, y: T.sum(x), f32([0.5, 0.5]), None, AttackConfig(0.1, 0.05, 2, False))

    @pytest.mark.parametrize("kwargs", [dict(epsilon=-0.1), dict(alpha=0.0), dict(iterations=-1)])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            AttackConfig(**kwargs)
