"""Tests for the reverse-mode autodiff core.

Every op's backward pass is checked against central finite differences in
float64; forward semantics are pinned by closed-form cases.
"""

import numpy as np
import pytest

from microprobe import autodiff as ad
from microprobe.autodiff import Adam, Parameter, ShapeError, Tensor


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.precision("float64"):
        yield


class TestForwardOps:
    def test_softmax_uniform_logits(self):
        out = Tensor([0.0, 0.0, 0.0]).softmax()
        np.testing.assert_allclose(out.numpy(), [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(0, 5, size=(20, 7)))
        s = x.softmax().numpy()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert (s > 0).all()

    def test_matmul_identity(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 3))
        out = Tensor(np.eye(3)) @ Tensor(a)
        np.testing.assert_array_equal(out.numpy(), a)

    def test_conv2d_constant_invariance(self):
        # mean kernel sums to one, so a constant image stays constant inside
        x = Tensor(np.full((1, 8, 8), 3.25))
        w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        out = ad.conv2d(x, w, padding=0)
        np.testing.assert_allclose(out.numpy(), 3.25, atol=1e-12)

    def test_nearest_upsampling_replicates_blocks(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = ad.upsample2x_nearest(x).numpy()[0]
        np.testing.assert_array_equal(out[:2, :2], 1.0)
        np.testing.assert_array_equal(out[2:, 2:], 4.0)

    def test_masked_fill_values(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        mask = np.array([[True, False, False], [False, True, False]])
        out = x.masked_fill(mask, -1.0).numpy()
        assert out[0, 0] == -1.0 and out[1, 1] == -1.0
        assert out[0, 1] == 1.0

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 5)))

    def test_debug_mode_flags_nonfinite(self):
        ad.set_debug_checks(True)
        try:
            with pytest.raises(FloatingPointError):
                Tensor([-1.0]).log()
        finally:
            ad.set_debug_checks(False)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = Parameter(np.arange(12.0).reshape(3, 4))
        p.sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_zero_times_function_gives_zero_gradient(self):
        p = Parameter(np.array([1.0, 2.0]))
        (p.exp().sum() * 0.0).backward()
        np.testing.assert_array_equal(p.grad, np.zeros(2))

    def test_backward_requires_scalar(self):
        p = Parameter(np.ones((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            (p * 2.0).backward()

    def test_unreached_parameter_gradient_unchanged(self):
        a = Parameter(np.ones(3))
        b = Parameter(np.ones(3))
        b.grad = np.full(3, 7.0)
        a.sum().backward()
        np.testing.assert_array_equal(b.grad, np.full(3, 7.0))

    def test_masked_fill_blocks_gradient(self):
        p = Parameter(np.arange(6.0).reshape(2, 3))
        mask = np.array([[True, False, True], [False, False, True]])
        (p.masked_fill(mask, 5.0) * p.detach()).sum().backward()
        assert (p.grad[mask] == 0).all()
        assert (p.grad[~mask] != 0).any()

    def test_two_layer_mlp_matches_finite_differences(self):
        """Analytic gradients of a random MLP vs central differences, h=1e-5."""
        rng = np.random.default_rng(42)
        lin1 = ad.Linear(6, 9, np.random.default_rng(7))
        lin2 = ad.Linear(9, 2, np.random.default_rng(8))
        x = Tensor(rng.normal(size=(5, 6)))
        y = Tensor(rng.normal(size=(5, 2)))

        def loss_fn():
            d = lin2(lin1(x).relu()) - y
            return (d * d).mean()

        err = ad.grad_check(loss_fn, lin1.parameters() + lin2.parameters(),
                            step=1e-5)
        assert err < 1e-4


class TestPerOpGradients:
    """Central finite differences for each primitive, random inputs."""

    def _check(self, build, shapes, seed=0, n_samples=16):
        rng = np.random.default_rng(seed)
        params = [Parameter(rng.normal(size=s) + 0.1) for s in shapes]
        err = ad.grad_check(lambda: build(*params), params, n_samples=n_samples)
        assert err < 1e-4, err

    def test_add_broadcast(self):
        self._check(lambda a, b: (a + b).sum(), [(4, 5), (5,)])

    def test_sub_mul(self):
        self._check(lambda a, b: ((a - b) * a).mean(), [(3, 4), (3, 4)])

    def test_matmul(self):
        self._check(lambda a, b: (a @ b).sum(), [(3, 4), (4, 2)])

    def test_bmm(self):
        self._check(lambda a, b: a.bmm(b).mean(), [(2, 3, 4), (2, 4, 5)])

    def test_softmax(self):
        rng = np.random.default_rng(14)
        t = Tensor(rng.normal(size=(5, 6)))
        self._check(lambda a: (a.softmax() * t).sum(), [(5, 6)])

    def test_log_exp(self):
        rng = np.random.default_rng(3)
        p = Parameter(rng.uniform(0.5, 2.0, size=(4, 4)))
        err = ad.grad_check(lambda: (p.log().exp() * p).sum(), [p])
        assert err < 1e-4

    def test_relu(self):
        rng = np.random.default_rng(15)
        t = Tensor(rng.normal(size=(6, 6)))
        self._check(lambda a: (a.relu() * t).sum(), [(6, 6)], seed=5)

    def test_conv2d(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(2, 6, 6)))
        w = Parameter(rng.normal(size=(3, 2, 3, 3)))
        b = Parameter(rng.normal(size=(3,)))
        err = ad.grad_check(lambda: (ad.conv2d(x, w, b, padding=1)
                                     .relu().sum()), [x, w, b])
        assert err < 1e-4

    def test_upsample_nearest(self):
        rng = np.random.default_rng(13)
        t = Tensor(rng.normal(size=(2, 6, 6)))
        self._check(lambda a: (ad.upsample2x_nearest(a) * t).sum(), [(2, 3, 3)])

    def test_upsample_bilinear(self):
        rng = np.random.default_rng(6)
        x = Parameter(rng.normal(size=(2, 4, 5)))
        t = Tensor(rng.normal(size=(2, 8, 10)))
        err = ad.grad_check(lambda: (ad.upsample2x_bilinear(x) * t).sum(), [x])
        assert err < 1e-4

    def test_reshape_transpose(self):
        self._check(lambda a: (a.reshape(6, 2).transpose_last2() * 3.0).sum(),
                    [(3, 4)])

    def test_reductions(self):
        self._check(lambda a: a.sum(axes=0).mean() + a.mean(axes=(0, 1)), [(4, 5)])

    def test_masked_fill(self):
        rng = np.random.default_rng(9)
        p = Parameter(rng.normal(size=(4, 4)))
        mask = rng.random((4, 4)) > 0.5
        t = Tensor(rng.normal(size=(4, 4)))
        err = ad.grad_check(lambda: (p.masked_fill(mask, 0.5) * t).sum(), [p])
        assert err < 1e-4

    def test_compositions(self):
        rng = np.random.default_rng(10)
        p = Parameter(rng.uniform(0.5, 3.0, size=(3, 3)))
        q = Parameter(rng.normal(size=(3, 3)))
        t = Tensor(rng.normal(size=(3, 3)))
        err = ad.grad_check(
            lambda: (ad.div(p, p.sum(axes=-1, keepdims=True)) * t).sum()
            + ad.softplus(q).mean(), [p, q])
        assert err < 1e-4


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        p = Parameter(np.array([1.5, -2.0]))
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_first_step_size(self):
        """First bias-corrected step is lr * g / (|g| + eps) ~ lr for g=1."""
        p = Parameter(np.array([0.0]))
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0])
        opt.step()
        assert abs(p.data[0] + 0.1) < 1e-6
        assert opt.step_count == 1

    def test_quadratic_bowl_converges(self):
        p = Parameter(np.array([3.0]))
        opt = Adam([p], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        assert abs(p.data[0]) < 1e-3

    def test_zero_grad_resets(self):
        p = Parameter(np.ones(3))
        p.sum().backward()
        assert (p.grad == 1).all()
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, np.zeros(3))


class TestDeterminism:
    def test_identical_seeds_bitwise_identical_training(self):
        def run():
            rng = np.random.default_rng(3)
            lin = ad.Linear(4, 4, np.random.default_rng(11))
            x = Tensor(rng.normal(size=(8, 4)))
            opt = Adam(lin.parameters(), lr=1e-2)
            for _ in range(25):
                opt.zero_grad()
                (lin(x) * lin(x)).mean().backward()
                opt.step()
            return [p.data.copy() for p in lin.parameters()]

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestGradCheckContract:
    def test_linear_map_is_exact(self):
        rng = np.random.default_rng(12)
        p = Parameter(rng.normal(size=(4, 3)))
        c = Tensor(rng.normal(size=(4, 3)))
        err = ad.grad_check(lambda: (p * c).sum(), [p])
        assert err < 1e-8
