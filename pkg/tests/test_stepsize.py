import numpy as np
import pytest

from csunfold import autodiff as ad
from csunfold import model as md
from csunfold import sampling as sp
from csunfold import stepsize as ss

import oracles


def make_ssg(variant, channels=4, feb_blocks=1, block_size=33, seed=0, dtype=np.float64, zero=False):
    cfg = md.ModelConfig(
        phases=1, block_size=block_size, rate=0.25, channels=channels,
        feb_blocks=feb_blocks, ssg_variant=variant, nl_kind="none",
    )
    params = md.init_parameters(cfg, seed=seed, dtype=dtype)
    ssg = params.phases[0].ssg
    if zero:
        for _, t in ssg.named_parameters("z"):
            t.data = np.zeros_like(t.data)
    return ssg


class TestSsgForward:
    def test_all_zero_weights_give_unit_map(self, rng):
        for variant in ("full", "block", "global"):
            ssg = make_ssg(variant, zero=True)
            h = ad.Tensor(rng.normal(size=(1, 4, 33, 33)))
            out = ss.ssg_forward(ssg, h, training=True)
            np.testing.assert_allclose(out.values.data, 1.0, atol=1e-12)

    def test_values_bounded_in_0_2(self, rng):
        for variant in ("full", "block", "global", "fixed"):
            ssg = make_ssg(variant, seed=3)
            if variant == "fixed":
                ssg.rho_raw.data = np.array([57.0])  # extreme raw scalar
            for trial in range(20):
                h = ad.Tensor(100.0 * rng.normal(size=(1, 4, 33, 33)))
                out = ss.ssg_forward(ssg, h, training=True)
                assert (out.values.data >= 0.0).all() and (out.values.data <= 2.0).all()

    def test_values_bounded_ten_thousand_trials(self, rng):
        # bulk bound check on small inputs: arbitrary finite features,
        # arbitrary weight scales, every variant
        total = 0
        for variant in ("full", "block", "global", "fixed"):
            ssg = make_ssg(variant, block_size=8, dtype=np.float32, seed=4)
            for trial in range(2500):
                if trial % 500 == 0 and variant == "fixed":
                    ssg.rho_raw.data = rng.normal(size=1).astype(np.float32) * 100
                scale = float(rng.uniform(0.1, 300.0))
                h = ad.Tensor((scale * rng.normal(size=(1, 4, 8, 8))).astype(np.float32))
                values = ss.ssg_forward(ssg, h, training=False).values.data
                assert (values >= 0.0).all() and (values <= 2.0).all()
                total += 1
        assert total == 10000

    def test_full_variant_preserves_dims(self, rng):
        ssg = make_ssg("full")
        h = ad.Tensor(rng.normal(size=(1, 4, 66, 99)))
        out = ss.ssg_forward(ssg, h, training=True)
        assert out.values.shape == (1, 1, 66, 99)

    def test_block_variant_piecewise_constant(self, rng):
        ssg = make_ssg("block", block_size=33)
        h = ad.Tensor(rng.normal(size=(1, 4, 66, 66)))
        out = ss.ssg_forward(ssg, h, training=True)
        assert out.values.shape == (1, 1, 66, 66)
        for i in range(2):
            for j in range(2):
                tile = out.values.data[0, 0, 33 * i:33 * i + 33, 33 * j:33 * j + 33]
                assert np.ptp(tile) == 0.0

    def test_global_variant_is_scalar(self, rng):
        ssg = make_ssg("global")
        out = ss.ssg_forward(ssg, ad.Tensor(rng.normal(size=(1, 4, 33, 33))), training=True)
        assert out.values.shape == (1, 1, 1, 1)

    def test_fixed_variant_initial_value_one(self):
        ssg = make_ssg("fixed")
        out = ss.ssg_forward(ssg, ad.Tensor(np.zeros((1, 4, 33, 33))), training=True)
        assert out.values.data.reshape(()) == pytest.approx(1.0)
        assert out.variant == "fixed"

    def test_channel_mismatch_rejected(self, rng):
        ssg = make_ssg("full", channels=4)
        with pytest.raises(ValueError, match="channel"):
            ss.ssg_forward(ssg, ad.Tensor(rng.normal(size=(1, 3, 33, 33))), training=True)


class TestGradientStep:
    def test_zero_map_returns_input(self, rng):
        op = sp.make_operator(8, 0.5, seed=1, dtype=np.float64)
        x = ad.Tensor(rng.random((1, 1, 16, 16)))
        m = sp.sample(op, rng.random((1, 1, 16, 16)))
        zero_map = ss.StepSizeMap(ad.Tensor(np.zeros((1, 1, 16, 16))), "full")
        r = ss.gradient_step(op, x, m, zero_map)
        np.testing.assert_array_equal(r.data, x.data)

    def test_consistent_point_fixed_for_any_map(self, rng):
        op = sp.make_operator(8, 0.5, seed=2, dtype=np.float64)
        img = rng.random((1, 1, 16, 16))
        m = sp.sample(op, img)
        arbitrary = ss.StepSizeMap(ad.Tensor(2.0 * rng.random((1, 1, 16, 16))), "full")
        r = ss.gradient_step(op, ad.Tensor(img), m, arbitrary)
        np.testing.assert_allclose(r.data, img, atol=1e-10)

    def test_constant_map_matches_scalar_pgd_oracle(self, rng):
        op = sp.make_operator(8, 0.5, seed=3, dtype=np.float64)
        x = rng.random((1, 1, 16, 24))
        m = sp.sample(op, rng.random((1, 1, 16, 24)))
        rho = 0.73
        const_map = ss.StepSizeMap(ad.Tensor(np.full((1, 1, 16, 24), rho)), "full")
        r = ss.gradient_step(op, ad.Tensor(x), m, const_map)
        ref = oracles.scalar_pgd_step(op.phi64, x[0, 0], m.data, rho, 8)
        np.testing.assert_allclose(r.data[0, 0], ref, atol=1e-12)

    def test_dim_mismatch_rejected(self, rng):
        op = sp.make_operator(8, 0.5, seed=4)
        x = ad.Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
        m = sp.sample(op, x)
        bad = ss.StepSizeMap(ad.Tensor(np.ones((1, 1, 8, 8), dtype=np.float32)), "full")
        with pytest.raises(ValueError, match="map"):
            ss.gradient_step(op, x, m, bad)

    def test_gradcheck_through_map_and_phi(self, rng):
        op = sp.make_operator(8, 0.5, seed=5, dtype=np.float64)
        img = rng.random((1, 1, 8, 8))
        m = sp.sample(op, rng.random((1, 1, 8, 8)))
        proj = rng.normal(size=(1, 1, 8, 8))

        def f_x(t):
            mp = ss.StepSizeMap(ad.Tensor(np.full((1, 1, 8, 8), 0.6)), "full")
            return ad.sum_all(ad.mul(ss.gradient_step(op, t, m, mp), ad.Tensor(proj)))

        err = ad.finite_diff_check(f_x, ad.Tensor(img), samples=40, rng=rng)
        assert err < 1e-4

        def f_phi(t):
            op2 = sp.SamplingOperator(8, 0.5, op.n_meas, t, True, op.phi64)
            mp = ss.StepSizeMap(ad.Tensor(np.full((1, 1, 8, 8), 0.6)), "full")
            return ad.sum_all(ad.mul(ss.gradient_step(op2, ad.Tensor(img), m, mp), ad.Tensor(proj)))

        err_phi = ad.finite_diff_check(f_phi, op.phi, samples=40, rng=rng)
        assert err_phi < 1e-4

    def test_gradcheck_through_ssg_parameters(self, rng):
        op = sp.make_operator(8, 0.5, seed=6, dtype=np.float64)
        img = rng.random((1, 1, 8, 8))
        h = rng.normal(size=(1, 4, 8, 8))
        m = sp.sample(op, rng.random((1, 1, 8, 8)))
        proj = rng.normal(size=(1, 1, 8, 8))
        ssg = make_ssg("full", block_size=8)

        def loss_value():
            mp = ss.ssg_forward(ssg, ad.Tensor(h), training=True)
            out = ss.gradient_step(op, ad.Tensor(img), m, mp)
            return ad.sum_all(ad.mul(out, ad.Tensor(proj)))

        loss = loss_value()
        ad.backward(loss)
        zero_floor = max(1e-8, abs(loss.item()) * 4e-6)
        for name, tensor in ssg.named_parameters("ssg"):
            assert tensor.grad is not None, name
            flat = tensor.data.reshape(-1)
            grad = tensor.grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                theta = float(flat[i])
                step = 1e-6 * max(1.0, abs(theta))
                flat[i] = theta + step
                plus = loss_value().item()
                flat[i] = theta - step
                minus = loss_value().item()
                flat[i] = theta
                numeric = (plus - minus) / (2 * step)
                if abs(grad[i]) < zero_floor and abs(numeric) < zero_floor:
                    continue
                err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
                assert err < 1e-4, f"{name}[{i}]: {err}"
