import math

import pytest
import torch

from negattn.diffusion import (GuidanceConfig, NoiseSchedule, ScheduleError, ddim_step,
                               ddim_timesteps, forward_process, guided, initial_latents,
                               sample, training_loss)
from negattn.numerics import Rng, gaussian


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear()


class TestSchedule:
    def test_cumulative_product(self, sched):
        prod = 1.0
        for i in range(sched.T):
            prod *= float(sched.alpha[i])
            assert abs(prod - float(sched.alpha_bar[i])) < 1e-12

    def test_bounds_and_monotone(self, sched):
        assert ((sched.alpha > 0) & (sched.alpha < 1)).all()
        assert (sched.alpha_bar[1:] < sched.alpha_bar[:-1]).all()

    def test_linear_betas(self, sched):
        assert sched.T == 1000
        assert math.isclose(float(sched.beta[0]), 1e-4, rel_tol=1e-12)
        assert math.isclose(float(sched.beta[-1]), 0.02, rel_tol=1e-12)

    def test_rejects_alpha_outside_unit_interval(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule.from_alphas([0.5, 1.0])

    def test_round_trip(self, sched):
        again = NoiseSchedule.from_dict(sched.to_dict())
        assert torch.equal(again.alpha_bar, sched.alpha_bar)


class TestForward:
    def test_no_noise_limit(self):
        s = NoiseSchedule.from_alphas([1.0], strict=False)
        z0 = gaussian(Rng(0), (3, 4))
        assert torch.equal(forward_process(z0, 1, gaussian(Rng(1), (3, 4)), s), z0)

    def test_hand_value(self):
        # sqrt(0.25) * 1 + sqrt(0.75) * 1
        s = NoiseSchedule.from_alphas([0.25])
        out = forward_process(torch.ones(1, dtype=torch.float64), 1,
                              torch.ones(1, dtype=torch.float64), s)
        assert abs(float(out) - 1.3660254037844386) < 1e-15

    def test_noiseless_branch(self, sched):
        z0 = gaussian(Rng(2), (5,))
        out = forward_process(z0, 400, torch.zeros(5, dtype=torch.float64), sched)
        assert torch.equal(out, math.sqrt(sched.alpha_bar_at(400)) * z0)

    def test_per_row_timesteps(self, sched):
        z0 = gaussian(Rng(3), (3, 2, 2))
        eps = gaussian(Rng(4), (3, 2, 2))
        t = torch.tensor([1, 500, 1000])
        out = forward_process(z0, t, eps, sched)
        for i in range(3):
            assert torch.allclose(out[i], forward_process(z0[i], int(t[i]), eps[i], sched),
                                  rtol=0, atol=1e-15)

    def test_range_errors(self, sched):
        z = torch.zeros(2, dtype=torch.float64)
        for bad in (0, 1001):
            with pytest.raises(ScheduleError):
                forward_process(z, bad, z, sched)


class TestLoss:
    def test_perfect_model(self, sched):
        z0, eps = gaussian(Rng(0), (4, 3)), gaussian(Rng(1), (4, 3))
        assert float(training_loss(lambda z, t, c: eps, z0, 10, eps, None, sched)) == 0.0

    def test_constant_offset(self, sched):
        z0, eps = gaussian(Rng(0), (4, 3)), gaussian(Rng(1), (4, 3))
        loss = training_loss(lambda z, t, c: eps + 1, z0, 10, eps, None, sched)
        assert abs(float(loss) - 1.0) < 1e-15

    def test_batch_permutation(self, sched):
        z0, eps = gaussian(Rng(0), (6, 3)), gaussian(Rng(1), (6, 3))
        model = lambda z, t, c: 0.3 * z
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        a = training_loss(model, z0, 50, eps, None, sched)
        b = training_loss(model, z0[perm], 50, eps[perm], None, sched)
        assert abs(float(a - b)) < 1e-15


class TestDDIM:
    def test_oracle_inversion(self, sched):
        z0 = gaussian(Rng(0), (3, 8, 8))
        eps = gaussian(Rng(1), (3, 8, 8))
        for t in (1, 37, 500, 999, 1000):
            z_t = forward_process(z0, t, eps, sched)
            assert (ddim_step(z_t, eps, t, 0, sched) - z0).abs().max() < 1e-9

    def test_deterministic(self, sched):
        z, e = gaussian(Rng(0), (4,)), gaussian(Rng(1), (4,))
        assert torch.equal(ddim_step(z, e, 500, 480, sched), ddim_step(z, e, 500, 480, sched))

    def test_rejects_equal_steps(self, sched):
        z = torch.zeros(2)
        with pytest.raises(ScheduleError):
            ddim_step(z, z, 500, 500, sched)

    def test_zero_alpha_bar(self):
        s = NoiseSchedule.from_alphas([0.5, 0.0], strict=False)
        with pytest.raises(ScheduleError):
            ddim_step(torch.zeros(1), torch.zeros(1), 2, 1, s)

    def test_stochastic_needs_noise(self, sched):
        z = torch.zeros(2, dtype=torch.float64)
        with pytest.raises(ValueError):
            ddim_step(z, z, 500, 400, sched, eta=1.0)
        out = ddim_step(z, z, 500, 400, sched, eta=1.0, noise=torch.ones(2, dtype=torch.float64))
        assert (out > 0).all()

    def test_timesteps(self):
        ts = ddim_timesteps(1000, 50)
        assert ts[0] == 1000 and ts[-1] == 20 and len(ts) == 50
        assert all(a > b for a, b in zip(ts, ts[1:]))


class ZeroModel:
    dtype = torch.float64
    latent_shape = (2, 3, 3)
    base_resolution = (3, 3)

    def denoise(self, z_t, t, cond, subject=None, cfg=None, state=None):
        return torch.zeros_like(z_t)

    def null_conditioning(self, batch):
        return None


class TestSample:
    def test_zero_model_closed_form(self, sched):
        # eps_hat = 0: each step rescales by sqrt(abar_prev / abar_t), so the
        # trajectory telescopes to z_T / sqrt(abar_{t_first})
        z_T = gaussian(Rng(0), (1, 2, 3, 3))
        out = sample(ZeroModel(), None, None, sched, GuidanceConfig(guidance_scale=1.0), None,
                     noise=z_T, steps=10, clip=None)
        expected = z_T / math.sqrt(sched.alpha_bar_at(1000))
        assert torch.allclose(out, expected, rtol=1e-12, atol=0)

    def test_clip_bounds_final_sample(self, sched):
        z_T = 50 * gaussian(Rng(1), (1, 2, 3, 3))
        out = sample(ZeroModel(), None, None, sched, GuidanceConfig(1.0), None, noise=z_T, steps=4)
        assert out.abs().max() <= 1.0
        # inside the box the clamp changes nothing beyond rounding
        z, eps = gaussian(Rng(2), (5,)) * 0.1, gaussian(Rng(3), (5,)) * 0.1
        assert torch.allclose(ddim_step(z, eps, 10, 5, sched),
                              ddim_step(z, eps, 10, 5, sched, clip=1.0), rtol=1e-12, atol=1e-14)

    def test_seeded_reproducible(self, sched):
        kw = dict(steps=5)
        a = sample(ZeroModel(), None, None, sched, GuidanceConfig(1.0), None, Rng(3), **kw)
        b = sample(ZeroModel(), None, None, sched, GuidanceConfig(1.0), None, Rng(3), **kw)
        assert torch.equal(a, b)

    def test_requires_seed(self, sched):
        with pytest.raises(ValueError):
            sample(ZeroModel(), None, None, sched, GuidanceConfig(1.0), None)

    def test_guidance_one_is_conditional(self):
        c, u = torch.randn(3), torch.randn(3)
        assert torch.equal(guided(c, u, 1.0), c)
        assert torch.allclose(guided(c, u, 3.0), u + 3 * (c - u))

    def test_initial_latents_per_seed(self):
        z = initial_latents([4, 9], (2, 2), dtype=torch.float64)
        assert torch.equal(z[1], gaussian(Rng(9), (2, 2)))
