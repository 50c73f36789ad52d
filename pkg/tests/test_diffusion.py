import math

import numpy as np
import pytest
import torch

from latcast.diffusion import (
    EmaState,
    SamplerConfig,
    build_schedule,
    denoise,
    ema_decay,
    ema_update,
    heun_sample,
    loss_weight,
    precondition,
    sample_sigma,
    step_rng,
    training_loss,
)
from latcast.errors import NumericalError, ValidationError


def closed_form_sigma(t, n, smin, smax, rho):
    # independent evaluation of the ladder used as the oracle
    return (smax ** (1 / rho) + (t / (n - 1)) * (smin ** (1 / rho) - smax ** (1 / rho))) ** rho


class TestSchedule:
    def test_endpoints_exact(self):
        s = build_schedule(20, 0.002, 80.0, 7.0)
        assert s.sigmas[0] == 80.0
        assert s.sigmas[19] == 0.002
        assert s.sigmas[20] == 0.0

    def test_matches_closed_form(self):
        s = build_schedule(20, 0.002, 80.0, 7.0)
        for t in range(20):
            assert s.sigmas[t] == pytest.approx(closed_form_sigma(t, 20, 0.002, 80.0, 7.0), abs=1e-10)

    def test_mid_value(self):
        s = build_schedule(20, 0.002, 80.0, 7.0)
        expected = (80 ** (1 / 7) + (10 / 19) * (0.002 ** (1 / 7) - 80 ** (1 / 7))) ** 7
        assert s.sigmas[10] == pytest.approx(expected, rel=1e-12)

    def test_rho_one_is_linear(self):
        s = build_schedule(3, 0.002, 80.0, 1.0)
        assert np.allclose(s.sigmas, [80.0, 40.001, 0.002, 0.0], atol=1e-12)

    def test_strictly_decreasing(self):
        for n in (2, 5, 20, 101):
            for rho in (1.0, 3.0, 7.0):
                s = build_schedule(n, 0.002, 80.0, rho)
                assert np.all(np.diff(s.sigmas) < 0)

    def test_invalid_params(self):
        with pytest.raises(ValidationError):
            build_schedule(1, 0.002, 80.0, 7.0)
        with pytest.raises(ValidationError):
            build_schedule(10, 80.0, 0.002, 7.0)
        with pytest.raises(ValidationError):
            build_schedule(10, 0.002, 80.0, 0.0)


class TestPrecondition:
    def test_hand_case_sigma_equals_data(self):
        c = precondition(0.5, 0.5)
        assert c.c_skip == pytest.approx(0.5, abs=1e-15)
        assert c.c_in == pytest.approx(math.sqrt(2.0), abs=1e-15)
        assert c.c_out == pytest.approx(0.5 / math.sqrt(2.0), abs=1e-15)

    def test_small_sigma_limit(self):
        c = precondition(1e-8, 0.5)
        assert c.c_skip == pytest.approx(1.0, abs=1e-12)
        assert c.c_out == pytest.approx(0.0, abs=1e-8)

    def test_large_sigma(self):
        c = precondition(80.0, 0.5)
        assert c.c_skip == pytest.approx(0.25 / 6400.25, rel=1e-12)

    def test_identities_across_sigma_range(self):
        for sigma in np.logspace(-3, 3, 200):
            c = precondition(float(sigma), 0.5)
            var = sigma * sigma + 0.25
            assert abs(c.c_in**2 * var - 1.0) < 1e-12
            assert abs(c.c_skip * var - 0.25) < 1e-12

    def test_c_noise(self):
        assert precondition(math.e**4, 0.5).c_noise == pytest.approx(1.0, rel=1e-12)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValidationError):
            precondition(0.0, 0.5)


class TestDenoise:
    def test_zero_network(self, rng):
        z = rng.standard_normal((3, 4))
        out = denoise(lambda x, c, n: np.zeros_like(x), z, None, 2.0, 0.5)
        c = precondition(2.0, 0.5)
        assert np.allclose(out, c.c_skip * z)

    def test_small_sigma_passthrough(self, rng):
        z = rng.standard_normal(5)
        out = denoise(lambda x, c, n: np.ones_like(x), z, None, 1e-9, 0.5)
        assert np.allclose(out, z, atol=1e-8)

    def test_linear_oracle_reconstructs_target(self, rng):
        # choose F so that c_skip*z + c_out*F = target exactly
        z = rng.standard_normal((2, 3))
        target = rng.standard_normal((2, 3))
        sigma, sd = 1.7, 0.5
        c = precondition(sigma, sd)

        def network(x, cond, c_noise):
            assert np.allclose(x, c.c_in * z)
            assert c_noise == pytest.approx(math.log(sigma) / 4)
            return (target - c.c_skip * z) / c.c_out

        out = denoise(network, z, None, sigma, sd)
        assert np.allclose(out, target, atol=1e-6)

    def test_nonfinite_output_rejected(self, rng):
        z = rng.standard_normal(4)
        with pytest.raises(NumericalError):
            denoise(lambda x, c, n: np.full_like(x, np.nan), z, None, 1.0, 0.5)


class GaussianDenoiser:
    """Analytic denoiser for data ~ N(mu, data_std^2), with the exact
    probability-flow trajectory z(sigma) = mu + c*sqrt(data_std^2+sigma^2)."""

    def __init__(self, mu=1.7, data_std=1.0):
        self.mu = mu
        self.data_std = data_std
        self.calls = 0

    def __call__(self, z, z_cond, sigma):
        self.calls += 1
        s2 = self.data_std**2
        return (s2 * z + sigma**2 * self.mu) / (s2 + sigma**2)

    def exact_at_zero(self, z_start, sigma_start):
        c = (z_start - self.mu) / math.sqrt(self.data_std**2 + sigma_start**2)
        return self.mu + c * self.data_std


class TestHeunSampler:
    def test_constant_target_reaches_it_exactly(self):
        target = np.array([3.0, -1.0, 0.5])
        schedule = build_schedule(6, 0.002, 80.0, 7.0)
        out = heun_sample(lambda z, c, s: target, None, (3,), schedule, rng_seed=0)
        assert np.allclose(out, target, atol=1e-12)

    def test_constant_target_one_step_trajectory(self):
        # Euler/Heun agree: z1 = target + (sigma_1/sigma_0) (z0 - target)
        target = np.full(4, 2.0)
        schedule = build_schedule(3, 0.5, 8.0, 1.0)
        z0 = np.random.Generator(np.random.Philox(7)).standard_normal(4) * schedule.sigmas[0]
        state = {"first": None}

        def den(z, c, s):
            if state["first"] is None and s == schedule.sigmas[1]:
                state["first"] = z.copy()
            return target

        heun_sample(den, None, (4,), schedule, rng_seed=7)
        expected = target + (schedule.sigmas[1] / schedule.sigmas[0]) * (z0 - target)
        assert np.allclose(state["first"], expected, atol=1e-12)

    def test_call_count_is_2n_minus_1(self):
        for n in (2, 5, 20):
            den = GaussianDenoiser()
            heun_sample(den, None, (4,), build_schedule(n, 0.002, 80.0, 7.0), rng_seed=1)
            assert den.calls == 2 * n - 1

    def test_determinism(self):
        schedule = build_schedule(8, 0.002, 80.0, 7.0)
        den = GaussianDenoiser()
        a = heun_sample(den, None, (5,), schedule, rng_seed=42)
        b = heun_sample(den, None, (5,), schedule, rng_seed=42)
        assert np.array_equal(a, b)
        c = heun_sample(den, None, (5,), schedule, rng_seed=43)
        assert not np.array_equal(a, c)

    def test_second_order_convergence(self):
        # global error vs the exact trajectory shrinks ~4x per ladder doubling
        den = GaussianDenoiser()
        errors = {}
        for n in (10, 20, 40):
            schedule = build_schedule(n, 0.002, 80.0, 7.0)
            rng = np.random.Generator(np.random.Philox(3))
            z0 = schedule.sigmas[0] * rng.standard_normal(16)
            out = heun_sample(den, None, (16,), schedule, rng_seed=3)
            exact = den.exact_at_zero(z0, schedule.sigmas[0])
            errors[n] = np.linalg.norm(out - exact)
        assert 3.0 < errors[10] / errors[20] < 5.0
        assert 3.0 < errors[20] / errors[40] < 5.0

    def test_corrector_off_matches_plain_euler(self):
        den = GaussianDenoiser()
        schedule = build_schedule(12, 0.002, 80.0, 7.0)
        out = heun_sample(den, None, (6,), schedule, rng_seed=9, second_order=False)
        rng = np.random.Generator(np.random.Philox(9))
        z = schedule.sigmas[0] * rng.standard_normal(6)
        for i in range(len(schedule.sigmas) - 1):
            s, s1 = float(schedule.sigmas[i]), float(schedule.sigmas[i + 1])
            d = (z - den(z, None, s)) / s
            z = z + (s1 - s) * d
        assert np.array_equal(out, z)

    def test_nonfinite_state_raises(self):
        schedule = build_schedule(4, 0.002, 80.0, 7.0)
        with pytest.raises(NumericalError):
            heun_sample(lambda z, c, s: np.full_like(z, np.inf), None, (3,), schedule, rng_seed=0)


class TestSampleSigma:
    def test_deterministic_per_step(self):
        a = sample_sigma(step_rng(0, 17))
        b = sample_sigma(step_rng(0, 17))
        assert a == b
        assert sample_sigma(step_rng(0, 18)) != a

    def test_all_positive(self):
        assert all(sample_sigma(step_rng(1, s)) > 0 for s in range(200))

    def test_lognormal_parameters(self):
        rng = np.random.Generator(np.random.Philox(5))
        draws = np.log([sample_sigma(rng) for _ in range(100_000)])
        assert abs(draws.mean() + 1.2) < 0.02
        assert abs(draws.std() - 1.2) < 0.02


class TestLossWeight:
    def test_edm_variant_is_inverse_cout_squared(self):
        for sigma in (0.1, 0.5, 3.0):
            c = precondition(sigma, 0.5)
            assert loss_weight(sigma, 0.5, "edm") == pytest.approx(1.0 / c.c_out**2, rel=1e-12)

    def test_ratio_variant(self):
        assert loss_weight(2.0, 0.5, "ratio") == pytest.approx((4 + 0.25) / 1.0, rel=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ValidationError):
            loss_weight(1.0, 0.5, "banana")


class TestTrainingLoss:
    def test_perfect_denoiser_gives_zero(self, rng):
        z0 = rng.standard_normal((1, 2, 4, 6))

        def network(x, cond, c_noise):
            # invert the preconditioning so D(z) == z0 exactly
            sigma = math.exp(4.0 * c_noise)
            c = precondition(sigma, 0.5)
            return (torch.as_tensor(z0) - c.c_skip * (x / c.c_in)) / c.c_out

        loss = training_loss(network, [(z0, None)], 0.7, np.ones(4), rng=step_rng(0, 0))
        assert float(loss) < 1e-20

    def test_zero_network_matches_direct_evaluation(self, rng):
        sigma, sd = 1.3, 0.5
        z0 = rng.standard_normal((1, 3, 4, 6))
        w = np.abs(rng.standard_normal(4)) + 0.5
        rng_a = step_rng(7, 3)
        loss = training_loss(
            lambda x, c, n: torch.zeros_like(x), [(z0, None)], sigma, w, sigma_data=sd, rng=rng_a
        )
        # direct evaluation with the same noise draw
        rng_b = step_rng(7, 3)
        noise = rng_b.standard_normal(z0.shape)
        c = precondition(sigma, sd)
        direct = loss_weight(sigma, sd) * np.mean(
            w[None, None, :, None] * (c.c_skip * (z0 + sigma * noise) - z0) ** 2
        )
        assert float(loss) == pytest.approx(direct, rel=1e-12)

    def test_uniform_weights_equal_unweighted(self, rng):
        z0 = rng.standard_normal((2, 2, 3, 5))
        net = lambda x, c, n: 0.1 * x
        a = training_loss(net, [(z0, None)], 0.9, np.ones(3), rng=step_rng(1, 1))
        noise_rng = step_rng(1, 1)
        noise = noise_rng.standard_normal(z0.shape)
        c = precondition(0.9, 0.5)
        d = c.c_skip * (z0 + 0.9 * noise) + c.c_out * 0.1 * c.c_in * (z0 + 0.9 * noise)
        direct = loss_weight(0.9, 0.5) * np.mean((d - z0) ** 2)
        assert float(a) == pytest.approx(direct, rel=1e-12)

    def test_nonnegative(self, rng):
        z0 = rng.standard_normal((1, 2, 3, 4))
        loss = training_loss(lambda x, c, n: torch.zeros_like(x), [(z0, None)], 0.5, np.ones(3),
                             rng=step_rng(0, 5))
        assert float(loss) >= 0.0


class TestEma:
    def test_no_update_before_threshold(self):
        assert ema_decay(500) == 0.0
        assert ema_decay(1000) == 0.0
        assert ema_decay(1001) > 0.0

    def test_warmup_hand_value(self):
        # s = 1: d = 1 - 2^(-2/3)
        assert ema_decay(1001) == pytest.approx(1.0 - 2.0 ** (-2.0 / 3.0), abs=1e-12)

    def test_asymptotic_clamp(self):
        assert ema_decay(10**9) == 0.9999

    def test_monotone_nondecreasing(self):
        decays = [ema_decay(s) for s in range(1000, 200_000, 500)]
        assert all(b >= a for a, b in zip(decays, decays[1:]))
        assert max(decays) <= 0.9999

    def test_state_updates(self):
        lin = torch.nn.Linear(3, 3)
        state = EmaState.from_module(lin, update_after_step=2)
        before = {k: v.clone() for k, v in state.shadow.items()}
        state.step = 1
        ema_update(state, dict(lin.state_dict()))
        for k in before:
            assert torch.equal(state.shadow[k], before[k])  # no-op at step <= 2
        with torch.no_grad():
            lin.weight.add_(1.0)
        state.step = 3
        ema_update(state, dict(lin.state_dict()))
        d = state.decay_at(3)
        expected = d * before["weight"] + (1 - d) * lin.weight
        assert torch.allclose(state.shadow["weight"], expected)

    def test_shape_mismatch_rejected(self):
        lin = torch.nn.Linear(3, 3)
        state = EmaState.from_module(lin, update_after_step=0)
        state.step = 5
        with pytest.raises(ValidationError):
            ema_update(state, {"weight": torch.zeros(2, 2), "bias": torch.zeros(3)})


class TestSamplerConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = SamplerConfig(N=10, sigma_min=0.01, sigma_max=40.0, rho=5.0,
                            sigma_data=0.5, loss_weight_variant="ratio", member_seed_base=99)
        path = cfg.write_json(tmp_path / "sampler.json")
        back = SamplerConfig.read_json(path)
        assert back == cfg
        keys = set(back.to_dict())
        assert keys == {"N", "sigma_min", "sigma_max", "rho", "sigma_data",
                        "loss_weight_variant", "member_seed_base"}

    def test_invalid_variant_rejected(self):
        with pytest.raises(ValidationError):
            SamplerConfig(loss_weight_variant="nope")
