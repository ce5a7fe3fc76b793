import math

import numpy as np
import pytest

from debus import diffusion as D
from debus import tensor as T
from debus.nn import AdamW
from debus.tensor import Tensor


def implied_noise(x0):
    """Oracle predictor: the noise that maps the known x0 onto the current x_t."""
    def predict(x, t, _memory, sched):
        ab = sched.alpha_bar[t]
        return (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    return predict


class TestSchedule:
    def test_linear_t2_endpoints(self):
        s = D.make_schedule("linear", 2)
        np.testing.assert_array_equal(s.beta[1:], [1e-4, 0.02])

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_alpha_bar_base_case(self, kind):
        s = D.make_schedule(kind, 50)
        assert s.alpha_bar[0] == 1.0
        assert s.alpha_bar[1] == pytest.approx(1.0 - s.beta[1], abs=1e-15)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_strictly_decreasing(self, kind):
        s = D.make_schedule(kind, 100)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all(s.beta[1:] > 0) and np.all(s.beta[1:] <= 0.999)

    def test_cosine_direct_formula(self):
        s = D.make_schedule("cosine", 100)

        def f(t):
            return math.cos((t / 100 + 0.008) / 1.008 * math.pi / 2) ** 2

        for t in (1, 37, 99, 100):
            assert abs(s.alpha_bar[t] - f(t) / f(0)) < 1e-12

    def test_invalid(self):
        with pytest.raises(ValueError):
            D.make_schedule("linear", 0)
        with pytest.raises(ValueError):
            D.make_schedule("quadratic", 10)

    def test_respaced_keeps_alpha_bar(self):
        s = D.make_schedule("linear", 100)
        kept, sub = s.respaced(10)
        assert len(kept) == 10 and kept[-1] == 100
        np.testing.assert_allclose(sub.alpha_bar[1:], s.alpha_bar[kept], rtol=1e-12)

    def test_respaced_too_many_steps(self):
        with pytest.raises(ValueError):
            D.make_schedule("linear", 10).respaced(11)


class TestForward:
    def test_zero_noise_scales(self):
        s = D.make_schedule("linear", 100)
        x0 = np.arange(6.0)
        np.testing.assert_allclose(D.q_sample(x0, 30, np.zeros(6), s), math.sqrt(s.alpha_bar[30]) * x0)

    def test_out_of_range(self):
        s = D.make_schedule("linear", 10)
        for t in (0, 11):
            with pytest.raises(ValueError):
                D.q_sample(np.zeros(2), t, np.zeros(2), s)

    def test_chain_matches_closed_form_statistics(self):
        s = D.make_schedule("linear", 100)
        rng = np.random.default_rng(0)
        t, n = 40, 10_000
        x0 = 1.5
        x = np.full(n, x0)
        for step in range(1, t + 1):
            x = D.q_step(x, step, rng.standard_normal(n), s)
        mean, var = math.sqrt(s.alpha_bar[t]) * x0, 1 - s.alpha_bar[t]
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
        # variance of the sample variance for a gaussian: 2 var^2 / (n - 1)
        assert abs(x.var(ddof=1) - var) < 3 * math.sqrt(2 * var**2 / (n - 1))

    def test_final_step_correlation_matches_alpha_bar(self):
        # corr(x0, xT) = sqrt(ab_T) for unit-variance x0 and noise; ab_100 = prod(1 - beta) ~ 0.36
        s = D.make_schedule("linear", 100)
        want = math.sqrt(np.prod(1.0 - np.linspace(1e-4, 0.02, 100)))
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal(10_000)
        xt = D.q_sample(x0, 100, rng.standard_normal(10_000), s)
        assert abs(np.corrcoef(x0, xt)[0, 1] - want) < 0.03

    def test_long_schedule_decorrelates(self):
        s = D.make_schedule("linear", 1000)
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal(10_000)
        xt = D.q_sample(x0, 1000, rng.standard_normal(10_000), s)
        assert abs(np.corrcoef(x0, xt)[0, 1]) < 0.1


class TestReverse:
    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    @pytest.mark.parametrize("steps", [100, 10])
    def test_oracle_inverts(self, kind, steps):
        s = D.make_schedule(kind, 100)
        rng = np.random.default_rng(2)
        x0 = rng.standard_normal((2, 5, 8))
        kept, sub = s.respaced(steps)
        oracle = implied_noise(x0)
        x = rng.standard_normal(x0.shape)
        out = D.sample(x0.shape, None, s, lambda x, t, m: oracle(x, t, m, s), steps, rng, x_T=x, dtype=np.float64)
        assert np.max(np.abs(out - x0)) < 1e-6

    def test_steps_zero_returns_noise(self):
        s = D.make_schedule("linear", 100)
        x_T = np.random.default_rng(3).standard_normal((1, 3, 4))
        out = D.sample(x_T.shape, None, s, lambda *a: 0 / 0, 0, np.random.default_rng(0), x_T=x_T, dtype=np.float64)
        np.testing.assert_array_equal(out, x_T)

    def test_steps_beyond_T(self):
        with pytest.raises(ValueError):
            D.sample((1, 2), None, D.make_schedule("linear", 5), lambda *a: 0, 6, np.random.default_rng(0))

    def test_reverse_step_formula(self):
        s = D.make_schedule("linear", 10)
        x, eps = np.array([0.3, -1.2]), np.array([0.5, 0.1])
        t = 7
        want = (x - s.beta[t] / math.sqrt(1 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha[t])
        np.testing.assert_allclose(D.reverse_step(x, t, eps, s), want, rtol=1e-14)
        z = np.array([1.0, -1.0])
        np.testing.assert_allclose(D.reverse_step(x, t, eps, s, z), want + math.sqrt(s.beta[t]) * z, rtol=1e-14)


class TestDenoiser:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        den = D.Denoiser(16, rng, dtype=np.float64)
        mem = Tensor(rng.normal(size=(2, 9, 16)))
        return rng, den, mem

    def test_shape_preserved(self):
        rng, den, mem = self._setup()
        x = Tensor(rng.normal(size=(2, 5, 16)))
        assert den(x, np.array([3, 50]), mem).shape == (2, 5, 16)

    def test_oracle_and_zero_denoiser_losses(self):
        s = D.make_schedule("linear", 100)
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(64, 10, 16))
        noise = rng.standard_normal(x0.shape)

        class Echo:
            def __call__(self, x, t, m):
                return Tensor(noise)

        class Zero:
            def __call__(self, x, t, m):
                return Tensor(np.zeros_like(noise))

        assert D.diffusion_train_step(x0, None, s, Echo(), rng, noise=noise).item() == 0.0
        loss = D.diffusion_train_step(x0, None, s, Zero(), rng, noise=noise).item()
        assert loss == pytest.approx(np.mean(noise**2))
        assert abs(loss - 1.0) < 0.05

    def test_training_halves_loss(self):
        rng, den, mem = self._setup(5)
        s = D.make_schedule("linear", 100)
        x0 = rng.normal(size=(2, 5, 16))
        opt = AdamW(den.parameters(), lr=3e-3, weight_decay=0.0)
        fixed = np.random.default_rng(6)
        t_eval = fixed.integers(1, 101, size=(16, 2))
        n_eval = fixed.standard_normal((16, 2, 5, 16))

        def eval_loss():
            with T.no_grad():
                return np.mean([D.diffusion_train_step(x0, mem, s, den, rng, t=t, noise=n).item()
                                for t, n in zip(t_eval, n_eval)])

        before = eval_loss()
        for _ in range(200):
            opt.zero_grad()
            D.diffusion_train_step(x0, mem, s, den, rng).backward()
            opt.step()
        assert eval_loss() <= 0.5 * before

    def test_generation_deterministic_under_seed(self):
        _, den, mem = self._setup(7)
        s = D.make_schedule("linear", 100)
        a = D.generate_queries(mem, s, den, 10, 4, np.random.default_rng(9))
        b = D.generate_queries(mem, s, den, 10, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (2, 4, 16)

    def test_normalizer_round_trip(self):
        norm = D.QueryNormalizer(4, dtype=np.float64)
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 4))
        norm.update(x)
        z = norm.normalize(x)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(norm.denormalize(z), x, atol=1e-12)


def test_timestep_embedding_shape_and_range():
    e = D.timestep_embedding(np.array([1, 50, 100]), 9)
    assert e.shape == (3, 9)
    assert np.all(np.abs(e) <= 1.0)
