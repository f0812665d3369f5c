"""Bridge kernels, schedules, and exact sampling primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgekit.bridge import (BridgeSchedule, BridgeState, TokenSequence,
                              cumulative_kernel_check, make_cosine_schedule,
                              marginal_distribution, reference_rollout,
                              reference_step, sample_marginal,
                              transition_distribution)
from bridgekit.errors import InvalidStateError


def onehot(i, K):
    v = np.zeros(K)
    v[i] = 1.0
    return v


class TestCosineSchedule:
    def test_t25_endpoints_exact(self):
        s = make_cosine_schedule(25)
        assert s.beta[0] == 1.0 and s.beta[24] == 0.0
        assert s.beta_bar[0] == 1.0 and s.beta_bar[24] == 0.0

    def test_t2_fully_determined(self):
        s = make_cosine_schedule(2)
        assert np.array_equal(s.beta, [1.0, 0.0])
        assert np.array_equal(s.beta_bar, [1.0, 0.0])

    def test_t25_interior_strictly_decreasing(self):
        s = make_cosine_schedule(25)
        interior = s.beta_bar[:-1]  # last entry pinned to 0
        assert np.all(np.diff(interior) < 0.0)

    def test_rejects_small_t(self):
        with pytest.raises(ValueError):
            make_cosine_schedule(1)
        with pytest.raises(ValueError):
            make_cosine_schedule(0)

    @given(st.integers(min_value=2, max_value=80))
    @settings(max_examples=40, deadline=None)
    def test_invariants_any_t(self, T):
        s = make_cosine_schedule(T)
        assert s.beta[0] == 1.0 and s.beta[-1] == 0.0
        assert s.beta_bar[0] == 1.0 and s.beta_bar[-1] == 0.0
        assert np.all((s.beta >= 0.0) & (s.beta <= 1.0))
        assert np.all(np.diff(s.beta_bar) <= 0.0)
        assert np.max(np.abs(s.beta_bar - np.cumprod(s.beta))) <= 1e-12

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            BridgeSchedule(beta=np.array([0.9, 0.0]), beta_bar=np.array([0.9, 0.0]))
        with pytest.raises(ValueError):
            BridgeSchedule(beta=np.array([1.0, 0.5]), beta_bar=np.array([1.0, 0.5]))
        with pytest.raises(ValueError):
            BridgeSchedule(beta=np.array([1.0, 0.5, 0.0]),
                           beta_bar=np.array([1.0, 0.4, 0.0]))


class TestTransitionDistribution:
    def test_identity_at_beta_one(self):
        assert np.array_equal(
            transition_distribution(onehot(0, 3), onehot(2, 3), 1.0), [1, 0, 0])

    def test_jump_at_beta_zero(self):
        assert np.array_equal(
            transition_distribution(onehot(0, 3), onehot(2, 3), 0.0), [0, 0, 1])

    def test_even_mixture(self):
        assert np.allclose(
            transition_distribution(onehot(0, 3), onehot(2, 3), 0.5),
            [0.5, 0.0, 0.5], atol=0)

    def test_rejects_non_onehot(self):
        with pytest.raises(ValueError):
            transition_distribution(np.array([0.5, 0.5, 0.0]), onehot(2, 3), 0.5)
        with pytest.raises(ValueError):
            transition_distribution(onehot(0, 3), onehot(2, 3), 1.5)

    @given(st.integers(2, 12), st.data())
    @settings(max_examples=50, deadline=None)
    def test_simplex_output(self, K, data):
        z = onehot(data.draw(st.integers(0, K - 1)), K)
        y = onehot(data.draw(st.integers(0, K - 1)), K)
        beta = data.draw(st.floats(0.0, 1.0))
        out = transition_distribution(z, y, beta)
        assert abs(out.sum() - 1.0) < 1e-12 and np.all(out >= 0.0)


class TestMarginalDistribution:
    def test_hand_expansion(self):
        assert np.allclose(marginal_distribution(onehot(0, 3), onehot(2, 3), 0.7),
                           [0.7, 0.0, 0.3], atol=0)

    def test_constant_bridge_when_endpoints_agree(self):
        for bb in (0.0, 0.3, 1.0):
            assert np.array_equal(
                marginal_distribution(onehot(1, 3), onehot(1, 3), bb), onehot(1, 3))

    def test_fully_transformed(self):
        assert np.array_equal(
            marginal_distribution(onehot(0, 3), onehot(2, 3), 0.0), onehot(2, 3))

    @given(st.integers(2, 10), st.data())
    @settings(max_examples=50, deadline=None)
    def test_two_point_mixture_identity(self, K, data):
        """The marginal equals the mixture law of the Bernoulli latent exactly."""
        xi = data.draw(st.integers(0, K - 1))
        yi = data.draw(st.integers(0, K - 1))
        bb = data.draw(st.floats(0.0, 1.0))
        got = marginal_distribution(onehot(xi, K), onehot(yi, K), bb)
        mixture = bb * onehot(xi, K) + (1.0 - bb) * onehot(yi, K)
        assert np.array_equal(got, mixture)


class TestSampleMarginal:
    def test_fresh_chain_returns_prior(self):
        rng = np.random.default_rng(0)
        x = TokenSequence([0, 1, 2], 4)
        y = TokenSequence([3, 3, 3], 4)
        s = make_cosine_schedule(6)
        state = sample_marginal(x, y, 0, s, rng)  # beta_bar_prev = 1
        assert np.array_equal(state.z.tokens, x.tokens)
        assert state.v.all()

    def test_exhausted_chain_returns_target(self):
        rng = np.random.default_rng(0)
        beta = np.array([1.0, 0.0, 0.5, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        x = TokenSequence([0, 1, 2], 4)
        y = TokenSequence([3, 3, 3], 4)
        state = sample_marginal(x, y, 2, s, rng)  # beta_bar[1] = 0
        assert np.array_equal(state.z.tokens, y.tokens)
        assert not state.v.any()

    def test_monte_carlo_matches_closed_form(self):
        beta = np.array([1.0, 0.7, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        n = 100_000
        x = TokenSequence(np.zeros(n, dtype=np.int64), 3)
        y = TokenSequence(np.full(n, 2, dtype=np.int64), 3)
        state = sample_marginal(x, y, 2, s, np.random.default_rng(7))
        frac_x = (state.z.tokens == 0).mean()
        assert abs(frac_x - 0.7) < 0.01

    def test_mask_positions_keep_prior(self):
        rng = np.random.default_rng(1)
        mask = np.array([True, False, True])
        x = TokenSequence([0, 9, 2], 4, pad_mask=mask)  # masked token may be junk
        y = TokenSequence([3, 0, 3], 4, pad_mask=mask)
        beta = np.array([1.0, 0.0, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        state = sample_marginal(x, y, 2, s, rng)
        assert state.z.tokens[1] == 9 and state.v[1]

    def test_rejects_mismatch(self):
        s = make_cosine_schedule(4)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_marginal(TokenSequence([0], 3), TokenSequence([0, 1], 3), 1, s, rng)
        with pytest.raises(ValueError):
            sample_marginal(TokenSequence([0], 3), TokenSequence([1], 4), 1, s, rng)
        with pytest.raises(ValueError):
            sample_marginal(TokenSequence([0], 3), TokenSequence([1], 3), 4, s, rng)


class TestCumulativeKernelCheck:
    def test_cosine_identity_tight(self):
        s = make_cosine_schedule(25)
        rng = np.random.default_rng(3)
        for K in (2, 8, 64):
            y = onehot(rng.integers(0, K), K)
            for t in (0, 7, 24):
                assert cumulative_kernel_check(s, y, t) <= 1e-12

    def test_exhausted_schedule_value(self):
        beta = np.array([1.0, 0.5, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        assert s.beta_bar[2] == 0.0
        assert cumulative_kernel_check(s, onehot(1, 3), 2) <= 1e-12

    def test_running_product_value(self):
        beta = np.array([1.0, 0.5, 0.25, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        assert s.beta_bar[2] == 0.125
        assert cumulative_kernel_check(s, onehot(0, 4), 2) <= 1e-12

    def test_rejects_large_k(self):
        s = make_cosine_schedule(4)
        with pytest.raises(ValueError):
            cumulative_kernel_check(s, np.zeros(65), 1)


class TestReferenceStep:
    def test_final_step_pins_to_target(self):
        s = make_cosine_schedule(5)
        rng = np.random.default_rng(0)
        z = TokenSequence([0, 1, 2, 3], 5)
        y = TokenSequence([4, 4, 4, 4], 5)
        state = BridgeState(t=4, z=z)
        out = reference_step(state, y, s, rng)
        assert out.t == 5 and np.array_equal(out.z.tokens, y.tokens)

    def test_identity_when_beta_one(self):
        beta = np.array([1.0, 1.0, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        rng = np.random.default_rng(0)
        z = TokenSequence([0, 1], 3)
        y = TokenSequence([2, 2], 3)
        out = reference_step(BridgeState(t=1, z=z), y, s, rng)
        assert np.array_equal(out.z.tokens, z.tokens)

    def test_half_beta_frequency(self):
        beta = np.array([1.0, 0.5, 0.0])
        s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
        n = 100_000
        z = TokenSequence(np.zeros(n, dtype=np.int64), 3)
        y = TokenSequence(np.full(n, 2, dtype=np.int64), 3)
        out = reference_step(BridgeState(t=1, z=z), y, s, np.random.default_rng(5))
        stay = (out.z.tokens == 0).mean()
        assert abs(stay - 0.5) < 0.01

    def test_rejects_step_past_end(self):
        s = make_cosine_schedule(3)
        state = BridgeState(t=3, z=TokenSequence([0], 2))
        with pytest.raises(InvalidStateError):
            reference_step(state, TokenSequence([1], 2), s, np.random.default_rng(0))


class TestPinningProperty:
    def test_random_tiny_instances_always_pin(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            K = int(rng.integers(2, 9))
            n = int(rng.integers(1, 7))
            T = int(rng.integers(2, 9))
            beta = np.empty(T)
            beta[0], beta[-1] = 1.0, 0.0
            if T > 2:
                beta[1:-1] = rng.random(T - 2)
            s = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
            x = TokenSequence(rng.integers(0, K, n), K)
            y = TokenSequence(rng.integers(0, K, n), K)
            end = reference_rollout(x, y, s, rng)
            assert end.t == T and end.z.matches(y)


class TestTokenSequence:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            TokenSequence([0, 5], vocab_size=3)

    def test_masked_positions_unvalidated(self):
        seq = TokenSequence([0, 99], vocab_size=3, pad_mask=[True, False])
        assert seq.n_unmasked == 1

    def test_onehot_zeroes_masked_rows(self):
        seq = TokenSequence([1, 0], vocab_size=3, pad_mask=[True, False])
        oh = seq.onehot()
        assert np.array_equal(oh[0], [0, 1, 0])
        assert np.array_equal(oh[1], [0, 0, 0])
