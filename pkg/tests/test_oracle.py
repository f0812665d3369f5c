"""Brute-force verifiers: enumeration totals, bound soundness, identities."""

import numpy as np
import pytest

from bridgekit.bridge import BridgeSchedule, TokenSequence, make_cosine_schedule
from bridgekit.errors import OracleBoundError
from bridgekit.oracle import (enumerate_trajectories, exact_nll, exact_vlb,
                              random_predict_fn, random_schedule,
                              reference_predict, run_suite,
                              verify_proposition1)


def tiny_instance(rng, max_k=4, max_n=2, max_t=4):
    K = int(rng.integers(2, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    T = int(rng.integers(2, max_t + 1))
    sched = random_schedule(T, rng)
    x = TokenSequence(rng.integers(0, K, n), K)
    y = TokenSequence(rng.integers(0, K, n), K)
    return K, n, T, sched, x, y


class TestEnumerateTrajectories:
    def test_reference_kernel_pins(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            K, n, T, sched, x, y = tiny_instance(rng)
            law = enumerate_trajectories(x, y, sched)
            target = tuple(int(v) for v in y.tokens)
            assert abs(law.final.get(target, 0.0) - 1.0) <= 1e-12

    def test_reference_marginals_match_closed_form(self):
        rng = np.random.default_rng(1)
        for _ in range(15):
            K, n, T, sched, x, y = tiny_instance(rng)
            law = enumerate_trajectories(x, y, sched)
            for t in range(T + 1):
                bb = sched.beta_bar_prev(t) if t < T else 0.0
                if t == T:
                    bb = sched.beta_bar[T - 1]  # equals 0 by pinning
                for state, p in law.marginals[t].items():
                    expect = 1.0
                    for xi, yi, si in zip(x.tokens, y.tokens, state):
                        if xi == yi:
                            expect *= float(si == xi)
                        else:
                            expect *= bb * (si == xi) + (1 - bb) * (si == yi)
                    assert abs(p - expect) < 1e-12

    def test_onehot_predictor_forces_its_target(self):
        rng = np.random.default_rng(2)
        K, n = 3, 2
        sched = make_cosine_schedule(3)
        x = TokenSequence([0, 1], K)
        y = TokenSequence([2, 2], K)
        y_star = TokenSequence([1, 0], K)
        law = enumerate_trajectories(x, y, sched, reference_predict(y_star))
        assert abs(law.final.get((1, 0), 0.0) - 1.0) <= 1e-12

    def test_path_measure_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            K, n, T, sched, x, y = tiny_instance(rng)
            predict = random_predict_fn(K, seed=int(rng.integers(1000)))
            law = enumerate_trajectories(x, y, sched, predict)
            assert abs(law.total_mass() - 1.0) <= 1e-12

    def test_bounds_enforced_with_size_estimate(self):
        sched = make_cosine_schedule(5)
        x = TokenSequence([0], 5)
        with pytest.raises(OracleBoundError, match="paths"):
            enumerate_trajectories(x, x, sched)  # T = 5 > 4
        big = TokenSequence([0, 0, 0], 2)
        with pytest.raises(OracleBoundError):
            enumerate_trajectories(big, big, make_cosine_schedule(3))


class TestExactNll:
    def test_perfect_predictor_zero(self):
        x = TokenSequence([0, 1], 3)
        y = TokenSequence([2, 1], 3)
        sched = make_cosine_schedule(4)
        assert exact_nll(x, y, reference_predict(y), sched) == pytest.approx(0.0)

    def test_uniform_two_step_chain(self):
        """K=2, T=2, n=1, beta=[1,0]: the chain ends uniform, NLL = log 2."""
        sched = BridgeSchedule(beta=np.array([1.0, 0.0]),
                               beta_bar=np.array([1.0, 0.0]))
        x = TokenSequence([0], 2)
        y = TokenSequence([1], 2)
        uniform = lambda z, t: np.full((1, 2), 0.5)
        assert abs(exact_nll(x, y, uniform, sched) - np.log(2.0)) < 1e-12

    def test_vlb_bound_soundness_random(self):
        rng = np.random.default_rng(4)
        worst = -np.inf
        for i in range(60):
            K, n, T, sched, x, y = tiny_instance(rng)
            predict = random_predict_fn(K, seed=i)
            nll = exact_nll(x, y, predict, sched)
            vlb = exact_vlb(x, y, predict, sched)
            worst = max(worst, nll - vlb)
        assert worst <= 1e-9

    def test_vlb_equals_nll_on_perfect_predictor(self):
        x = TokenSequence([0, 1], 3)
        y = TokenSequence([2, 0], 3)
        sched = make_cosine_schedule(4)
        predict = reference_predict(y)
        assert exact_vlb(x, y, predict, sched) == pytest.approx(0.0, abs=1e-12)


class TestVerifyProposition1:
    def test_perfect_phi_all_zero(self):
        y = np.eye(3)[1]
        rep = verify_proposition1(0.4, 0.5, y, y)
        assert rep.case_split == rep.simplified == rep.joint_enumerated == 0.0
        assert rep.marginal_kl == 0.0

    def test_hand_value(self):
        rep = verify_proposition1(0.4, 0.5, np.eye(3)[1],
                                  np.array([0.25, 0.5, 0.25]))
        expect = 0.5 * 0.6 * (-np.log(0.5))
        assert abs(rep.case_split - expect) < 1e-12
        assert abs(rep.case_split - 0.20794) < 5e-6
        assert rep.agree(1e-10)

    def test_fully_transformed_position_is_free(self):
        rep = verify_proposition1(0.4, 0.0, np.eye(4)[2],
                                  np.array([0.4, 0.2, 0.2, 0.2]))
        assert rep.case_split == rep.simplified == rep.joint_enumerated == 0.0

    def test_identity_over_random_draws(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            K = int(rng.integers(2, 9))
            y = np.zeros(K)
            y[rng.integers(0, K)] = 1.0
            phi = rng.dirichlet(np.ones(K)) + 1e-9
            phi /= phi.sum()
            rep = verify_proposition1(rng.random(), rng.random(), y, phi)
            assert rep.agree(1e-10)

    def test_joint_dominates_marginal_on_unjumped_branch(self):
        from bridgekit.losses import joint_kl_identity_check
        rng = np.random.default_rng(6)
        for _ in range(200):
            K = int(rng.integers(2, 9))
            y = np.zeros(K)
            y[rng.integers(0, K)] = 1.0
            phi = rng.dirichlet(np.ones(K)) + 1e-9
            phi /= phi.sum()
            beta_t = float(rng.random())
            rep = verify_proposition1(beta_t, 1.0, y, phi)
            joint_branch, _ = joint_kl_identity_check(beta_t, y, phi)
            assert rep.marginal_kl <= joint_branch + 1e-12


class TestSuites:
    def test_all_suites_pass(self):
        results = run_suite("all", seed=0)
        failures = [r for r in results if not r.ok]
        assert not failures, failures

    def test_unknown_suite_rejected(self):
        with pytest.raises(ValueError):
            run_suite("nope")
