"""Brute-force verifiers for every closed-form claim the engine makes.

Everything here trades efficiency for certainty: trajectory laws come from
literal path enumeration, expectations from exhaustive sums, and the
variational bound from the exact per-step marginals, so the checks carry
no sampling noise.  Hard size bounds keep the K^(n*T) path count below
65536 (K <= 4, n <= 2, T <= 4).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bridge import BridgeSchedule, TokenSequence, make_cosine_schedule
from .errors import OracleBoundError
from .losses import categorical_kl, joint_kl_identity_check

MAX_K = 4
MAX_N = 2
MAX_T = 4

PredictFn = Callable[[np.ndarray, int], np.ndarray]  # (z tokens, t) -> (n, K) rows


def _check_bounds(K: int, n: int, T: int):
    if K > MAX_K or n > MAX_N or T > MAX_T:
        raise OracleBoundError(
            f"instance K={K}, n={n}, T={T} exceeds enumeration bounds "
            f"(K<={MAX_K}, n<={MAX_N}, T<={MAX_T}); would enumerate "
            f"{K ** (n * T)} paths"
        )


def reference_predict(y: TokenSequence) -> PredictFn:
    """The reference kernel as a predictor: probability one on the target."""
    onehot = y.onehot()

    def predict(z_tokens: np.ndarray, t: int) -> np.ndarray:
        return onehot

    return predict


def _kernel_rows(z_tokens: np.ndarray, t: int, schedule: BridgeSchedule,
                 predict: PredictFn, K: int) -> np.ndarray:
    beta_t = float(schedule.beta[t])
    rows = predict(z_tokens, t)
    out = (1.0 - beta_t) * rows
    out[np.arange(len(z_tokens)), z_tokens] += beta_t
    return out


@dataclass
class TrajectoryLaw:
    """Exact path measure of a pinned chain started at x."""

    states: list[tuple[int, ...]]
    path_measure: dict[tuple, float]        # (z_1..z_T) -> probability
    marginals: list[dict[tuple, float]]     # per t = 0..T, state -> probability

    @property
    def final(self) -> dict[tuple, float]:
        return self.marginals[-1]

    def total_mass(self) -> float:
        return sum(self.path_measure.values())


def enumerate_trajectories(
    x: TokenSequence,
    y: TokenSequence,
    schedule: BridgeSchedule,
    predict: Optional[PredictFn] = None,
) -> TrajectoryLaw:
    """Enumerates all K^(n*T) paths, multiplying per-step transition
    probabilities; ``predict=None`` uses the reference kernel built from y."""
    K = x.vocab_size
    n = len(x)
    T = schedule.T
    _check_bounds(K, n, T)
    if predict is None:
        predict = reference_predict(y)
    states = [tuple(s) for s in itertools.product(range(K), repeat=n)]
    row_cache: dict[tuple[int, tuple], np.ndarray] = {}

    def rows_at(state: tuple, t: int) -> np.ndarray:
        key = (t, state)
        if key not in row_cache:
            row_cache[key] = _kernel_rows(np.asarray(state, dtype=np.int64),
                                          t, schedule, predict, K)
        return row_cache[key]

    start = tuple(int(v) for v in x.tokens)
    path_measure: dict[tuple, float] = {}
    marginals: list[dict[tuple, float]] = [dict() for _ in range(T + 1)]
    marginals[0][start] = 1.0
    for path in itertools.product(states, repeat=T):
        prob = 1.0
        prev = start
        for t, state in enumerate(path):
            rows = rows_at(prev, t)
            step_p = float(np.prod(rows[np.arange(n), np.asarray(state)]))
            prob *= step_p
            if prob == 0.0:
                break
            prev = state
        if prob == 0.0:
            continue
        path_measure[path] = path_measure.get(path, 0.0) + prob
        for t, state in enumerate(path):
            marginals[t + 1][state] = marginals[t + 1].get(state, 0.0) + prob
    return TrajectoryLaw(states=states, path_measure=path_measure,
                         marginals=marginals)


def exact_nll(x: TokenSequence, y: TokenSequence, predict: PredictFn,
              schedule: BridgeSchedule) -> float:
    """-log of the enumerated probability that the approximated chain
    started at x ends exactly at y."""
    law = enumerate_trajectories(x, y, schedule, predict)
    target = tuple(int(v) for v in y.tokens)
    p = law.final.get(target, 0.0)
    if p <= 0.0:
        return float("inf")
    return -float(np.log(p))


def _reference_state_marginal(x: TokenSequence, y: TokenSequence,
                              bb_prev: float) -> dict[tuple, float]:
    """Product of per-position two-point marginals of the reference bridge."""
    supports = []
    for xi, yi in zip(x.tokens, y.tokens):
        if xi == yi:
            supports.append([(int(xi), 1.0)])
        else:
            supports.append([(int(xi), bb_prev), (int(yi), 1.0 - bb_prev)])
    out: dict[tuple, float] = {}
    for combo in itertools.product(*supports):
        state = tuple(tok for tok, _ in combo)
        prob = float(np.prod([p for _, p in combo]))
        if prob > 0.0:
            out[state] = out.get(state, 0.0) + prob
    return out


def exact_vlb(x: TokenSequence, y: TokenSequence, predict: PredictFn,
              schedule: BridgeSchedule) -> float:
    """Exact (non-Monte-Carlo) variational bound on the chain NLL.

    Sums the expected per-step KL between reference and approximated
    kernels over all steps, with the z_t expectation taken against the
    closed-form product marginal; no epsilon clamping.
    """
    K = x.vocab_size
    n = len(x)
    T = schedule.T
    _check_bounds(K, n, T)
    ref_predict = reference_predict(y)
    total = 0.0
    for t in range(T):
        bb_prev = schedule.beta_bar_prev(t)
        weights = _reference_state_marginal(x, y, bb_prev)
        for state, w in weights.items():
            z = np.asarray(state, dtype=np.int64)
            ref_rows = _kernel_rows(z, t, schedule, ref_predict, K)
            q_rows = _kernel_rows(z, t, schedule, predict, K)
            kl = sum(categorical_kl(ref_rows[i], q_rows[i], epsilon=0.0)
                     for i in range(n))
            total += w * kl
    return float(total)


@dataclass
class Prop1Report:
    """Three routes to the reparameterized per-step loss plus the
    marginal KL they stand in for."""

    case_split: float        # analytic expectation of the case-split KL
    simplified: float        # lambda_t * beta_bar_prev * (-y . log phi)
    joint_enumerated: float  # jump-augmented joint KL, enumerated, averaged
    marginal_kl: float       # per-step KL of the plain variational bound
    max_discrepancy: float

    def agree(self, tol: float = 1e-10) -> bool:
        return self.max_discrepancy <= tol


def verify_proposition1(beta_t: float, beta_bar_prev: float, y: np.ndarray,
                        phi_row: np.ndarray,
                        x_index: Optional[int] = None) -> Prop1Report:
    """Checks the simplified-loss identity on one position.

    (a) expectation over the mixture latent of the case-split KL, (b) the
    simplified loss with lambda = 1 - beta, (c) the enumerated
    jump-augmented joint KL averaged the same way; all three must agree.
    The marginal KL (a not-yet-jumped position under the plain bound) is
    reported for the data-processing comparison: joint >= marginal.
    """
    beta_t = float(beta_t)
    bb = float(beta_bar_prev)
    if not 0.0 <= bb <= 1.0:
        raise ValueError("beta_bar_prev must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    phi_row = np.asarray(phi_row, dtype=np.float64)
    y_idx = int(np.argmax(y))
    if x_index is None:
        x_index = next(i for i in range(len(y)) if i != y_idx)
    kl_y_phi = categorical_kl(y, phi_row, epsilon=0.0)
    case_split = bb * (1.0 - beta_t) * kl_y_phi
    simplified = (1.0 - beta_t) * bb * (-float(np.log(phi_row[y_idx])))
    joint_lhs, _ = joint_kl_identity_check(beta_t, y, phi_row, epsilon=0.0)
    joint_enumerated = bb * joint_lhs + (1.0 - bb) * 0.0
    x_oh = np.zeros_like(y)
    x_oh[x_index] = 1.0
    marg_ref = beta_t * x_oh + (1.0 - beta_t) * y
    marg_q = beta_t * x_oh + (1.0 - beta_t) * phi_row
    marginal_kl = categorical_kl(marg_ref, marg_q, epsilon=0.0)
    vals = (case_split, simplified, joint_enumerated)
    max_disc = max(abs(a - b) for a in vals for b in vals)
    return Prop1Report(case_split=case_split, simplified=simplified,
                       joint_enumerated=joint_enumerated,
                       marginal_kl=marginal_kl, max_discrepancy=max_disc)


# verification suites ---------------------------------------------------------


@dataclass
class CheckResult:
    suite: str
    name: str
    ok: bool
    detail: str


def random_schedule(T: int, rng: np.random.Generator) -> BridgeSchedule:
    beta = np.empty(T)
    beta[0] = 1.0
    beta[-1] = 0.0
    if T > 2:
        beta[1:-1] = rng.random(T - 2)
    return BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))


def random_predict_fn(K: int, seed: int) -> PredictFn:
    """Deterministic strictly-positive random tables keyed by (t, state)."""

    def predict(z_tokens: np.ndarray, t: int) -> np.ndarray:
        rows = []
        for i, tok in enumerate(z_tokens):
            rng = np.random.default_rng([seed, t, i, int(tok)])
            rows.append(rng.dirichlet(np.ones(K)) + 1e-6)
        rows = np.asarray(rows)
        return rows / rows.sum(axis=1, keepdims=True)

    return predict


def _suite_kernels(seed: int) -> list[CheckResult]:
    from .bridge import cumulative_kernel_check, reference_rollout, sample_marginal
    rng = np.random.default_rng(seed)
    results = []
    failures = 0
    for _ in range(200):
        K = int(rng.integers(2, 9))
        n = int(rng.integers(1, 7))
        T = int(rng.integers(2, 9))
        sched = random_schedule(T, rng)
        x = TokenSequence(rng.integers(0, K, n), K)
        y = TokenSequence(rng.integers(0, K, n), K)
        end = reference_rollout(x, y, sched, rng)
        if not end.z.matches(y):
            failures += 1
    results.append(CheckResult("kernels", "pinning-200-rollouts", failures == 0,
                               f"{failures} rollouts missed the target"))
    worst = 0.0
    for _ in range(20):
        K = int(rng.integers(2, 65))
        T = int(rng.integers(2, 12))
        sched = random_schedule(T, rng)
        y = np.zeros(K)
        y[rng.integers(0, K)] = 1.0
        for t in range(T):
            worst = max(worst, cumulative_kernel_check(sched, y, t))
    results.append(CheckResult("kernels", "cumulative-closed-form", worst <= 1e-12,
                               f"max abs deviation {worst:.3e}"))
    worst_tv = 0.0
    for _ in range(3):
        K = int(rng.integers(2, 9))
        sched = make_cosine_schedule(int(rng.integers(3, 9)))
        t = int(rng.integers(1, sched.T))
        n = 100_000
        x = TokenSequence(np.zeros(n, dtype=np.int64), K)
        y = TokenSequence(np.ones(n, dtype=np.int64), K)
        state = sample_marginal(x, y, t, sched, rng)
        frac_x = float((state.z.tokens == 0).mean())
        bb = sched.beta_bar_prev(t)
        worst_tv = max(worst_tv, abs(frac_x - bb))
    results.append(CheckResult("kernels", "marginal-consistency", worst_tv < 0.01,
                               f"max per-position TV {worst_tv:.4f}"))
    ok = True
    for T in (2, 3, 5, 25, 50):
        s = make_cosine_schedule(T)
        ok &= s.beta[0] == 1.0 and s.beta[-1] == 0.0
        ok &= s.beta_bar[0] == 1.0 and s.beta_bar[-1] == 0.0
    results.append(CheckResult("kernels", "schedule-endpoints", ok,
                               "bit-exact endpoints over T in {2,3,5,25,50}"))
    return results


def _suite_prop1(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_disc = 0.0
    for _ in range(300):
        K = int(rng.integers(2, 9))
        y = np.zeros(K)
        y[rng.integers(0, K)] = 1.0
        phi = rng.dirichlet(np.ones(K)) + 1e-9
        phi /= phi.sum()
        rep = verify_proposition1(rng.random(), rng.random(), y, phi)
        worst_disc = max(worst_disc, rep.max_discrepancy)
    results = [CheckResult("prop1", "three-route-identity", worst_disc <= 1e-10,
                           f"max discrepancy {worst_disc:.3e}")]
    # data-processing order on the not-yet-jumped branch
    worst_slack = 0.0
    for _ in range(300):
        K = int(rng.integers(2, 9))
        y = np.zeros(K)
        y[rng.integers(0, K)] = 1.0
        phi = rng.dirichlet(np.ones(K)) + 1e-9
        phi /= phi.sum()
        beta_t = float(rng.random())
        joint, _ = joint_kl_identity_check(beta_t, y, phi, epsilon=0.0)
        x_index = next(i for i in range(K) if y[i] == 0.0)
        x_oh = np.zeros(K)
        x_oh[x_index] = 1.0
        marg = categorical_kl(beta_t * x_oh + (1 - beta_t) * y,
                              beta_t * x_oh + (1 - beta_t) * phi, epsilon=0.0)
        worst_slack = max(worst_slack, marg - joint)
    results.append(CheckResult("prop1", "joint-dominates-marginal",
                               worst_slack <= 1e-12,
                               f"max marginal-over-joint slack {worst_slack:.3e}"))
    return results


def _suite_vlb(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_slack = -np.inf
    mass_err = 0.0
    pin_ok = True
    for i in range(40):
        K = int(rng.integers(2, MAX_K + 1))
        n = int(rng.integers(1, MAX_N + 1))
        T = int(rng.integers(2, MAX_T + 1))
        sched = random_schedule(T, rng)
        x = TokenSequence(rng.integers(0, K, n), K)
        y = TokenSequence(rng.integers(0, K, n), K)
        predict = random_predict_fn(K, seed=seed * 1000 + i)
        nll = exact_nll(x, y, predict, sched)
        vlb = exact_vlb(x, y, predict, sched)
        worst_slack = max(worst_slack, nll - vlb)
        law = enumerate_trajectories(x, y, sched, predict)
        mass_err = max(mass_err, abs(law.total_mass() - 1.0))
        ref_law = enumerate_trajectories(x, y, sched, None)
        target = tuple(int(v) for v in y.tokens)
        pin_ok &= abs(ref_law.final.get(target, 0.0) - 1.0) <= 1e-12
    results = [
        CheckResult("vlb", "bound-soundness", worst_slack <= 1e-9,
                    f"max (nll - vlb) = {worst_slack:.3e}"),
        CheckResult("vlb", "path-measure-total", mass_err <= 1e-12,
                    f"max |mass - 1| = {mass_err:.3e}"),
        CheckResult("vlb", "reference-pinning", pin_ok,
                    "enumerated P(z_T = y) = 1 under the reference kernel"),
    ]
    return results


SUITES = {
    "kernels": _suite_kernels,
    "prop1": _suite_prop1,
    "vlb": _suite_vlb,
}


def run_suite(suite: str, seed: int = 0) -> list[CheckResult]:
    if suite == "all":
        out = []
        for name in SUITES:
            out.extend(SUITES[name](seed))
        return out
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from "
                         f"{sorted(SUITES) + ['all']}")
    return SUITES[suite](seed)
