"""Markov bridge schedules, transition kernels, and exact sampling primitives.

The bridge pins a categorical Markov chain to a fixed start ``x`` (the prior
sequence) and end ``y`` (the target sequence).  Each step applies the rank-1
kernel ``beta_t * I + (1 - beta_t) * y 1^T`` independently to every unmasked
position; the running product ``beta_bar`` gives closed-form marginals at any
step, so intermediate states are sampled without rolling the chain.

All stochastic operations take an explicit ``numpy.random.Generator``;
identical seeds yield identical trajectories.  Transition matrices are never
materialized outside the brute-force check: the hot path uses the rank-1
closed form only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidStateError

PROD_TOL = 1e-12  # beta_bar must match the running product of beta this tightly


@dataclass(frozen=True)
class BridgeSchedule:
    """Per-step schedule ``beta`` and cumulative products ``beta_bar``.

    Invariants: ``beta[0] == 1`` and ``beta[T-1] == 0`` exactly (pinning),
    every ``beta[t]`` lies in [0, 1], and ``beta_bar`` is the non-increasing
    running product of ``beta`` with ``beta_bar[0] == 1``,
    ``beta_bar[T-1] == 0``.
    """

    beta: np.ndarray
    beta_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        beta_bar = np.asarray(self.beta_bar, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "beta_bar", beta_bar)
        if beta.ndim != 1 or beta.shape != beta_bar.shape or len(beta) < 2:
            raise ValueError("schedule needs matching 1-d beta/beta_bar with T >= 2")
        if beta[0] != 1.0 or beta[-1] != 0.0:
            raise ValueError("schedule endpoints must be beta[0]=1, beta[T-1]=0 exactly")
        if np.any(beta < 0.0) or np.any(beta > 1.0):
            raise ValueError("beta values must lie in [0, 1]")
        if beta_bar[0] != 1.0 or beta_bar[-1] != 0.0:
            raise ValueError("beta_bar endpoints must be 1 and 0 exactly")
        if np.any(np.diff(beta_bar) > 0.0):
            raise ValueError("beta_bar must be non-increasing")
        if np.max(np.abs(beta_bar - np.cumprod(beta))) > PROD_TOL:
            raise ValueError("beta_bar must equal the running product of beta")

    @property
    def T(self) -> int:
        return len(self.beta)

    def beta_bar_prev(self, t: int) -> float:
        """``beta_bar[t-1]`` with the convention ``beta_bar[-1] = 1``.

        This is the probability that a position still carries the prior token
        when the chain is observed at step ``t`` (z_0 = x deterministically).
        """
        if t < 0 or t > self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.beta_bar[t - 1])


@dataclass
class TokenSequence:
    """Fixed-vocabulary integer token sequence with a pad mask.

    ``pad_mask`` is True at real positions; masked positions are excluded
    from every loss, metric, and transition.
    """

    tokens: np.ndarray
    vocab_size: int
    pad_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ValueError("tokens must be 1-d")
        if self.pad_mask is None:
            self.pad_mask = np.ones(len(self.tokens), dtype=bool)
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if self.pad_mask.shape != self.tokens.shape:
            raise ValueError("pad_mask length must match tokens")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        live = self.tokens[self.pad_mask]
        if live.size and (live.min() < 0 or live.max() >= self.vocab_size):
            raise ValueError("unmasked token index out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_unmasked(self) -> int:
        return int(self.pad_mask.sum())

    def onehot(self) -> np.ndarray:
        """(n, K) one-hot view; masked rows are all-zero."""
        out = np.zeros((len(self.tokens), self.vocab_size), dtype=np.float64)
        idx = np.flatnonzero(self.pad_mask)
        out[idx, self.tokens[idx]] = 1.0
        return out

    def with_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        return TokenSequence(tokens, self.vocab_size, self.pad_mask.copy())

    def matches(self, other: "TokenSequence") -> bool:
        """Token equality on the shared unmasked positions."""
        m = self.pad_mask
        return bool(np.array_equal(self.tokens[m], other.tokens[m]))


@dataclass
class BridgeState:
    """Chain state at step ``t`` with optional per-position mixture latent.

    ``v[i] = True`` means position ``i`` still equals the prior ``x``;
    ``v`` is only meaningful for states produced by :func:`sample_marginal`.
    """

    t: int
    z: TokenSequence
    v: Optional[np.ndarray] = field(default=None)


def _check_one_hot(vec: np.ndarray, name: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or not np.all((vec == 0.0) | (vec == 1.0)) or vec.sum() != 1.0:
        raise ValueError(f"{name} must be a one-hot vector")
    return vec


def _check_prob(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1]")
    return p


def make_cosine_schedule(T: int) -> BridgeSchedule:
    """Cosine-shaped schedule remapped to exact endpoints.

    The standard cosine cumulative curve is evaluated on a grid over
    ``t = 0..T-1``, per-step ratios give ``beta``, then ``beta[0]`` is clamped
    to 1 and ``beta[T-1]`` to 0 before recomputing ``beta_bar``, so the
    pinning endpoints hold bit-exactly.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError("T must be an integer >= 2")
    s = 0.008
    grid = np.arange(T, dtype=np.float64) / (T - 1)
    curve = np.cos((grid + s) / (1.0 + s) * np.pi / 2.0) ** 2
    curve = curve / curve[0]
    beta = np.ones(T, dtype=np.float64)
    beta[1:] = curve[1:] / curve[:-1]
    beta[0] = 1.0
    beta[-1] = 0.0
    beta = np.clip(beta, 0.0, 1.0)
    return BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))


def transition_distribution(z_t: np.ndarray, y: np.ndarray, beta_t: float) -> np.ndarray:
    """Single-position next-token law ``beta_t * z_t + (1 - beta_t) * y``.

    Closed form of the rank-1 transition matrix applied to ``z_t``; the K x K
    matrix is never materialized.
    """
    z_t = _check_one_hot(z_t, "z_t")
    y = _check_one_hot(y, "y")
    beta_t = _check_prob(beta_t, "beta_t")
    return beta_t * z_t + (1.0 - beta_t) * y


def marginal_distribution(x: np.ndarray, y: np.ndarray, beta_bar_prev: float) -> np.ndarray:
    """Closed-form law of z_t given both endpoints: ``bb * x + (1 - bb) * y``."""
    x = _check_one_hot(x, "x")
    y = _check_one_hot(y, "y")
    bb = _check_prob(beta_bar_prev, "beta_bar_prev")
    return bb * x + (1.0 - bb) * y


def sample_marginal(
    x: TokenSequence,
    y: TokenSequence,
    t: int,
    schedule: BridgeSchedule,
    rng: np.random.Generator,
) -> BridgeState:
    """Sample z_t directly via the two-point mixture latent.

    Per unmasked position an independent ``v_i ~ Bernoulli(beta_bar[t-1])``
    decides whether the position still carries ``x`` (v true) or has jumped
    to ``y``.  ``t = 0`` returns ``x`` deterministically.  Masked positions
    keep the ``x`` token and ``v = True``.
    """
    if x.vocab_size != y.vocab_size or len(x) != len(y):
        raise ValueError("x and y must share length and vocab")
    if not np.array_equal(x.pad_mask, y.pad_mask):
        raise ValueError("x and y must share the pad mask")
    if t < 0 or t > schedule.T - 1:
        raise ValueError(f"step {t} outside [0, {schedule.T - 1}]")
    bb = schedule.beta_bar_prev(t)
    v = rng.random(len(x)) < bb
    v |= ~x.pad_mask
    tokens = np.where(v, x.tokens, y.tokens)
    return BridgeState(t=t, z=x.with_tokens(tokens), v=v)


def reference_step(
    state: BridgeState,
    y: TokenSequence,
    schedule: BridgeSchedule,
    rng: np.random.Generator,
) -> BridgeState:
    """One step of the reference kernel: stay w.p. beta_t, else jump to y.

    Sampling "stay vs jump" reproduces the mixture
    ``beta_t * delta_z + (1 - beta_t) * y`` exactly.  Masked positions take
    the identity transition.
    """
    if state.t >= schedule.T:
        raise InvalidStateError(f"cannot step past t = {schedule.T}")
    z = state.z
    if z.vocab_size != y.vocab_size or len(z) != len(y):
        raise ValueError("state and y must share length and vocab")
    beta_t = float(schedule.beta[state.t])
    stay = rng.random(len(z)) < beta_t
    stay |= ~z.pad_mask
    tokens = np.where(stay, z.tokens, y.tokens)
    return BridgeState(t=state.t + 1, z=z.with_tokens(tokens), v=None)


def reference_rollout(
    x: TokenSequence,
    y: TokenSequence,
    schedule: BridgeSchedule,
    rng: np.random.Generator,
) -> BridgeState:
    """Roll the reference kernel from z_0 = x to z_T; ends at y a.s."""
    state = BridgeState(t=0, z=x.with_tokens(x.tokens.copy()), v=None)
    for _ in range(schedule.T):
        state = reference_step(state, y, schedule, rng)
    return state


def cumulative_kernel_check(schedule: BridgeSchedule, y: np.ndarray, t: int) -> float:
    """Brute-force check of the cumulative-product closed form.

    Materializes every ``Q_s = beta_s I + (1 - beta_s) y 1^T`` for
    ``s <= t``, multiplies them explicitly, and returns the max absolute
    deviation from ``beta_bar_t I + (1 - beta_bar_t) y 1^T``.  Oracle use
    only; K is capped to keep the K x K products cheap.
    """
    y = _check_one_hot(y, "y")
    K = len(y)
    if K > 64:
        raise ValueError("cumulative_kernel_check is capped at K <= 64")
    if t < 0 or t >= schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T - 1}]")
    eye = np.eye(K)
    ones = np.ones((1, K))
    prod = np.eye(K)
    for s in range(t + 1):
        q_s = schedule.beta[s] * eye + (1.0 - schedule.beta[s]) * np.outer(y, ones)
        prod = q_s @ prod
    bb = schedule.beta_bar[t]
    closed = bb * eye + (1.0 - bb) * np.outer(y, ones)
    return float(np.max(np.abs(prod - closed)))


def schedule_table(schedule: BridgeSchedule) -> str:
    """Plain-text (step, beta, beta_bar) table for CLI inspection."""
    lines = ["step  beta                    beta_bar"]
    for t in range(schedule.T):
        lines.append(f"{t:<5d} {schedule.beta[t]:<23.17g} {schedule.beta_bar[t]:.17g}")
    return "\n".join(lines) + "\n"
