"""Training objectives for the bridge approximator.

Two objectives are provided: the variational-bound per-step KL between the
reference kernel (built from the true target) and the approximated kernel
(built from the predicted target distribution), and the reparameterized
simplified cross-entropy, which charges only positions that still carry the
prior token.  ``joint_kl_identity_check`` connects the two through the
jump-augmented joint law.

Functions here are pure numpy and are the reference implementations; the
trainer rebuilds the same formulas on autodiff tensors and is tested against
these values.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .bridge import BridgeSchedule, BridgeState, TokenSequence
from .errors import InvalidStateError


class Objective(str, Enum):
    VARIATIONAL_BOUND = "vlb"
    SIMPLIFIED_CE = "sce"


class LambdaMode(str, Enum):
    CONSTANT_ONE = "one"
    ONE_MINUS_BETA = "one_minus_beta"


@dataclass(frozen=True)
class LossConfig:
    objective: Objective = Objective.SIMPLIFIED_CE
    lambda_mode: LambdaMode = LambdaMode.CONSTANT_ONE
    epsilon: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        object.__setattr__(self, "lambda_mode", LambdaMode(self.lambda_mode))
        if not 0.0 < self.epsilon <= 1e-6:
            raise ValueError("epsilon must lie in (0, 1e-6]")

    def step_weight(self, beta_t: float) -> float:
        if self.lambda_mode is LambdaMode.ONE_MINUS_BETA:
            return 1.0 - float(beta_t)
        return 1.0


def categorical_kl(p: np.ndarray, q: np.ndarray, epsilon: float = 1e-10) -> float:
    """``sum_k p_k log((p_k + eps) / (q_k + eps))`` with 0 log 0 = 0.

    ``epsilon = 0`` gives the exact KL (oracle use); both inputs must be
    normalized.  Clamping inside the ratio keeps boundary simplexes finite
    and deterministic.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be 1-d vectors of equal length")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("p and q must sum to 1 within 1e-9")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise ValueError("probabilities must be nonnegative")
    mask = p > 0.0
    terms = p[mask] * (np.log(p[mask] + epsilon) - np.log(q[mask] + epsilon))
    # KL of normalized inputs is nonnegative; tiny negatives are pure
    # epsilon/rounding artifacts, floored so the invariant holds exactly.
    return max(float(terms.sum()), 0.0)


def _kernel_rows(z_onehot: np.ndarray, target_rows: np.ndarray, beta_t: float) -> np.ndarray:
    """Rows ``beta_t * z + (1 - beta_t) * target`` per position."""
    return beta_t * z_onehot + (1.0 - beta_t) * target_rows


def _prob_rows(phi) -> np.ndarray:
    """Accept a ProbTable or a raw (n, K) array of simplex rows."""
    return np.asarray(phi.probs if hasattr(phi, "probs") else phi, dtype=np.float64)


def vlb_step_loss(
    z_t: TokenSequence,
    y: TokenSequence,
    phi,
    t: int,
    schedule: BridgeSchedule,
    epsilon: float = 1e-10,
) -> float:
    """Mean per-position KL between reference and approximated kernels at step t.

    The Monte Carlo variational-bound estimate of the negative log-likelihood
    is T times this quantity averaged over uniformly sampled t.
    """
    if len(z_t) != len(y) or z_t.vocab_size != y.vocab_size:
        raise ValueError("z_t and y must share length and vocab")
    probs = _prob_rows(phi)
    if probs.shape != (len(y), y.vocab_size):
        raise ValueError("phi shape must be (n, K)")
    if t < 0 or t >= schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T - 1}]")
    beta_t = float(schedule.beta[t])
    ref = _kernel_rows(z_t.onehot(), y.onehot(), beta_t)
    approx = _kernel_rows(z_t.onehot(), probs, beta_t)
    idx = np.flatnonzero(y.pad_mask)
    if idx.size == 0:
        return 0.0
    total = sum(categorical_kl(ref[i], approx[i], epsilon) for i in idx)
    return float(total / idx.size)


def simplified_ce_loss(
    state: BridgeState,
    y: TokenSequence,
    phi,
    schedule: BridgeSchedule,
    cfg: LossConfig,
) -> float:
    """Reparameterized objective: lambda_t-weighted cross-entropy on
    positions that still carry the prior token (v true); jumped positions
    contribute exactly zero."""
    if state.v is None:
        raise InvalidStateError("simplified_ce_loss needs the mixture latent v")
    if len(state.z) != len(y) or state.z.vocab_size != y.vocab_size:
        raise ValueError("state and y must share length and vocab")
    probs = _prob_rows(phi)
    if probs.shape != (len(y), y.vocab_size):
        raise ValueError("phi shape must be (n, K)")
    lam = cfg.step_weight(schedule.beta[state.t])
    idx = np.flatnonzero(y.pad_mask)
    if idx.size == 0:
        return 0.0
    p_true = probs[idx, y.tokens[idx]]
    nll = -np.log(np.minimum(p_true + cfg.epsilon, 1.0))
    return float(lam * np.sum(state.v[idx] * nll) / idx.size)


def joint_kl_identity_check(
    beta_t: float,
    y: np.ndarray,
    phi_row: np.ndarray,
    epsilon: float = 0.0,
) -> tuple[float, float]:
    """Compare the jump-augmented joint KL against its closed form.

    lhs enumerates the (2 x K)-point joint support of (jump indicator,
    next token) under the reference and approximated kernels for a
    not-yet-jumped position; rhs is ``(1 - beta_t) * KL(y || phi_row)``.
    The two agree exactly: the stay branch is identical under both laws.
    """
    beta_t = float(beta_t)
    if not 0.0 <= beta_t <= 1.0:
        raise ValueError("beta_t must lie in [0, 1]")
    y = np.asarray(y, dtype=np.float64)
    phi_row = np.asarray(phi_row, dtype=np.float64)
    if y.shape != phi_row.shape:
        raise ValueError("y and phi_row must share length")
    K = len(y)
    # Joint support: (stay, k) has mass beta_t * z_k under both laws; the
    # current token index does not matter since identical terms cancel.
    z = np.zeros(K)
    z[0] = 1.0
    lhs = 0.0
    for k in range(K):
        p_stay = beta_t * z[k]
        q_stay = beta_t * z[k]
        if p_stay > 0.0:
            lhs += p_stay * (np.log(p_stay + epsilon) - np.log(q_stay + epsilon))
        p_jump = (1.0 - beta_t) * y[k]
        q_jump = (1.0 - beta_t) * phi_row[k]
        if p_jump > 0.0:
            lhs += p_jump * (np.log(p_jump + epsilon) - np.log(q_jump + epsilon))
    rhs = (1.0 - beta_t) * categorical_kl(y, phi_row, epsilon)
    return float(lhs), float(rhs)
