"""Inference: start at the deterministic prior and refine through the
approximated kernel.

Each step predicts the target distribution and samples the next token from
``beta_t * delta_current + (1 - beta_t) * prediction`` per position.  The
final schedule value is 0, so the last transition distribution equals the
prediction row-for-row; GreedyFinal mode exploits that by taking the
argmax there instead of sampling.  Rollouts are vectorized across repeats,
and every repeat of an example draws from one generator in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .bridge import TokenSequence
from .models import CondBatch, sinusoidal_time_features
from .prior import encode_prior
from .training import InferenceBundle, load_inference_bundle


class SampleMode(str, Enum):
    STOCHASTIC = "stochastic"
    GREEDY_FINAL = "greedy_final"


@dataclass
class SampleResult:
    tokens: TokenSequence
    mean_log_prob: float          # under the final-step prediction, for ranking
    final_probs: np.ndarray       # (n, K) last predictive table


def _categorical_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; probs (..., K), u uniform of probs.shape[:-1]."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return (u[..., None] > cdf).sum(axis=-1)


def _resolve(bundle) -> InferenceBundle:
    if isinstance(bundle, InferenceBundle):
        return bundle
    return load_inference_bundle(bundle)


def rollout(
    s_features: np.ndarray,
    bundle: InferenceBundle,
    count: int,
    rng: np.random.Generator,
    mode: SampleMode = SampleMode.STOCHASTIC,
    pad_mask: Optional[np.ndarray] = None,
) -> list[SampleResult]:
    """``count`` independent refinements of one condition, vectorized.

    Identity transitions are forced on masked positions.  The per-sample
    ranking score is the mean log-probability of the returned tokens under
    the final-step prediction.
    """
    mode = SampleMode(mode)
    schedule = bundle.schedule
    arch = bundle.arch
    s_features = np.asarray(s_features, dtype=np.float64)
    n = s_features.shape[0]
    if pad_mask is None:
        pad_mask = np.ones(n, dtype=bool)
    prior = encode_prior(s_features, bundle.encoder, pad_mask)
    z = np.tile(prior.tokens, (count, 1))
    mask_b = np.tile(pad_mask, (count, 1))
    live = s_features[pad_mask]
    pooled = live.mean(axis=0) if live.size else np.zeros(s_features.shape[1])
    s_feats_b = np.tile(s_features, (count, 1, 1))
    pooled_b = np.tile(pooled, (count, 1))
    probs = None
    for t in range(schedule.T):
        t_feats = np.tile(sinusoidal_time_features(t, schedule.T, arch.d_time),
                          (count, 1))
        cond = CondBatch(t_feats=t_feats, s_feats=s_feats_b, s_pooled=pooled_b)
        probs = bundle.model.predict_batch(z, mask_b, cond)
        beta_t = float(schedule.beta[t])
        final_step = t == schedule.T - 1
        if final_step and mode is SampleMode.GREEDY_FINAL:
            proposal = np.argmax(probs, axis=-1)
            z_next = proposal  # beta_{T-1} = 0: kernel equals the prediction
        else:
            u_stay = rng.random(z.shape)
            u_cat = rng.random(z.shape)
            proposal = _categorical_rows(probs, u_cat)
            z_next = np.where(u_stay < beta_t, z, proposal)
        z = np.where(mask_b, z_next, z)
    results = []
    for i in range(count):
        toks = TokenSequence(z[i], vocab_size=arch.vocab_size, pad_mask=pad_mask.copy())
        picked = probs[i][np.arange(n), z[i]]
        live_lp = np.log(picked[pad_mask]) if pad_mask.any() else np.array([0.0])
        results.append(SampleResult(tokens=toks,
                                    mean_log_prob=float(live_lp.mean()),
                                    final_probs=probs[i]))
    return results


def sample(
    s_features: np.ndarray,
    bundle,
    T: int,
    rng: np.random.Generator,
    mode: SampleMode = SampleMode.STOCHASTIC,
    pad_mask: Optional[np.ndarray] = None,
) -> TokenSequence:
    """One refined sequence; ``T`` must match the checkpoint schedule."""
    bundle = _resolve(bundle)
    if T != bundle.schedule.T:
        raise ValueError(
            f"requested T={T} but checkpoint schedule has T={bundle.schedule.T}")
    return rollout(s_features, bundle, 1, rng, mode, pad_mask)[0].tokens


def sample_many(
    s_features: np.ndarray,
    bundle,
    count: int,
    rng: np.random.Generator,
    mode: SampleMode = SampleMode.STOCHASTIC,
    pad_mask: Optional[np.ndarray] = None,
) -> list[SampleResult]:
    """Independent stochastic samples with ranking scores."""
    if count < 1:
        raise ValueError("count must be >= 1")
    bundle = _resolve(bundle)
    return rollout(s_features, bundle, count, rng, mode, pad_mask)
