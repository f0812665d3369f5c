"""Perplexity and recovery-rate reporting with length buckets.

Perplexity is defined from the final-step predictive distribution (where
the transition kernel equals the prediction exactly) and pooled over all
unmasked tokens in a bucket, so it equals exp(per-token cross-entropy).
Recovery is the percent of designed tokens matching the target, reported
as the bucket median.  Every report carries a prior-only baseline row: the
encoder argmax as the design and the encoder softmax for perplexity.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bridge import TokenSequence
from .prior import PairedExample, encode_prior, encoder_prob_rows
from .sampling import SampleMode, rollout
from .training import InferenceBundle

SHORT_MAX_LEN = 100


def worker_count() -> int:
    """Parallel map width, capped by the BRIDGEKIT_THREADS env var."""
    cap = os.environ.get("BRIDGEKIT_THREADS", "")
    try:
        cap_val = int(cap)
    except ValueError:
        cap_val = 0
    hw = os.cpu_count() or 1
    return max(1, min(cap_val, hw)) if cap_val > 0 else hw


def recovery_rate(designed: TokenSequence, y: TokenSequence) -> float:
    """100 * matching unmasked positions / unmasked count."""
    if len(designed) != len(y):
        raise ValueError("designed and target lengths differ")
    m = y.pad_mask
    total = int(m.sum())
    if total == 0:
        return 0.0
    hits = int((designed.tokens[m] == y.tokens[m]).sum())
    return 100.0 * hits / total


def perplexity(tables, ys: list[TokenSequence], epsilon: float = 0.0) -> float:
    """exp of the pooled mean negative log-probability of the targets.

    ``tables`` holds one (n, K) probability matrix (or ProbTable) per
    example; pooling runs over every unmasked token in the collection.
    """
    nlls = []
    for table, y in zip(tables, ys):
        probs = np.asarray(table.probs if hasattr(table, "probs") else table,
                           dtype=np.float64)
        if probs.shape != (len(y), y.vocab_size):
            raise ValueError("table shape must be (n, K)")
        m = y.pad_mask
        picked = probs[np.flatnonzero(m), y.tokens[m]]
        nlls.append(-np.log(picked + epsilon))
    pooled = np.concatenate(nlls) if nlls else np.array([])
    if pooled.size == 0:
        raise ValueError("perplexity needs at least one unmasked token")
    return float(np.exp(pooled.mean()))


@dataclass
class BucketStats:
    n_examples: int
    perplexity: float
    median_recovery_pct: float
    prior_perplexity: float
    prior_median_recovery_pct: float


@dataclass
class MetricsReport:
    buckets: dict[str, BucketStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: vars(stats) for name, stats in self.buckets.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv_rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for name, stats in sorted(self.buckets.items()):
            for metric in ("perplexity", "median_recovery_pct",
                           "prior_perplexity", "prior_median_recovery_pct"):
                rows.append((name, metric, getattr(stats, metric)))
            rows.append((name, "n_examples", float(stats.n_examples)))
        return rows

    def to_text_table(self) -> str:
        header = f"{'bucket':<14} {'n':>6} {'perplexity':>11} {'recovery%':>10} " \
                 f"{'prior ppl':>10} {'prior rec%':>10}"
        lines = [header, "-" * len(header)]
        for name, s in sorted(self.buckets.items()):
            lines.append(
                f"{name:<14} {s.n_examples:>6d} {s.perplexity:>11.4f} "
                f"{s.median_recovery_pct:>10.2f} {s.prior_perplexity:>10.4f} "
                f"{s.prior_median_recovery_pct:>10.2f}")
        return "\n".join(lines) + "\n"


@dataclass
class ExampleEval:
    example_id: str
    length: int
    tags: tuple[str, ...]
    recovery: float
    prior_recovery: float
    nll_tokens: np.ndarray        # final-step -log p(y) per unmasked token
    prior_nll_tokens: np.ndarray


def evaluate_example(ex: PairedExample, bundle: InferenceBundle,
                     seed_key: tuple, tags: tuple[str, ...] = ()) -> ExampleEval:
    rng = np.random.default_rng(list(seed_key))
    res = rollout(ex.s_features, bundle, 1, rng,
                  mode=SampleMode.GREEDY_FINAL, pad_mask=ex.y.pad_mask)[0]
    designed = res.tokens
    prior = encode_prior(ex.s_features, bundle.encoder, ex.y.pad_mask, strict=False)
    m = ex.y.pad_mask
    idx = np.flatnonzero(m)
    final_nll = -np.log(res.final_probs[idx, ex.y.tokens[m]])
    prior_probs = encoder_prob_rows(ex.s_features, bundle.encoder)
    prior_nll = -np.log(prior_probs[idx, ex.y.tokens[m]] + 1e-300)
    return ExampleEval(
        example_id=ex.id, length=int(m.sum()), tags=tags,
        recovery=recovery_rate(designed, ex.y),
        prior_recovery=recovery_rate(prior, ex.y),
        nll_tokens=final_nll, prior_nll_tokens=prior_nll,
    )


def _bucket_stats(evals: list[ExampleEval]) -> Optional[BucketStats]:
    if not evals:
        return None
    nll = np.concatenate([e.nll_tokens for e in evals])
    prior_nll = np.concatenate([e.prior_nll_tokens for e in evals])
    return BucketStats(
        n_examples=len(evals),
        perplexity=float(np.exp(nll.mean())),
        median_recovery_pct=float(np.median([e.recovery for e in evals])),
        prior_perplexity=float(np.exp(prior_nll.mean())),
        prior_median_recovery_pct=float(np.median([e.prior_recovery for e in evals])),
    )


def evaluate(
    bundle: InferenceBundle,
    examples: list[PairedExample],
    seed: int = 0,
    task_tag: Optional[str] = None,
) -> MetricsReport:
    """Greedy-final designs and final-step perplexity over a split.

    Deterministic regardless of worker count: each example owns a generator
    derived from (seed, index).  Empty buckets are omitted from the report
    rather than reported as zero.
    """
    if not examples:
        raise ValueError("evaluate needs a nonempty split")
    tags = (task_tag,) if task_tag else ()

    def run(i_ex):
        i, ex = i_ex
        return evaluate_example(ex, bundle, (seed, i), tags)

    workers = worker_count()
    if workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            evals = list(pool.map(run, enumerate(examples)))
    else:
        evals = [run(item) for item in enumerate(examples)]

    report = MetricsReport()
    families = {
        "All": evals,
        "Short": [e for e in evals if e.length <= SHORT_MAX_LEN],
        "Long": [e for e in evals if e.length > SHORT_MAX_LEN],
    }
    if task_tag:
        families[f"task:{task_tag}"] = evals
    for name, group in families.items():
        stats = _bucket_stats(group)
        if stats is not None:
            report.buckets[name] = stats
    return report
