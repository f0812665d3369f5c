"""Deterministic prior encoder and synthetic condition-to-sequence tasks.

The encoder is a position-wise linear softmax classifier over condition
features; its argmax, with lowest-index tie-breaking, is the hard prior
sequence the bridge starts from.  Three generators stand in for
structure-to-sequence data at desk scale:

* NoisyChannel -- the condition shows the target corrupted at rate rho, so
  position-wise accuracy is capped near 1 - rho.
* Cipher      -- the target is a fixed random permutation of the shown code;
  fully learnable per position.
* LocalContext -- the target at i is a fixed random function of the code
  triple (i-1, i, i+1) with cyclic wrap, so a position-wise prior is capped
  by an exactly computable Bayes ceiling while a context-using model is not.

Condition features are laid out as [one-hot code block | sinusoidal
positional block], each ``vocab_size`` wide (d_s = 2K).  The positional
block is what lets cross-attention resolve neighbor positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .bridge import TokenSequence
from .errors import UntrainedEncoderError


class TaskKind(str, Enum):
    NOISY_CHANNEL = "noisy_channel"
    CIPHER = "cipher"
    LOCAL_CONTEXT = "local_context"


@dataclass
class PairedExample:
    """(condition features, target) training record with an optional
    materialized prior sequence."""

    id: str
    s_features: np.ndarray
    y: TokenSequence
    x: Optional[TokenSequence] = None

    def __post_init__(self):
        self.s_features = np.asarray(self.s_features, dtype=np.float64)
        if self.s_features.shape[0] != len(self.y):
            raise ValueError("s_features rows must match target length")
        if self.x is not None and (len(self.x) != len(self.y)
                                   or self.x.vocab_size != self.y.vocab_size):
            raise ValueError("prior x must match target length and vocab")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: TaskKind
    vocab_size: int
    corruption_rate: float = 0.0
    length_min: int = 8
    length_max: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if self.length_min < 1 or self.length_max < self.length_min:
            raise ValueError("need 1 <= length_min <= length_max")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @property
    def d_s(self) -> int:
        return 2 * self.vocab_size

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "vocab_size": self.vocab_size,
            "corruption_rate": self.corruption_rate,
            "length_min": self.length_min, "length_max": self.length_max,
            "seed": self.seed,
        }


def positional_block(n: int, width: int) -> np.ndarray:
    """Sinusoidal per-position features filling the second half of d_s."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    n_freq = max(width // 2, 1)
    freqs = 1.0 / (100.0 ** (np.arange(n_freq, dtype=np.float64) / n_freq))
    ang = pos * freqs[None, :]
    out = np.zeros((n, width), dtype=np.float64)
    out[:, 0 : 2 * n_freq : 2] = np.sin(ang)
    out[:, 1 : 2 * n_freq : 2] = np.cos(ang)
    return out


def _features_from_code(code: np.ndarray, vocab_size: int) -> np.ndarray:
    n = len(code)
    onehot = np.zeros((n, vocab_size), dtype=np.float64)
    onehot[np.arange(n), code] = 1.0
    return np.concatenate([onehot, positional_block(n, vocab_size)], axis=1)


def cipher_permutation(spec: SyntheticTaskSpec) -> np.ndarray:
    return np.random.default_rng(spec.seed).permutation(spec.vocab_size)


def local_context_rule(spec: SyntheticTaskSpec) -> np.ndarray:
    """(K, K, K) table mapping a code triple to the target token."""
    K = spec.vocab_size
    return np.random.default_rng(spec.seed).integers(0, K, size=(K, K, K))


def local_context_prior_ceiling(spec: SyntheticTaskSpec) -> float:
    """Bayes-optimal position-wise accuracy, by exhaustive enumeration.

    A classifier that sees only the middle code symbol predicts the most
    frequent rule output over all (left, right) neighbor pairs; the ceiling
    averages that best case over middle symbols.
    """
    rule = local_context_rule(spec)
    K = spec.vocab_size
    best = 0.0
    for mid in range(K):
        counts = np.bincount(rule[:, mid, :].reshape(-1), minlength=K)
        best += counts.max() / (K * K)
    return best / K


def generate_synthetic(spec: SyntheticTaskSpec, count: int,
                       name_prefix: str = "ex",
                       start_index: int = 0) -> list[PairedExample]:
    """Deterministic corpus: example i is drawn from rng([seed, start + i]).

    Distinct ``start_index`` ranges give disjoint splits of one task.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    K = spec.vocab_size
    perm = cipher_permutation(spec) if spec.kind is TaskKind.CIPHER else None
    rule = local_context_rule(spec) if spec.kind is TaskKind.LOCAL_CONTEXT else None
    out: list[PairedExample] = []
    for i in range(start_index, start_index + count):
        rng = np.random.default_rng([spec.seed, i])
        n = int(rng.integers(spec.length_min, spec.length_max + 1))
        if spec.kind is TaskKind.NOISY_CHANNEL:
            y = rng.integers(0, K, size=n)
            code = y.copy()
            corrupt = rng.random(n) < spec.corruption_rate
            # corrupted positions re-encode a uniformly random wrong token
            shift = rng.integers(1, K, size=n)
            code[corrupt] = (y[corrupt] + shift[corrupt]) % K
        elif spec.kind is TaskKind.CIPHER:
            code = rng.integers(0, K, size=n)
            y = perm[code]
        else:
            code = rng.integers(0, K, size=n)
            y = rule[np.roll(code, 1), code, np.roll(code, -1)]
        out.append(PairedExample(
            id=f"{name_prefix}-{i:06d}",
            s_features=_features_from_code(code, K),
            y=TokenSequence(y, vocab_size=K),
        ))
    return out


def generate_splits(spec: SyntheticTaskSpec,
                    counts: dict[str, int]) -> dict[str, list[PairedExample]]:
    """Disjoint train/valid/test corpora from one task seed."""
    splits = {}
    start = 0
    for split in sorted(counts):
        n = int(counts[split])
        splits[split] = generate_synthetic(spec, n, name_prefix=split,
                                           start_index=start)
        start += n
    return splits


# prior encoder ------------------------------------------------------------


@dataclass
class EncoderParams:
    w: np.ndarray
    b: np.ndarray
    fitted: bool = False

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)

    @classmethod
    def zeros(cls, d_s: int, vocab_size: int) -> "EncoderParams":
        return cls(np.zeros((d_s, vocab_size)), np.zeros(vocab_size), fitted=False)


def encoder_logits(s_features: np.ndarray, params: EncoderParams) -> np.ndarray:
    return np.asarray(s_features, dtype=np.float64) @ params.w + params.b


def encode_prior(s_features: np.ndarray, params: EncoderParams,
                 pad_mask: Optional[np.ndarray] = None,
                 strict: bool = True) -> TokenSequence:
    """Deterministic hard prior: per-position argmax of the position-wise
    classifier, ties broken by lowest token index."""
    if strict and not params.fitted:
        raise UntrainedEncoderError("encoder used before fit in strict mode")
    logits = encoder_logits(s_features, params)
    tokens = np.argmax(logits, axis=1)
    return TokenSequence(tokens, vocab_size=params.w.shape[1], pad_mask=pad_mask)


def encoder_prob_rows(s_features: np.ndarray, params: EncoderParams) -> np.ndarray:
    logits = encoder_logits(s_features, params)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _encoder_grad(s: np.ndarray, y: np.ndarray, params: EncoderParams):
    probs = encoder_prob_rows(s, params)
    probs[np.arange(len(y)), y] -= 1.0
    probs /= len(y)
    return s.T @ probs, probs.sum(axis=0)


def fit_encoder(examples: list[PairedExample], vocab_size: int,
                epochs: int = 60, lr: float = 0.5, seed: int = 0) -> EncoderParams:
    """Full-batch Adam on per-position cross-entropy; seeded and deterministic."""
    if not examples:
        raise ValueError("fit_encoder needs a nonempty split")
    s = np.concatenate([ex.s_features[ex.y.pad_mask] for ex in examples])
    y = np.concatenate([ex.y.tokens[ex.y.pad_mask] for ex in examples])
    params = EncoderParams.zeros(s.shape[1], vocab_size)
    m_w = np.zeros_like(params.w); v_w = np.zeros_like(params.w)
    m_b = np.zeros_like(params.b); v_b = np.zeros_like(params.b)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, epochs + 1):
        g_w, g_b = _encoder_grad(s, y, params)
        m_w = b1 * m_w + (1 - b1) * g_w; v_w = b2 * v_w + (1 - b2) * g_w ** 2
        m_b = b1 * m_b + (1 - b1) * g_b; v_b = b2 * v_b + (1 - b2) * g_b ** 2
        corr1, corr2 = 1 - b1 ** step, 1 - b2 ** step
        params.w -= lr * (m_w / corr1) / (np.sqrt(v_w / corr2) + eps)
        params.b -= lr * (m_b / corr1) / (np.sqrt(v_b / corr2) + eps)
    params.fitted = True
    return params


def encoder_step(examples: list[PairedExample], params: EncoderParams, lr: float):
    """One joint-training gradient step on a minibatch (plain SGD)."""
    s = np.concatenate([ex.s_features[ex.y.pad_mask] for ex in examples])
    y = np.concatenate([ex.y.tokens[ex.y.pad_mask] for ex in examples])
    g_w, g_b = _encoder_grad(s, y, params)
    params.w -= lr * g_w
    params.b -= lr * g_b
    params.fitted = True


def encoder_accuracy(examples: list[PairedExample], params: EncoderParams) -> float:
    hits = 0
    total = 0
    for ex in examples:
        pred = encode_prior(ex.s_features, params, ex.y.pad_mask)
        m = ex.y.pad_mask
        hits += int((pred.tokens[m] == ex.y.tokens[m]).sum())
        total += int(m.sum())
    return hits / max(total, 1)


# dataset files --------------------------------------------------------------


def write_examples(path, examples: list[PairedExample], split: str):
    path = Path(path)
    with open(path, "w") as f:
        for ex in examples:
            rec = {
                "id": ex.id,
                "s_features": ex.s_features.tolist(),
                "y": ex.y.tokens.tolist(),
                "split": split,
            }
            f.write(json.dumps(rec) + "\n")


def read_examples(path, vocab_size: int) -> list[PairedExample]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(PairedExample(
                id=rec["id"],
                s_features=np.asarray(rec["s_features"], dtype=np.float64),
                y=TokenSequence(np.asarray(rec["y"], dtype=np.int64), vocab_size),
            ))
    return out


def write_dataset(out_dir, spec: SyntheticTaskSpec,
                  splits: dict[str, list[PairedExample]]) -> list[str]:
    """Writes one JSONL per split plus a meta.json; returns created names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created = []
    for split, examples in splits.items():
        name = f"{split}.jsonl"
        write_examples(out_dir / name, examples, split)
        created.append(name)
    meta = dict(spec.to_dict(), d_s=spec.d_s,
                counts={k: len(v) for k, v in splits.items()})
    with open(out_dir / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    created.append("meta.json")
    return created


def read_dataset(data_dir) -> tuple[SyntheticTaskSpec, dict[str, list[PairedExample]]]:
    data_dir = Path(data_dir)
    with open(data_dir / "meta.json") as f:
        meta = json.load(f)
    spec = SyntheticTaskSpec(
        kind=meta["kind"], vocab_size=meta["vocab_size"],
        corruption_rate=meta["corruption_rate"],
        length_min=meta["length_min"], length_max=meta["length_max"],
        seed=meta["seed"],
    )
    splits = {}
    for split in meta["counts"]:
        splits[split] = read_examples(data_dir / f"{split}.jsonl", spec.vocab_size)
    return spec, splits
