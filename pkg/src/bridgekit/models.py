"""Approximators: the pluggable model mapping (z_t, condition, t) to a
per-position categorical over the vocabulary.

Two implementations share one interface.  ``TabularModel`` is a conditional
frequency table P(y_i | z_i), the degenerate baseline and oracle target.
``NeuralModel`` is a small residual feed-forward token network whose blocks
are [bias-modulated layer norm -> position-wise MLP -> bottleneck
cross-attention adapter].  Conditioning (timestep embedding plus pooled
condition features) enters only through the norm-bias modulator and the
adapters, both zero-initialized so a freshly initialized conditioned forward
pass equals the unconditioned base network bit-exactly.

All math runs in float64 on the autodiff engine; gradients are exact
reverse-mode and are finite-difference checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .autodiff import Tensor, gelu, gradients, layer_norm, log_softmax, no_grad
from .bridge import TokenSequence

NEG_INF_BIAS = -1e30  # added to attention scores of masked keys


@dataclass
class ProbTable:
    """Per-position categorical distribution: (n, K) simplex rows."""

    probs: np.ndarray
    pad_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError("probs must be (n, K)")
        n = self.probs.shape[0]
        if self.pad_mask is None:
            self.pad_mask = np.ones(n, dtype=bool)
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        live = self.probs[self.pad_mask]
        if live.size:
            if np.any(live < 0.0):
                raise ValueError("probabilities must be nonnegative")
            if np.max(np.abs(live.sum(axis=1) - 1.0)) > 1e-6:
                raise ValueError("unmasked rows must sum to 1 within 1e-6")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[1]

    def log(self, epsilon: float = 0.0) -> np.ndarray:
        return np.log(self.probs + epsilon)

    def row(self, i: int) -> np.ndarray:
        return self.probs[i]


@dataclass
class ConditioningBundle:
    """Everything the conditioned forward pass needs besides tokens.

    ``t_embed`` holds sinusoidal features of t/T, ``s_features`` the
    per-position condition matrix, ``s_pooled`` its mean over unmasked rows.
    """

    t_embed: np.ndarray
    s_features: np.ndarray
    s_pooled: np.ndarray
    pad_mask: np.ndarray


def sinusoidal_time_features(t: int, T: int, d_time: int) -> np.ndarray:
    """Fixed sin/cos features of the normalized step t/T."""
    if d_time % 2 != 0:
        raise ValueError("d_time must be even")
    x = t / T
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), d_time // 2))
    ang = x * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


@lru_cache(maxsize=64)
def _position_encoding(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    ang = pos / (10000.0 ** (2.0 * i / d))
    out = np.zeros((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def build_conditioning(
    s_features: np.ndarray,
    pad_mask: np.ndarray,
    t: int,
    T: int,
    d_time: int = 16,
) -> ConditioningBundle:
    s_features = np.asarray(s_features, dtype=np.float64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if s_features.shape[0] != pad_mask.shape[0]:
        raise ValueError("s_features rows must match pad_mask length")
    live = s_features[pad_mask]
    pooled = live.mean(axis=0) if live.size else np.zeros(s_features.shape[1])
    return ConditioningBundle(
        t_embed=sinusoidal_time_features(t, T, d_time),
        s_features=s_features,
        s_pooled=pooled,
        pad_mask=pad_mask,
    )


@dataclass
class CondBatch:
    """Stacked conditioning arrays for a padded batch."""

    t_feats: np.ndarray   # (B, d_time)
    s_feats: np.ndarray   # (B, n, d_s)
    s_pooled: np.ndarray  # (B, d_s)

    @classmethod
    def stack(cls, bundles: list[ConditioningBundle]) -> "CondBatch":
        return cls(
            t_feats=np.stack([b.t_embed for b in bundles]),
            s_feats=np.stack([b.s_features for b in bundles]),
            s_pooled=np.stack([b.s_pooled for b in bundles]),
        )


@dataclass(frozen=True)
class ModelArch:
    vocab_size: int
    d_s: int
    d_model: int = 64
    n_blocks: int = 2
    d_hidden: int = 128
    d_time: int = 16
    d_cond: int = 32
    d_mod: int = 32
    adapter_heads: int = 4
    d_adapter: int = 32
    d_adapter_hidden: int = 64
    rel_window: int = 8  # learnable relative-position bias span for adapters
    ln_eps: float = 1e-6
    init_conditioning: str = "zero"  # "zero" honors the transparency contract

    def __post_init__(self):
        if self.d_adapter % self.adapter_heads != 0:
            raise ValueError("d_adapter must divide evenly into heads")
        if self.init_conditioning not in ("zero", "random"):
            raise ValueError("init_conditioning must be 'zero' or 'random'")
        if self.rel_window < 1:
            raise ValueError("rel_window must be >= 1")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_s": self.d_s,
            "d_model": self.d_model, "n_blocks": self.n_blocks,
            "d_hidden": self.d_hidden, "d_time": self.d_time,
            "d_cond": self.d_cond, "d_mod": self.d_mod,
            "adapter_heads": self.adapter_heads, "d_adapter": self.d_adapter,
            "d_adapter_hidden": self.d_adapter_hidden,
            "rel_window": self.rel_window, "ln_eps": self.ln_eps,
            "init_conditioning": self.init_conditioning,
        }


def is_conditioning_param(name: str) -> bool:
    return name.startswith("cond.") or ".mod." in name or ".adp." in name


def _relative_bias_init(heads: int, window: int) -> np.ndarray:
    """Staggered locality prior for cross-attention heads.

    Head h starts focused on relative offset (h - heads // 2); extra heads
    beyond the +/-window or at the end start uniform.  The bias is a
    learnable parameter, so training can reshape it freely; the init only
    biases early gradients toward neighborhood gathering.
    """
    table = np.zeros((heads, 2 * window + 1))
    for h in range(heads - 1):
        offset = h - (heads - 1) // 2
        if abs(offset) <= window:
            table[h, :] = -6.0
            table[h, window + offset] = 0.0
    return table


@lru_cache(maxsize=64)
def _relative_index(n: int, window: int) -> np.ndarray:
    delta = np.arange(n)[None, :] - np.arange(n)[:, None]
    return np.clip(delta + window, 0, 2 * window).astype(np.int64)


class NeuralModel:
    """Residual token network with zero-initialized conditioning hooks."""

    def __init__(self, arch: ModelArch, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params

    # initialization ------------------------------------------------------

    @classmethod
    def init(cls, arch: ModelArch, seed: int = 0) -> "NeuralModel":
        rng = np.random.default_rng(seed)
        a = arch
        p: dict[str, Tensor] = {}

        def dense(name, fan_in, shape):
            p[name] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape),
                             requires_grad=True, name=name)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True, name=name)

        dense("tok_embed", 1, (a.vocab_size, a.d_model))
        dense("cond.t.w", a.d_time, (a.d_time, a.d_cond))
        zeros("cond.t.b", (a.d_cond,))
        dense("cond.s.w", a.d_s, (a.d_s, a.d_cond))
        zeros("cond.s.b", (a.d_cond,))
        for b in range(a.n_blocks):
            pre = f"block{b}"
            ones(f"{pre}.ln.gamma", (a.d_model,))
            zeros(f"{pre}.ln.beta", (a.d_model,))
            dense(f"{pre}.mlp.w1", a.d_model, (a.d_model, a.d_hidden))
            zeros(f"{pre}.mlp.b1", (a.d_hidden,))
            dense(f"{pre}.mlp.w2", a.d_hidden, (a.d_hidden, a.d_model))
            zeros(f"{pre}.mlp.b2", (a.d_model,))
            dense(f"{pre}.mod.w1", a.d_cond, (a.d_cond, a.d_mod))
            zeros(f"{pre}.mod.b1", (a.d_mod,))
            dense(f"{pre}.adp.wq", a.d_model, (a.d_model, a.d_adapter))
            dense(f"{pre}.adp.wk", a.d_s, (a.d_s, a.d_adapter))
            dense(f"{pre}.adp.wv", a.d_s, (a.d_s, a.d_adapter))
            p[f"{pre}.adp.rel_bias"] = Tensor(
                _relative_bias_init(a.adapter_heads, a.rel_window),
                requires_grad=True, name=f"{pre}.adp.rel_bias")
            dense(f"{pre}.adp.wdown", a.d_adapter, (a.d_adapter, a.d_adapter_hidden))
            zeros(f"{pre}.adp.bdown", (a.d_adapter_hidden,))
            for name, shape in ((f"{pre}.mod.w2g", (a.d_mod, a.d_model)),
                                (f"{pre}.mod.w2b", (a.d_mod, a.d_model)),
                                (f"{pre}.adp.wup", (a.d_adapter_hidden, a.d_model))):
                if a.init_conditioning == "zero":
                    zeros(name, shape)
                else:
                    dense(name, shape[0], shape)
            zeros(f"{pre}.mod.b2g", (a.d_model,))
            zeros(f"{pre}.mod.b2b", (a.d_model,))
            zeros(f"{pre}.adp.bup", (a.d_model,))
        ones("final.ln.gamma", (a.d_model,))
        zeros("final.ln.beta", (a.d_model,))
        dense("final.mod.w1", a.d_cond, (a.d_cond, a.d_mod))
        zeros("final.mod.b1", (a.d_mod,))
        for name in ("final.mod.w2g", "final.mod.w2b"):
            if a.init_conditioning == "zero":
                zeros(name, (a.d_mod, a.d_model))
            else:
                dense(name, a.d_mod, (a.d_mod, a.d_model))
        zeros("final.mod.b2g", (a.d_model,))
        zeros("final.mod.b2b", (a.d_model,))
        dense("out.w", a.d_model, (a.d_model, a.vocab_size))
        zeros("out.b", (a.vocab_size,))
        return cls(arch, p)

    # parameter bookkeeping ----------------------------------------------

    def base_param_names(self) -> list[str]:
        return [n for n in self.params if not is_conditioning_param(n)]

    def conditioning_param_names(self) -> list[str]:
        return [n for n in self.params if is_conditioning_param(n)]

    def set_trainable(self, names: list[str]):
        wanted = set(names)
        for name, t in self.params.items():
            t.requires_grad = name in wanted

    # forward -------------------------------------------------------------

    def _modulated_norm(self, h: Tensor, prefix: str, c: Optional[Tensor]) -> Tensor:
        p = self.params
        gamma, beta = p[f"{prefix}.ln.gamma"], p[f"{prefix}.ln.beta"]
        if c is not None:
            hidden = gelu(c @ p[f"{prefix}.mod.w1"] + p[f"{prefix}.mod.b1"])
            dgamma = (hidden @ p[f"{prefix}.mod.w2g"] + p[f"{prefix}.mod.b2g"])
            dbeta = (hidden @ p[f"{prefix}.mod.w2b"] + p[f"{prefix}.mod.b2b"])
            B, d = dgamma.shape
            gamma = gamma + dgamma.reshape(B, 1, d)
            beta = beta + dbeta.reshape(B, 1, d)
        return layer_norm(h, gamma, beta, eps=self.arch.ln_eps)

    def _adapter(self, h: Tensor, prefix: str, s_feats: Tensor, key_bias: Tensor) -> Tensor:
        a = self.arch
        p = self.params
        B, n, _ = h.shape
        dh = a.d_adapter // a.adapter_heads
        q = (h @ p[f"{prefix}.adp.wq"]).reshape(B, n, a.adapter_heads, dh).swapaxes(1, 2)
        k = (s_feats @ p[f"{prefix}.adp.wk"]).reshape(B, n, a.adapter_heads, dh).swapaxes(1, 2)
        v = (s_feats @ p[f"{prefix}.adp.wv"]).reshape(B, n, a.adapter_heads, dh).swapaxes(1, 2)
        idx = _relative_index(n, a.rel_window)
        rel = p[f"{prefix}.adp.rel_bias"].take_cols(idx)  # (heads, n, n)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)) + rel + key_bias
        attn = log_softmax(scores, axis=-1).exp()
        gathered = (attn @ v).swapaxes(1, 2).reshape(B, n, a.d_adapter)
        bottleneck = gelu(gathered @ p[f"{prefix}.adp.wdown"] + p[f"{prefix}.adp.bdown"])
        return bottleneck @ p[f"{prefix}.adp.wup"] + p[f"{prefix}.adp.bup"]

    def forward_graph(
        self,
        tokens: np.ndarray,
        pad_mask: np.ndarray,
        cond: Optional[CondBatch],
    ) -> Tensor:
        """Logits (B, n, K) for a padded batch; cond=None runs the base net."""
        a = self.arch
        p = self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        B, n = tokens.shape
        h = p["tok_embed"].take_rows(tokens) + Tensor(_position_encoding(n, a.d_model))
        c = None
        s_feats_t = None
        key_bias = None
        if cond is not None:
            c = (Tensor(cond.t_feats) @ p["cond.t.w"] + p["cond.t.b"]) + \
                (Tensor(cond.s_pooled) @ p["cond.s.w"] + p["cond.s.b"])
            s_feats_t = Tensor(cond.s_feats)
            key_bias = Tensor(np.where(pad_mask, 0.0, NEG_INF_BIAS)[:, None, None, :])
        for b in range(a.n_blocks):
            pre = f"block{b}"
            xn = self._modulated_norm(h, pre, c)
            h = h + (gelu(xn @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"])
                     @ p[f"{pre}.mlp.w2"] + p[f"{pre}.mlp.b2"])
            if cond is not None:
                h = h + self._adapter(h, pre, s_feats_t, key_bias)
        hf = self._modulated_norm(h, "final", c)
        return hf @ p["out.w"] + p["out.b"]

    # inference -----------------------------------------------------------

    def predict_batch(
        self,
        tokens: np.ndarray,
        pad_mask: np.ndarray,
        cond: Optional[CondBatch],
    ) -> np.ndarray:
        with no_grad():
            logits = self.forward_graph(tokens, pad_mask, cond)
            return log_softmax(logits, axis=-1).exp().data

    def predict(self, z: TokenSequence, cond: Optional[ConditioningBundle] = None,
                t: int = 0) -> ProbTable:
        """Single-sequence categorical table; deterministic in (inputs, params).

        The step index reaches the network only through ``cond.t_embed``;
        with ``cond=None`` the unconditioned base network runs.
        """
        batch = None
        if cond is not None:
            if cond.s_features.shape[0] != len(z):
                raise ValueError("conditioning length must match sequence")
            batch = CondBatch.stack([cond])
        probs = self.predict_batch(z.tokens[None, :], z.pad_mask[None, :], batch)[0]
        return ProbTable(probs=probs, pad_mask=z.pad_mask.copy())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


class TabularModel:
    """Position-independent conditional frequency table P(y | z)."""

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != table.shape[1]:
            raise ValueError("table must be (K, K)")
        self.table = table

    @classmethod
    def uniform(cls, vocab_size: int) -> "TabularModel":
        return cls(np.full((vocab_size, vocab_size), 1.0 / vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def predict_batch(self, tokens, pad_mask, cond=None) -> np.ndarray:
        return self.table[np.asarray(tokens, dtype=np.int64)]

    def predict(self, z: TokenSequence, cond=None, t: int = 0) -> ProbTable:
        return ProbTable(probs=self.table[z.tokens], pad_mask=z.pad_mask.copy())


def tabular_fit_closed_form(pairs, vocab_size: int, smoothing: float = 1.0) -> TabularModel:
    """Additively smoothed conditional frequencies from (z, y) token pairs.

    Accepts an iterable of (z_tokens, y_tokens) arrays or TokenSequence
    pairs; masked positions are skipped.
    """
    counts = np.full((vocab_size, vocab_size), float(smoothing))
    seen = 0
    for z, y in pairs:
        if hasattr(z, "tokens"):
            mask = z.pad_mask & y.pad_mask
            zt, yt = z.tokens[mask], y.tokens[mask]
        else:
            zt = np.asarray(z, dtype=np.int64)
            yt = np.asarray(y, dtype=np.int64)
        np.add.at(counts, (zt, yt), 1.0)
        seen += len(zt)
    if seen == 0:
        raise ValueError("tabular fit needs a nonempty dataset")
    row_sums = counts.sum(axis=1, keepdims=True)
    # rows never observed (possible at smoothing 0) fall back to uniform
    table = np.where(row_sums > 0.0,
                     counts / np.where(row_sums > 0.0, row_sums, 1.0),
                     1.0 / vocab_size)
    return TabularModel(table)


def grad(params: dict[str, Tensor], loss_fn) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss closure, per parameter tensor."""
    return gradients(loss_fn(), params)
