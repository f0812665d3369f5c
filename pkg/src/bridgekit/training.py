"""Training loop: sample a timestep and intermediate state, evaluate the
approximator, apply the configured objective, and update with Adam under a
noam warmup schedule.

Default regime is two-phase: the base network first trains on the
unconditioned denoising task, then is frozen while the conditioning
parameters (norm-bias modulators, adapters, conditioning trunk) train.
Zero-initialized conditioning makes the phase boundary seamless: the first
conditioned forward pass equals the last unconditioned one.  A single-phase
joint mode exists for ablations, as does joint prior-encoder training.

Determinism contract: one generator drives all stochastic training choices
in a fixed order, batch plans are recomputed from (seed, epoch), and
checkpoints carry the generator state, so identical configs reproduce
metrics byte-for-byte, including across a resume.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, gradients, log_softmax
from .bridge import BridgeSchedule, TokenSequence, make_cosine_schedule
from .checkpoint import config_fingerprint, read_checkpoint, write_checkpoint
from .losses import LambdaMode, LossConfig, Objective
from .models import (CondBatch, ModelArch, NeuralModel, is_conditioning_param,
                     sinusoidal_time_features)
from .prior import (EncoderParams, PairedExample, encode_prior, encoder_step,
                    fit_encoder)


def noam_lr(step: int, warmup_steps: int, scale: float) -> float:
    """scale * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup."""
    if step < 1:
        raise ValueError("noam step counts from 1")
    return scale * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass(frozen=True)
class TrainConfig:
    T: int = 25
    epochs: int = 4
    phase1_epochs: int = 2
    batch_size_tokens: int = 6000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    noam_warmup: int = 200
    noam_scale: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    freeze_prior: bool = True
    two_phase: bool = True
    encoder_epochs: int = 60
    encoder_lr: float = 0.5
    joint_encoder_lr: float = 0.3
    checkpoint_every: int = 0  # extra periodic snapshots; 0 = boundaries only

    def __post_init__(self):
        if self.T < 2 or self.epochs < 0 or self.noam_warmup < 1:
            raise ValueError("need T >= 2, epochs >= 0, warmup >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class AdamOpt:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
               lr: float, b1: float, b2: float, eps: float):
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            step = lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + eps)
            params[name].data -= step


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0.0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def plan_batches(lengths: list[int], budget: int,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled token-budget batches with length bucketing.

    Examples are shuffled, stable-sorted by length (so padding stays small),
    packed greedily under ``max_len * count <= budget``, and the batch order
    is shuffled again.
    """
    lengths_arr = np.asarray(lengths)
    if lengths_arr.size == 0:
        return []
    if lengths_arr.max() > budget:
        raise ValueError("batch_size_tokens must cover the longest sequence")
    order = rng.permutation(lengths_arr.size)
    order = order[np.argsort(lengths_arr[order], kind="stable")]
    batches: list[np.ndarray] = []
    start = 0
    while start < len(order):
        max_len = 0
        end = start
        while end < len(order):
            max_len = max(max_len, int(lengths_arr[order[end]]))
            if max_len * (end - start + 1) > budget:
                break
            end += 1
        end = max(end, start + 1)
        batches.append(order[start:end])
        start = end
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def _pad_batch(seqs: list[np.ndarray], masks: list[np.ndarray]):
    n_max = max(len(s) for s in seqs)
    B = len(seqs)
    tokens = np.zeros((B, n_max), dtype=np.int64)
    mask = np.zeros((B, n_max), dtype=bool)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = m
    return tokens, mask


def _pad_features(feats: list[np.ndarray], n_max: int) -> np.ndarray:
    B = len(feats)
    d = feats[0].shape[1]
    out = np.zeros((B, n_max, d), dtype=np.float64)
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out


@dataclass
class TrainState:
    cfg: TrainConfig
    arch: ModelArch
    loss_cfg: LossConfig
    model: NeuralModel
    encoder: EncoderParams
    schedule: BridgeSchedule
    adam: AdamOpt
    rng: np.random.Generator
    fingerprint: str
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    phase: int = 1
    best_val: float = float("inf")
    last_abs_logit: float = 0.0

    def conditioned(self) -> bool:
        return not (self.cfg.two_phase and self.phase == 1)

    def trainable_names(self) -> list[str]:
        if not self.cfg.two_phase:
            return list(self.model.params)
        if self.phase == 1:
            return self.model.base_param_names()
        return self.model.conditioning_param_names()


def _build_cond(examples: list[PairedExample], ts: np.ndarray, T: int,
                n_max: int, d_time: int) -> CondBatch:
    t_feats = np.stack([sinusoidal_time_features(int(t), T, d_time) for t in ts])
    s_feats = _pad_features([ex.s_features for ex in examples], n_max)
    pooled = np.stack([
        ex.s_features[ex.y.pad_mask].mean(axis=0) if ex.y.pad_mask.any()
        else np.zeros(ex.s_features.shape[1])
        for ex in examples
    ])
    return CondBatch(t_feats=t_feats, s_feats=s_feats, s_pooled=pooled)


def batch_loss_graph(
    model: NeuralModel,
    schedule: BridgeSchedule,
    loss_cfg: LossConfig,
    examples: list[PairedExample],
    ts: np.ndarray,
    v: np.ndarray,
    z_tokens: np.ndarray,
    mask: np.ndarray,
    conditioned: bool,
) -> Tensor:
    """Scalar training loss (mean over unmasked positions, then batch).

    Builds the configured objective on the autodiff graph; formulas match
    the numpy reference implementations in :mod:`bridgekit.losses`.
    """
    B, n_max = z_tokens.shape
    K = model.arch.vocab_size
    y_tokens, _ = _pad_batch([ex.y.tokens for ex in examples],
                             [ex.y.pad_mask for ex in examples])
    cond = None
    if conditioned:
        cond = _build_cond(examples, ts, schedule.T, n_max, model.arch.d_time)
    logits = model.forward_graph(z_tokens, mask, cond)
    logp = log_softmax(logits, axis=-1)
    unmask = np.maximum(mask.sum(axis=1), 1)
    beta_t = schedule.beta[ts]
    if loss_cfg.objective is Objective.SIMPLIFIED_CE:
        lam = (1.0 - beta_t) if loss_cfg.lambda_mode is LambdaMode.ONE_MINUS_BETA \
            else np.ones_like(beta_t)
        w = (v & mask) * lam[:, None] / unmask[:, None] / B
        return (-logp.gather_last(y_tokens) * Tensor(w)).sum()
    # variational bound: per-position KL(reference kernel || approx kernel)
    z_oh = np.zeros((B, n_max, K))
    np.put_along_axis(z_oh, z_tokens[..., None], 1.0, axis=-1)
    y_oh = np.zeros((B, n_max, K))
    np.put_along_axis(y_oh, y_tokens[..., None], 1.0, axis=-1)
    bt = beta_t[:, None, None]
    ref = bt * z_oh + (1.0 - bt) * y_oh
    eps = loss_cfg.epsilon
    q = logp.exp() * Tensor(1.0 - bt) + Tensor(bt * z_oh)
    cross = (Tensor(ref) * (q + eps).log()).sum(axis=-1)
    self_term = (ref * np.log(ref + eps)).sum(axis=-1)
    w = mask / unmask[:, None] / B
    return ((Tensor(self_term) - cross) * Tensor(w)).sum()


def train_step(state: TrainState, examples: list[PairedExample]) -> float:
    """One optimizer update on a batch; returns the batch mean loss.

    Per example: prior x (cached on the example or encoded on the fly),
    t ~ U{0..T-1}, z_t and the mixture latent v from the closed-form
    marginal, then the configured loss and one Adam step on the currently
    trainable parameters.
    """
    cfg = state.cfg
    if not cfg.freeze_prior:
        encoder_step(examples, state.encoder, cfg.joint_encoder_lr)
    x_tokens = []
    for ex in examples:
        if cfg.freeze_prior and ex.x is not None:
            x_tokens.append(ex.x.tokens)
        else:
            x_tokens.append(encode_prior(ex.s_features, state.encoder,
                                         ex.y.pad_mask, strict=cfg.freeze_prior).tokens)
    y_tokens, mask = _pad_batch([ex.y.tokens for ex in examples],
                                [ex.y.pad_mask for ex in examples])
    x_pad, _ = _pad_batch(x_tokens, [ex.y.pad_mask for ex in examples])
    B, n_max = y_tokens.shape
    T = state.schedule.T
    ts = state.rng.integers(0, T, size=B)
    bb_prev = np.where(ts == 0, 1.0, state.schedule.beta_bar[np.maximum(ts - 1, 0)])
    v = state.rng.random((B, n_max)) < bb_prev[:, None]
    v |= ~mask
    z_tokens = np.where(v, x_pad, y_tokens)

    loss = batch_loss_graph(state.model, state.schedule, state.loss_cfg,
                            examples, ts, v, z_tokens, mask,
                            state.conditioned())
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        hist = np.bincount(ts, minlength=T).tolist()
        raise FloatingPointError(
            f"non-finite loss at step {state.step + 1}: t histogram {hist}, "
            f"max |logit| {state.last_abs_logit:.6g}"
        )
    trainable = {n: state.model.params[n] for n in state.trainable_names()}
    grads = gradients(loss, trainable)
    clip_global_norm(grads, cfg.clip_norm)
    state.step += 1
    lr = noam_lr(state.step, cfg.noam_warmup, cfg.noam_scale)
    state.adam.update(state.model.params, grads, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return loss_val


def evaluation_loss(state: TrainState, examples: list[PairedExample],
                    eval_seed: int) -> float:
    """Deterministic validation loss with its own derived generator."""
    rng = np.random.default_rng([state.cfg.seed, 900017, eval_seed])
    total = 0.0
    count = 0
    budget = state.cfg.batch_size_tokens
    order = np.arange(len(examples))
    lengths = [len(ex.y) for ex in examples]
    start = 0
    while start < len(order):
        end = start
        max_len = 0
        while end < len(order):
            max_len = max(max_len, lengths[order[end]])
            if max_len * (end - start + 1) > budget:
                break
            end += 1
        end = max(end, start + 1)
        batch = [examples[i] for i in order[start:end]]
        x_tokens = []
        for ex in batch:
            if state.cfg.freeze_prior and ex.x is not None:
                x_tokens.append(ex.x.tokens)
            else:
                x_tokens.append(encode_prior(ex.s_features, state.encoder,
                                             ex.y.pad_mask, strict=False).tokens)
        y_tokens, mask = _pad_batch([ex.y.tokens for ex in batch],
                                    [ex.y.pad_mask for ex in batch])
        x_pad, _ = _pad_batch(x_tokens, [ex.y.pad_mask for ex in batch])
        B, n_max = y_tokens.shape
        ts = rng.integers(0, state.schedule.T, size=B)
        bb_prev = np.where(ts == 0, 1.0,
                           state.schedule.beta_bar[np.maximum(ts - 1, 0)])
        v = rng.random((B, n_max)) < bb_prev[:, None]
        v |= ~mask
        z_tokens = np.where(v, x_pad, y_tokens)
        loss = batch_loss_graph(state.model, state.schedule, state.loss_cfg,
                                batch, ts, v, z_tokens, mask,
                                state.conditioned())
        total += float(loss.data) * B
        count += B
        start = end
    return total / max(count, 1)


# checkpoint (de)serialization ------------------------------------------------


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {f"model.{n}": t.data for n, t in state.model.params.items()}
    tensors["encoder.w"] = state.encoder.w
    tensors["encoder.b"] = state.encoder.b
    for n, arr in state.adam.m.items():
        tensors[f"adam.m.{n}"] = arr
    for n, arr in state.adam.v.items():
        tensors[f"adam.v.{n}"] = arr
    return tensors


def save_state(state: TrainState, path):
    meta = {
        "kind": "train_state",
        "arch": state.arch.to_dict(),
        "train_cfg": state.cfg.to_dict(),
        "loss_cfg": {"objective": state.loss_cfg.objective.value,
                     "lambda_mode": state.loss_cfg.lambda_mode.value,
                     "epsilon": state.loss_cfg.epsilon},
        "schedule_beta": state.schedule.beta.tolist(),
        "counters": {"step": state.step, "epoch": state.epoch,
                     "batch_index": state.batch_index, "phase": state.phase,
                     "adam_t": state.adam.t},
        "best_val": state.best_val,
        "encoder_fitted": state.encoder.fitted,
        "rng_state": json.dumps(state.rng.bit_generator.state),
    }
    write_checkpoint(path, state.fingerprint, meta, _state_tensors(state))


def load_state(path, expected_fingerprint: Optional[str] = None) -> TrainState:
    fingerprint, meta, tensors = read_checkpoint(path, expected_fingerprint)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path} does not hold a training state")
    arch = ModelArch(**meta["arch"])
    cfg = TrainConfig(**meta["train_cfg"])
    loss_cfg = LossConfig(**meta["loss_cfg"])
    beta = np.asarray(meta["schedule_beta"])
    schedule = BridgeSchedule(beta=beta, beta_bar=np.cumprod(beta))
    params = {n[len("model."):]: Tensor(tensors[n], requires_grad=False, name=n)
              for n in tensors if n.startswith("model.")}
    model = NeuralModel(arch, params)
    encoder = EncoderParams(tensors["encoder.w"], tensors["encoder.b"],
                            fitted=meta["encoder_fitted"])
    adam = AdamOpt(
        m={n[len("adam.m."):]: tensors[n] for n in tensors if n.startswith("adam.m.")},
        v={n[len("adam.v."):]: tensors[n] for n in tensors if n.startswith("adam.v.")},
        t=meta["counters"]["adam_t"],
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(meta["rng_state"])
    state = TrainState(
        cfg=cfg, arch=arch, loss_cfg=loss_cfg, model=model, encoder=encoder,
        schedule=schedule, adam=adam, rng=rng, fingerprint=fingerprint,
        step=meta["counters"]["step"], epoch=meta["counters"]["epoch"],
        batch_index=meta["counters"]["batch_index"],
        phase=meta["counters"]["phase"], best_val=meta["best_val"],
    )
    state.model.set_trainable(state.trainable_names())
    return state


@dataclass
class InferenceBundle:
    """Read-only view of a checkpoint for sampling and evaluation."""

    model: NeuralModel
    encoder: EncoderParams
    schedule: BridgeSchedule
    arch: ModelArch
    loss_cfg: LossConfig
    fingerprint: str
    meta: dict


def load_inference_bundle(path, expected_fingerprint: Optional[str] = None) -> InferenceBundle:
    state = load_state(path, expected_fingerprint)
    return InferenceBundle(model=state.model, encoder=state.encoder,
                           schedule=state.schedule, arch=state.arch,
                           loss_cfg=state.loss_cfg, fingerprint=state.fingerprint,
                           meta={})


# fit driver ------------------------------------------------------------------


@dataclass
class FitResult:
    best_path: Path
    last_path: Path
    metrics_path: Path
    best_val: float
    steps: int


def _phase_plan(cfg: TrainConfig) -> list[tuple[int, int]]:
    if cfg.two_phase:
        return [(1, cfg.phase1_epochs), (2, cfg.epochs)]
    return [(1, cfg.epochs)]


def fit(
    cfg: TrainConfig,
    arch: ModelArch,
    train_examples: list[PairedExample],
    valid_examples: list[PairedExample],
    out_dir,
    loss_cfg: Optional[LossConfig] = None,
    fingerprint: Optional[str] = None,
    resume_from=None,
    event_sink=None,
    stop_after_epochs: Optional[int] = None,
) -> FitResult:
    """Runs the configured phases over shuffled token-budget batches.

    Writes step metrics to ``metrics.csv`` (deterministic columns only:
    step, epoch, phase, loss, lr), wall-clock timings to the event sink,
    and best/last checkpoints under ``out_dir``.  ``stop_after_epochs``
    halts after that many epochs of this invocation (simulating an
    interruption); a later call with ``resume_from`` the saved state and an
    identical config continues the run exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = loss_cfg or LossConfig()
    if fingerprint is None:
        fingerprint = config_fingerprint({
            "arch": arch.to_dict(), "train": cfg.to_dict(),
            "loss": {"objective": loss_cfg.objective.value,
                     "lambda_mode": loss_cfg.lambda_mode.value,
                     "epsilon": loss_cfg.epsilon},
        })
    if not train_examples:
        raise ValueError("fit needs a nonempty train split")

    def emit(event: str, **payload):
        if event_sink is not None:
            event_sink(dict(event=event, wall_time=time.time(), **payload))

    if resume_from is not None:
        state = load_state(resume_from, expected_fingerprint=fingerprint)
        emit("resume", checkpoint=str(resume_from), step=state.step)
    else:
        if cfg.freeze_prior:
            encoder = fit_encoder(train_examples, arch.vocab_size,
                                  epochs=cfg.encoder_epochs, lr=cfg.encoder_lr,
                                  seed=cfg.seed)
        else:
            encoder = EncoderParams.zeros(arch.d_s, arch.vocab_size)
        state = TrainState(
            cfg=cfg, arch=arch, loss_cfg=loss_cfg,
            model=NeuralModel.init(arch, seed=cfg.seed),
            encoder=encoder, schedule=make_cosine_schedule(cfg.T),
            adam=AdamOpt(), rng=np.random.default_rng(cfg.seed),
            fingerprint=fingerprint,
        )
        emit("start", examples=len(train_examples))

    if cfg.freeze_prior:
        for ex in train_examples:
            if ex.x is None:
                ex.x = encode_prior(ex.s_features, state.encoder, ex.y.pad_mask)
        for ex in valid_examples:
            if ex.x is None:
                ex.x = encode_prior(ex.s_features, state.encoder, ex.y.pad_mask)

    lengths = [len(ex.y) for ex in train_examples]
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    if resume_from is None and valid_examples:
        state.model.set_trainable(state.trainable_names())
        init_val = evaluation_loss(state, valid_examples, 0)
        state.best_val = init_val
        save_state(state, best_path)
        emit("init_val", val_loss=init_val)
    epoch_cursor = 0
    epochs_this_run = 0
    halted = False
    with open(metrics_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(["step", "epoch", "phase", "loss", "lr"])
        for phase, n_epochs in _phase_plan(cfg):
            if halted:
                break
            for _ in range(n_epochs):
                if epoch_cursor < state.epoch:
                    epoch_cursor += 1
                    continue
                if state.phase != phase:
                    state.phase = phase
                    state.adam = AdamOpt()  # fresh moments for the new trainable set
                    state.step = 0
                state.model.set_trainable(state.trainable_names())
                batch_rng = np.random.default_rng([cfg.seed, 500101, epoch_cursor])
                batches = plan_batches(lengths, cfg.batch_size_tokens, batch_rng)
                t0 = time.time()
                for bi, batch_idx in enumerate(batches):
                    if bi < state.batch_index:
                        continue
                    batch = [train_examples[i] for i in batch_idx]
                    loss = train_step(state, batch)
                    state.batch_index = bi + 1
                    lr = noam_lr(state.step, cfg.noam_warmup, cfg.noam_scale)
                    writer.writerow([state.step, epoch_cursor, phase,
                                     f"{loss:.17g}", f"{lr:.17g}"])
                    if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                        save_state(state, last_path)
                state.epoch = epoch_cursor + 1
                state.batch_index = 0
                val = evaluation_loss(state, valid_examples, epoch_cursor) \
                    if valid_examples else float("nan")
                emit("epoch", epoch=epoch_cursor, phase=phase, val_loss=val,
                     seconds=time.time() - t0, steps=state.step)
                if valid_examples and val <= state.best_val:
                    state.best_val = val
                    save_state(state, best_path)
                save_state(state, last_path)
                epoch_cursor += 1
                epochs_this_run += 1
                if stop_after_epochs is not None and epochs_this_run >= stop_after_epochs:
                    halted = True
                    break
    if not best_path.exists():
        save_state(state, best_path)
    save_state(state, last_path)
    emit("done", steps=state.step, best_val=state.best_val)
    return FitResult(best_path=best_path, last_path=last_path,
                     metrics_path=metrics_path, best_val=state.best_val,
                     steps=state.step)
