"""Command surface binding all modules into reproducible runs.

Subcommands: gen-data, schedule, train, sample, eval, verify, ablate.
Every run writes the resolved config, deterministic metrics, a JSON-lines
event stream, and a manifest naming each artifact under its run directory.
Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .bridge import make_cosine_schedule, schedule_table
from .config import RunConfig
from .errors import CheckpointError, InvalidStateError, OracleBoundError
from .losses import LossConfig, Objective
from .metrics import evaluate
from .models import ModelArch
from .oracle import run_suite
from .prior import generate_splits, read_dataset, write_dataset
from .sampling import SampleMode, sample_many
from .training import TrainConfig, fit, load_inference_bundle


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _run_dir(out: str, run_name: str | None) -> Path:
    base = Path(out)
    name = run_name or time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    path = base / name
    suffix = 1
    while path.exists() and run_name is None:
        path = base / f"{name}-{suffix}"
        suffix += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


class _RunWriter:
    """Collects artifact names so the manifest can account for every file."""

    def __init__(self, run_dir: Path, command: str):
        self.run_dir = run_dir
        self.command = command
        self.artifacts: list[str] = []
        self._events = open(run_dir / "events.jsonl", "w")
        self.artifacts.append("events.jsonl")

    def event(self, payload: dict):
        self._events.write(json.dumps(payload, sort_keys=True) + "\n")
        self._events.flush()

    def add(self, name: str):
        if name not in self.artifacts:
            self.artifacts.append(name)

    def close(self):
        self._events.close()
        manifest = {
            "command": self.command,
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "artifacts": sorted(self.artifacts),
        }
        with open(self.run_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.from_ini(path) if path else RunConfig()


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    splits = generate_splits(cfg.task, cfg.counts)
    out_dir = Path(args.out)
    created = write_dataset(out_dir, cfg.task, splits)
    print(f"wrote {', '.join(created)} to {out_dir}")
    return 0


def cmd_schedule(args) -> int:
    table = schedule_table(make_cosine_schedule(args.T))
    if args.out:
        Path(args.out).write_text(table)
        print(f"wrote schedule table to {args.out}")
    else:
        print(table, end="")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    spec, splits = read_dataset(args.data)
    if spec.vocab_size != cfg.task.vocab_size:
        raise ValueError("dataset vocab does not match the config task")
    run_dir = _run_dir(args.out, args.run_name)
    writer = _RunWriter(run_dir, "train")
    try:
        cfg.write_ini(run_dir / "resolved.ini")
        writer.add("resolved.ini")
        result = fit(
            cfg.train, cfg.model,
            splits.get("train", []), splits.get("valid", []),
            run_dir, loss_cfg=cfg.loss, fingerprint=cfg.fingerprint(),
            resume_from=args.resume, event_sink=writer.event,
        )
        for name in ("metrics.csv", "best.ckpt", "last.ckpt"):
            writer.add(name)
        print(f"run dir: {run_dir}")
        print(f"steps: {result.steps}  best val loss: {result.best_val:.6f}")
    finally:
        writer.close()
    return 0


def cmd_sample(args) -> int:
    bundle = load_inference_bundle(args.ckpt)
    spec, splits = read_dataset(args.data) if Path(args.data).is_dir() else (None, None)
    if splits is None:
        from .prior import read_examples
        examples = read_examples(args.data, bundle.arch.vocab_size)
    else:
        examples = splits.get(args.split, [])
    mode = SampleMode(args.mode)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        for i, ex in enumerate(examples):
            rng = np.random.default_rng([args.seed, i])
            results = sample_many(ex.s_features, bundle, args.n, rng, mode,
                                  pad_mask=ex.y.pad_mask)
            for j, res in enumerate(results):
                idx = np.arange(len(res.tokens))
                lp = np.log(res.final_probs[idx, res.tokens.tokens])
                rec = {
                    "id": ex.id, "draw": j,
                    "tokens": res.tokens.tokens.tolist(),
                    "log_probs": [float(v) for v in lp],
                    "mean_log_prob": res.mean_log_prob,
                    "mode": mode.value,
                }
                f.write(json.dumps(rec) + "\n")
    print(f"wrote {len(examples) * args.n} samples to {out_path}")
    return 0


def cmd_eval(args) -> int:
    bundle = load_inference_bundle(args.ckpt)
    if Path(args.data).is_dir():
        spec, splits = read_dataset(args.data)
        examples = splits.get(args.split, [])
        tag = spec.kind.value
    else:
        from .prior import read_examples
        examples = read_examples(args.data, bundle.arch.vocab_size)
        tag = None
    report = evaluate(bundle, examples, seed=args.seed, task_tag=tag)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.to_json() + "\n")
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w") as f:
        f.write("bucket,metric,value\n")
        for bucket, metric, value in report.to_csv_rows():
            f.write(f"{bucket},{metric},{value:.17g}\n")
    print(report.to_text_table(), end="")
    print(f"report: {out_path}  csv: {csv_path}")
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.suite, seed=args.seed)
    width = max(len(f"{r.suite}/{r.name}") for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"[{status}] {r.suite + '/' + r.name:<{width}}  {r.detail}")
        failures += 0 if r.ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# ablation presets -------------------------------------------------------------


def _preset_base(T: int = 10, objective: Objective = Objective.SIMPLIFIED_CE,
                 freeze_prior: bool = True, two_phase: bool = True,
                 init_conditioning: str = "zero", seed: int = 0) -> RunConfig:
    from .prior import SyntheticTaskSpec, TaskKind
    task = SyntheticTaskSpec(kind=TaskKind.LOCAL_CONTEXT, vocab_size=8,
                             length_min=16, length_max=16, seed=7)
    return RunConfig(
        task=task,
        train=TrainConfig(T=T, epochs=8, phase1_epochs=2, batch_size_tokens=2048,
                          noam_warmup=60, noam_scale=0.03, seed=seed,
                          freeze_prior=freeze_prior, two_phase=two_phase),
        loss=LossConfig(objective=objective),
        model=ModelArch(vocab_size=8, d_s=16, d_model=48, n_blocks=2,
                        d_hidden=96, d_adapter_hidden=96,
                        init_conditioning=init_conditioning),
        counts={"train": 4000, "valid": 400, "test": 400},
        seed=seed,
    )


def _run_variant(cfg: RunConfig, run_dir: Path, label: str, writer: _RunWriter):
    splits = generate_splits(cfg.task, cfg.counts)
    sub = run_dir / label
    sub.mkdir(parents=True, exist_ok=True)
    result = fit(cfg.train, cfg.model, splits["train"], splits["valid"], sub,
                 loss_cfg=cfg.loss, fingerprint=cfg.fingerprint(),
                 event_sink=writer.event)
    bundle = load_inference_bundle(result.best_path)
    report = evaluate(bundle, splits["test"], seed=cfg.eval_seed,
                      task_tag=cfg.task.kind.value)
    stats = report.buckets["All"]
    for name in ("metrics.csv", "best.ckpt", "last.ckpt"):
        writer.add(f"{label}/{name}")
    return {
        "variant": label,
        "recovery": stats.median_recovery_pct,
        "perplexity": stats.perplexity,
        "prior_recovery": stats.prior_median_recovery_pct,
    }


def _ablate_rows(preset: str, run_dir: Path, writer: _RunWriter, seed: int):
    if preset == "loss-comparison":
        return [
            _run_variant(_preset_base(objective=Objective.SIMPLIFIED_CE, seed=seed),
                         run_dir, "simplified-ce", writer),
            _run_variant(_preset_base(objective=Objective.VARIATIONAL_BOUND, seed=seed),
                         run_dir, "variational-bound", writer),
        ]
    if preset == "prior-freeze":
        return [
            _run_variant(_preset_base(freeze_prior=True, seed=seed),
                         run_dir, "frozen-prior", writer),
            _run_variant(_preset_base(freeze_prior=False, seed=seed),
                         run_dir, "joint-prior", writer),
        ]
    if preset == "conditioning-zeroinit":
        return [
            _run_variant(_preset_base(init_conditioning="zero", seed=seed),
                         run_dir, "zero-init", writer),
            _run_variant(_preset_base(init_conditioning="random", seed=seed),
                         run_dir, "random-init", writer),
        ]
    if preset == "steps-sweep":
        return [
            _run_variant(_preset_base(T=T, seed=seed), run_dir, f"T{T}", writer)
            for T in (5, 10, 25, 50)
        ]
    raise ValueError(f"unknown preset {preset!r}")


def cmd_ablate(args) -> int:
    run_dir = _run_dir(args.out, args.run_name)
    writer = _RunWriter(run_dir, f"ablate:{args.preset}")
    try:
        rows = _ablate_rows(args.preset, run_dir, writer, args.seed)
        table_path = run_dir / f"ablate-{args.preset}.csv"
        with open(table_path, "w") as f:
            f.write("variant,recovery,perplexity,prior_recovery\n")
            for row in rows:
                f.write(f"{row['variant']},{row['recovery']:.4f},"
                        f"{row['perplexity']:.6f},{row['prior_recovery']:.4f}\n")
        writer.add(table_path.name)
        print(f"{'variant':<20} {'recovery%':>10} {'perplexity':>11} {'prior%':>8}")
        for row in rows:
            print(f"{row['variant']:<20} {row['recovery']:>10.2f} "
                  f"{row['perplexity']:>11.4f} {row['prior_recovery']:>8.2f}")
        print(f"run dir: {run_dir}")
    finally:
        writer.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bridgekit",
                     description="Markov-bridge sequence refinement engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/valid/test JSONL splits")
    p.add_argument("--config", default=None, help="run config (INI)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("schedule", help="print a cosine schedule table")
    p.add_argument("--T", type=int, default=25)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("train", help="train a bridge model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run-name", default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw refined sequences from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--mode", default="stochastic",
                   choices=[m.value for m in SampleMode])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="perplexity / recovery report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run brute-force verification suites")
    p.add_argument("--suite", default="all",
                   choices=["kernels", "prop1", "vlb", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="matched-seed design-choice comparisons")
    p.add_argument("--preset", required=True,
                   choices=["loss-comparison", "prior-freeze",
                            "conditioning-zeroinit", "steps-sweep"])
    p.add_argument("--out", required=True)
    p.add_argument("--run-name", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, InvalidStateError, CheckpointError,
            OracleBoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main():
    raise SystemExit(main())


if __name__ == "__main__":
    console_main()
