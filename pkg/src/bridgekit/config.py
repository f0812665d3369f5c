"""Run configuration: INI-style sections mirroring the dataclass fields.

A run directory always receives the exact resolved config that produced it,
and the sha256 fingerprint of that resolved form is embedded in every
checkpoint the run writes, so artifacts can be traced back to their
configuration and mismatched loads are rejected.
"""

from __future__ import annotations

import ast
import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import config_fingerprint
from .losses import LossConfig
from .models import ModelArch
from .prior import SyntheticTaskSpec, TaskKind
from .training import TrainConfig


@dataclass
class RunConfig:
    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(
        kind=TaskKind.LOCAL_CONTEXT, vocab_size=8, length_min=16, length_max=16))
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelArch | None = None
    counts: dict = field(default_factory=lambda: {"train": 2000, "valid": 200, "test": 200})
    eval_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.model is None:
            self.model = ModelArch(vocab_size=self.task.vocab_size,
                                   d_s=self.task.d_s)
        if self.model.vocab_size != self.task.vocab_size or self.model.d_s != self.task.d_s:
            raise ValueError("model dims must match the task vocab and d_s")

    def resolved(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "train": self.train.to_dict(),
            "loss": {"objective": self.loss.objective.value,
                     "lambda_mode": self.loss.lambda_mode.value,
                     "epsilon": self.loss.epsilon},
            "model": self.model.to_dict(),
            "counts": dict(self.counts),
            "eval_seed": self.eval_seed,
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        return config_fingerprint(self.resolved())

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep field-name case (T vs t)
        run_section = {}
        for key, values in self.resolved().items():
            if isinstance(values, dict):
                parser[key] = {k: repr(v) for k, v in values.items()}
            else:
                run_section[key] = repr(values)
        if run_section:
            parser["run"] = run_section
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write_ini(self, path):
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep field-name case (T vs t)
        read = parser.read(str(path))
        if not read:
            raise ValueError(f"config file {path} not found or unreadable")

        def section(name) -> dict:
            if name not in parser:
                return {}
            return {k: _literal(v) for k, v in parser[name].items()}

        task_kw = section("task")
        train_kw = section("train")
        loss_kw = section("loss")
        model_kw = section("model")
        counts = section("counts")
        run_kw = section("run")
        task = SyntheticTaskSpec(**task_kw) if task_kw else cls.__dataclass_fields__["task"].default_factory()
        model = ModelArch(**model_kw) if model_kw else None
        cfg = cls(
            task=task,
            train=TrainConfig(**train_kw) if train_kw else TrainConfig(),
            loss=LossConfig(**loss_kw) if loss_kw else LossConfig(),
            model=model,
            counts=counts or {"train": 2000, "valid": 200, "test": 200},
            eval_seed=run_kw.get("eval_seed", 0),
            seed=run_kw.get("seed", 0),
        )
        return cfg


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
