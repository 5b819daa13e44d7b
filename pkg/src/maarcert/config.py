"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, unknown keys are rejected.
Values are parsed according to the field's type; lists use commas
(``stage_plan = 0:10, 1:10``). The canonical rendering (sorted keys, every
field present) is what gets hashed, so two files that differ only in
comments, ordering or defaults hash the same.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields

from .attack import AttackConfig
from .certify import CertifyConfig
from .errors import ConfigError
from .maar import LOSS_VARIANTS, StagePlan, TrainingConfig
from .nn.optim import StepSchedule

DATASETS = ("digits", "idx", "blobs")
PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


def parse_arch(text: str) -> list:
    """``conv:8:3:2:1, dense:32`` to ``[("conv", 8, 3, 2, 1), ("dense", 32)]``.

    Conv entries are ``conv:filters:kernel[:stride[:padding]]``.
    """
    arch = []
    for item in text.split(","):
        parts = [p.strip() for p in item.strip().split(":")]
        kind, args = parts[0], parts[1:]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ConfigError(f"non-integer field in layer spec {item.strip()!r}") from None
        if kind == "dense" and len(nums) == 1:
            arch.append(("dense", nums[0]))
        elif kind == "conv" and 2 <= len(nums) <= 4:
            filters, kernel, stride, pad = nums + [1, 0][len(nums) - 2 :]
            arch.append(("conv", filters, kernel, stride, pad))
        else:
            raise ConfigError(f"bad layer spec {item.strip()!r}")
    if not arch:
        raise ConfigError("architecture is empty")
    return arch


def format_arch(arch) -> str:
    return ", ".join(":".join(str(v) for v in layer) for layer in arch)


def parse_stage_plan(text: str) -> list:
    plan = []
    for item in text.split(","):
        try:
            layer, epochs = (int(v) for v in item.split(":"))
        except ValueError:
            raise ConfigError(f"stage entries look like layer:epochs, got {item.strip()!r}") from None
        plan.append(StagePlan(layer, epochs))
    return plan


def parse_lambdas(text: str) -> list:
    try:
        lams = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad lambda list {text!r}") from None
    if not lams:
        raise ConfigError("lambda list is empty")
    if any(v < 0 for v in lams):
        raise ConfigError("lambda values must be non-negative")
    return lams


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "digits"
    n_train: int = 1000
    n_test: int = 500
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    blobs_classes: int = 3
    blobs_per_class: int = 50
    blobs_dim: int = 2
    blobs_margin: float = 0.5
    blobs_spread: float = 0.05
    # model and training
    arch: str = "conv:8:3:2:1, conv:8:3:1:1, dense:32, dense:10"
    eps: float = 0.05
    lam: float = 6.0
    loss_variant: str = "maar"
    attack_steps: int = 40
    attack_step: float = 0.035
    attack_restarts: int = 1
    optimizer: str = "adam"
    learning_rate: float = 0.003
    momentum: float = 0.9
    schedule_start: int = -1
    schedule_factor: float = 0.5
    schedule_period: int = 10
    stage_plan: str = "0:10, 1:10"
    batch_size: int = 100
    cauchy_projections: int = 0
    ve_examples: int = 0
    # certification
    cert_eps: float = -1.0
    cert_budget: int = 50
    cert_attack_steps: int = 40
    cert_attack_step_rel: float = 0.25
    cert_attack_restarts: int = 1
    cert_limit: int = 0
    lr_layer: int = 3
    lr_attack_steps: int = 150
    lr_attack_step: float = 0.01
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.eps < 0 or self.lam < 0:
            raise ConfigError("eps and lam must be non-negative")
        if self.dataset == "idx":
            for key in PATH_KEYS:
                path = getattr(self, key)
                if not path:
                    raise ConfigError(f"dataset=idx needs {key}")
                if not os.path.exists(path):
                    raise ConfigError(f"{key}: no such file {path!r}")
        parse_arch(self.arch)
        parse_stage_plan(self.stage_plan)

    # -- derived objects -------------------------------------------------
    @property
    def architecture(self) -> list:
        return parse_arch(self.arch)

    @property
    def certify_eps(self) -> float:
        return self.eps if self.cert_eps < 0 else self.cert_eps

    def training(self, **overrides) -> TrainingConfig:
        schedule = StepSchedule(
            start=None if self.schedule_start < 0 else self.schedule_start,
            factor=self.schedule_factor,
            period=self.schedule_period,
        )
        kw = dict(
            eps=self.eps,
            lam=self.lam,
            attack=AttackConfig(self.attack_step, self.attack_steps, self.attack_restarts),
            stage_plan=parse_stage_plan(self.stage_plan),
            loss_variant=self.loss_variant,
            batch_size=self.batch_size,
            seed=self.seed,
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            schedule=schedule,
            ve_examples=self.ve_examples or None,
            cauchy_projections=self.cauchy_projections or None,
        )
        kw.update(overrides)
        return TrainingConfig(**kw)

    def certification(self) -> CertifyConfig:
        step = max(self.certify_eps, 1e-6) * self.cert_attack_step_rel
        attack = AttackConfig(step, self.cert_attack_steps, self.cert_attack_restarts)
        return CertifyConfig(attack=attack, budget=self.cert_budget, seed=self.seed)

    def latent_attack(self) -> AttackConfig:
        return AttackConfig(self.lr_attack_step, self.lr_attack_steps)

    # -- text form ---------------------------------------------------------
    def canonical(self) -> str:
        # the output location does not change what is computed, so it is not hashed
        names = sorted(f.name for f in fields(self) if f.name != "out_dir")
        return "".join(f"{name} = {getattr(self, name)}\n" for name in names)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_CASTS = {"int": int, "float": float, "str": str}


def _cast(key: str, raw: str, typename: str, lineno: int):
    try:
        return _CASTS[typename](raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typename}, got {raw!r}") from None


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    """Parse config text; dataset paths are resolved against ``base_dir``, ``out_dir`` against the working directory."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        value = _cast(key, raw, known[key], lineno)
        if key in PATH_KEYS:
            value = value if os.path.isabs(value) or not value else os.path.normpath(os.path.join(base_dir, value))
        values[key] = value
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))
