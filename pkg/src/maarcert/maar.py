"""Training risks (COLT, MAT, MAAR) and the layerwise training driver."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, input_pgd_batch, latent_pgd_batch
from .errors import ConfigError
from .nn import autodiff as ad
from .nn import checkpoint
from .nn.network import PROB_FLOOR, LayeredNetwork, cross_entropy, grad_params, softmax
from .nn.optim import StepSchedule, make_optimizer
from .zonotope import region_at

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("colt", "mat", "maar")


def _lift(*xs):
    return any(isinstance(x, ad.Var) for x in xs)


def _out(v, graph):
    if graph:
        return v
    val = v.value
    return float(val) if val.ndim == 0 else val


def _floored(p):
    k = p.shape[-1]
    return ad.mul(ad.add(p, PROB_FLOOR), 1.0 / (1.0 + k * PROB_FLOOR))


def kl_div(p, q):
    """``sum_k p_k log(p_k / q_k)`` after flooring both arguments at 1e-12 and renormalising."""
    graph = _lift(p, q)
    pv, qv = ad.as_var(p), ad.as_var(q)
    if pv.shape != qv.shape:
        raise ValueError(f"distribution lengths differ: {pv.shape} vs {qv.shape}")
    pf, qf = _floored(pv), _floored(qv)
    terms = ad.mul(pf, ad.sub(ad.log(pf), ad.log(qf)))
    return _out(ad.sum(terms, axis=-1), graph)


def soft_indicator(p_nat, y):
    """Soft misclassification weight ``1 - p_y``."""
    graph = _lift(p_nat)
    return _out(ad.sub(1.0, ad.take_along_last(ad.as_var(p_nat), y)), graph)


def _xent(p, y):
    return cross_entropy(ad.as_var(p), y)


def maar_terms(p_nat, p_adv, y, lam: float):
    """Per-example ``(L_ori, ADV, weighted KL)`` graph values."""
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    ori = _xent(p_nat, y)
    adv = _xent(p_adv, y)
    kl = ad.mul(ad.mul(kl_div(ad.as_var(p_nat), ad.as_var(p_adv)), soft_indicator(ad.as_var(p_nat), y)), lam)
    return ori, adv, kl


def _reduce(v):
    return ad.mean(v) if v.value.ndim else v


def maar_loss(p_nat, p_adv, y, lam: float = 6.0):
    """``CE(p_nat, y) + CE(p_adv, y) + lam * KL(p_nat || p_adv) * (1 - p_nat[y])``.

    Batched inputs are averaged over the batch.
    """
    graph = _lift(p_nat, p_adv)
    ori, adv, kl = maar_terms(p_nat, p_adv, y, lam)
    if lam == 0:
        return _out(_reduce(ad.add(ori, adv)), graph)
    return _out(_reduce(ad.add(ad.add(ori, adv), kl)), graph)


def colt_loss(p_nat, p_adv, y):
    graph = _lift(p_nat, p_adv)
    return _out(_reduce(ad.add(_xent(p_nat, y), _xent(p_adv, y))), graph)


def mat_loss(p_nat, p_adv, y, y_pred):
    """Adversarial term targets the model's own prediction on misclassified examples."""
    graph = _lift(p_nat, p_adv)
    target = np.where(np.asarray(y_pred) == np.asarray(y), y, y_pred)
    return _out(_reduce(ad.add(_xent(p_nat, y), _xent(p_adv, target))), graph)


@dataclass(frozen=True)
class StagePlan:
    layer: int
    epochs: int


@dataclass
class TrainingConfig:
    eps: float
    lam: float = 6.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(0.035, 40))
    stage_plan: list = field(default_factory=lambda: [StagePlan(0, 10)])
    loss_variant: str = "maar"
    batch_size: int = 100
    seed: int = 0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    schedule: StepSchedule = field(default_factory=StepSchedule)
    ve_attack: AttackConfig | None = None
    ve_examples: int | None = None
    cauchy_projections: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.eps < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        layers = [s.layer for s in self.stage_plan]
        if not layers:
            raise ConfigError("stage plan is empty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError("stage plan layer indices must be strictly increasing")
        if any(s.epochs < 1 for s in self.stage_plan):
            raise ConfigError("every stage needs at least one epoch")
        if layers[0] < 0:
            raise ConfigError("stage layer indices must be non-negative")

    def verification_attack(self) -> AttackConfig:
        return self.ve_attack or AttackConfig(max(self.eps, 1e-6) / 4.0, 10)


@dataclass
class EpochRecord:
    epoch: int
    accuracy: float
    verified_error: float
    loss_ori: float
    loss_adv: float
    loss_kl: float

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class StageReport:
    stage: int
    layer: int
    epochs: list = field(default_factory=list)

    def as_dicts(self):
        return [dict(stage=self.stage, layer=self.layer, **e.as_dict()) for e in self.epochs]


def batch_loss(variant: str, p_nat, p_adv, y, lam: float):
    """Training objective for one batch plus its per-example components."""
    ori, adv, kl = maar_terms(p_nat, p_adv, y, lam)
    if variant == "maar" and lam > 0:
        total = ad.add(ad.add(ori, adv), kl)
    elif variant in ("colt", "maar"):
        total = ad.add(ori, adv)
    else:
        y_pred = np.argmax(p_nat.value, axis=-1)
        target = np.where(y_pred == np.asarray(y), y, y_pred)
        total = ad.add(ori, _xent(p_adv, target))
    return ad.mean(total), (ori.value, adv.value, kl.value)


def train_step(net: LayeredNetwork, l: int, X, Y, cfg: TrainingConfig, optimizer, epoch: int, rng):
    """One batch update: relax, attack, differentiate, step."""
    estimator = None
    if cfg.cauchy_projections:
        estimator = (cfg.cauchy_projections, rng)
    Z = region_at(net, X, cfg.eps, l, estimator)
    x_adv, _, _ = latent_pgd_batch(Z, net, Y, cfg.attack, rng)
    comps = {}

    def closure(gnet, _batch):
        p_nat = ad.softmax(gnet.forward(X, 0))
        p_adv = ad.softmax(gnet.forward(x_adv, l))
        loss, parts = batch_loss(cfg.loss_variant, p_nat, p_adv, Y, cfg.lam)
        comps["parts"] = parts
        return loss

    grads = grad_params(net, closure)
    optimizer.step(dict(net.named_parameters()), grads, epoch)
    return comps["parts"]


def evaluate_epoch(net: LayeredNetwork, X, Y, cfg: TrainingConfig, rng):
    """Training-set accuracy and attack-based verified error."""
    pred = np.argmax(net.forward_from(X, 0), axis=1)
    correct = pred == Y
    acc = float(correct.mean())
    idx = np.nonzero(correct)[0]
    if cfg.ve_examples is not None:
        idx = idx[: cfg.ve_examples]
    if idx.size == 0:
        return acc, 1.0
    _, success = input_pgd_batch(net, X[idx], Y[idx], cfg.eps, cfg.verification_attack(), rng)
    return acc, float(success.mean())


def train_stage(net: LayeredNetwork, l: int, data, cfg: TrainingConfig, epochs: int, stage: int = 0) -> StageReport:
    """Train the blocks after latent position ``l`` and freeze block ``l`` afterwards."""
    X, Y = data
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    if epochs < 1:
        raise ConfigError("a stage needs at least one epoch")
    if l >= net.depth:
        raise ConfigError(f"stage layer {l} beyond network depth {net.depth}")
    if net.frozen_blocks() < l:
        raise ConfigError(f"stage at layer {l} requires the first {l} blocks to be frozen")
    if net.layers[net.blocks[l][0]].frozen:
        raise ConfigError(f"block {l} is already frozen; nothing left to train at this stage")
    rng = np.random.default_rng([cfg.seed, stage])
    optimizer = make_optimizer(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.schedule,
        **({"momentum": cfg.momentum} if cfg.optimizer == "sgd" else {}),
    )
    report = StageReport(stage=stage, layer=l)
    n = X.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        parts = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            parts.append(train_step(net, l, X[idx], Y[idx], cfg, optimizer, epoch, rng))
        ori = np.concatenate([p[0] for p in parts]).mean()
        adv = np.concatenate([p[1] for p in parts]).mean()
        kl = np.concatenate([p[2] for p in parts]).mean()
        acc, ve = evaluate_epoch(net, X, Y, cfg, rng)
        report.epochs.append(EpochRecord(epoch, acc, ve, float(ori), float(adv), float(kl)))
        log.info("stage %d epoch %d acc=%.4f ve=%.4f loss=%.4f", stage, epoch, acc, ve, ori + adv + kl)
    net.freeze_blocks(l + 1)
    return report


def train(net: LayeredNetwork, data, cfg: TrainingConfig, checkpoint_dir=None, meta: dict | None = None):
    """Run every stage of ``cfg.stage_plan``; optionally checkpoint after each."""
    reports = []
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    for stage, plan in enumerate(cfg.stage_plan):
        reports.append(train_stage(net, plan.layer, data, cfg, plan.epochs, stage))
        if checkpoint_dir is not None:
            info = dict(meta or {}, stage=stage, layer=plan.layer)
            checkpoint.save(net, os.path.join(checkpoint_dir, f"stage_{stage}.json"), info)
    return net, reports
