"""Projected gradient attacks in input space and in zonotope coefficient space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import autodiff as ad
from .nn.network import LayeredNetwork, cross_entropy, grad_wrt_activation, softmax
from .zonotope import Zonotope


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings.

    ``step_size`` is measured in the space the attack moves in: generator
    coefficients for the latent attack, input units for the input attack.
    ``normalize="sign"`` takes signed-gradient steps, ``"raw"`` the plain
    gradient.
    """

    step_size: float
    steps: int
    restarts: int = 1
    loss: str = "cross_entropy"
    normalize: str = "sign"

    def __post_init__(self):
        if self.step_size <= 0 or self.steps < 1 or self.restarts < 1:
            raise ConfigError("attack needs step_size > 0, steps >= 1, restarts >= 1")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported attack loss {self.loss!r}")
        if self.normalize not in ("sign", "raw"):
            raise ConfigError(f"unknown gradient normalisation {self.normalize!r}")


def _loss_and_grad(net: LayeredNetwork, l: int, h: np.ndarray, y: np.ndarray):
    """Per-example cross-entropy of the suffix at ``h`` and its gradient wrt ``h``."""
    out = {}

    def closure(logits):
        losses = cross_entropy(ad.softmax(logits), y)
        out["losses"] = losses.value.copy()
        out["logits"] = logits.value.copy()
        return ad.sum(losses)

    g = grad_wrt_activation(net, l, h, closure)
    return out["losses"], out["logits"], g


def _step(direction, cfg: AttackConfig):
    return np.sign(direction) if cfg.normalize == "sign" else direction


def _latent_position(net: LayeredNetwork, Z: Zonotope) -> int:
    for l in range(net.depth):
        if net.latent_index(l) == Z.layer_tag:
            return l
    raise ShapeError(f"zonotope at layer {Z.layer_tag} is not at a block boundary")


def latent_pgd_batch(Z: Zonotope, net: LayeredNetwork, y, cfg: AttackConfig, rng):
    """Vectorised latent attack on a batched zonotope.

    Returns ``(x_adv, e_best, best_loss)``; each row is the highest-loss
    iterate seen over all steps and restarts.
    """
    if not Z.batched:
        raise ShapeError("latent_pgd_batch needs a batched zonotope")
    l = _latent_position(net, Z)
    y = np.asarray(y, dtype=np.int64)
    bsz, m = Z.generators.shape[:2]
    gens = Z.generators.reshape(bsz, m, int(np.prod(Z.center.shape[1:])))
    center = Z.center.reshape(bsz, -1)
    shape = Z.center.shape

    best_loss = np.full(bsz, -np.inf)
    best_e = np.zeros((bsz, m))
    for _ in range(cfg.restarts):
        e = rng.uniform(-1.0, 1.0, size=(bsz, m))
        for step in range(cfg.steps + 1):
            x = (center + np.matmul(e[:, None, :], gens)[:, 0]).reshape(shape)
            losses, _, gx = _loss_and_grad(net, l, x, y)
            better = losses > best_loss
            best_loss = np.where(better, losses, best_loss)
            best_e[better] = e[better]
            if step == cfg.steps:
                break
            ge = np.matmul(gens, gx.reshape(bsz, -1, 1))[:, :, 0]
            e = np.clip(e + cfg.step_size * _step(ge, cfg), -1.0, 1.0)
    x_best = (center + np.matmul(best_e[:, None, :], gens)[:, 0]).reshape(shape)
    return x_best, best_e, best_loss


def latent_pgd(Z: Zonotope, net: LayeredNetwork, y: int, cfg: AttackConfig, seed):
    """Latent attack for one example; returns ``(x_adv, e_final)``."""
    if Z.batched:
        raise ShapeError("latent_pgd takes a single zonotope; use latent_pgd_batch")
    Zb = Zonotope(Z.center[None], Z.generators[None], Z.provenance, Z.layer_tag, True)
    x, e, _ = latent_pgd_batch(Zb, net, [y], cfg, np.random.default_rng(seed))
    return x[0], e[0]


def input_pgd_batch(net: LayeredNetwork, X, y, eps: float, cfg: AttackConfig, rng):
    """Signed-gradient PGD in the box ``B_eps(x) ∩ [0, 1]^d``.

    The first restart starts at ``x``, later ones uniformly inside the box.
    Misclassifying iterates are preferred over higher-loss correct ones.
    Returns ``(x_adv, success)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lo = np.maximum(0.0, X - eps)
    hi = np.minimum(1.0, X + eps)
    bsz = X.shape[0]
    best_x = X.copy()
    best_key = np.full(bsz, -np.inf)
    success = np.zeros(bsz, dtype=bool)
    for r in range(cfg.restarts):
        x = X.copy() if r == 0 else rng.uniform(lo, hi)
        for step in range(cfg.steps + 1):
            losses, logits, gx = _loss_and_grad(net, 0, x, y)
            wrong = np.argmax(logits, axis=1) != y
            # a misclassifying point always beats a correctly classified one
            key = np.where(wrong, 1e300, 0.0) + np.where(wrong, 0.0, losses)
            better = key > best_key
            best_key = np.where(better, key, best_key)
            best_x[better] = x[better]
            success |= wrong
            if step == cfg.steps or eps == 0:
                break
            x = np.clip(x + cfg.step_size * _step(gx, cfg), lo, hi)
    return best_x, success


def input_pgd(net: LayeredNetwork, x, y: int, eps: float, cfg: AttackConfig, seed):
    """Input-space attack on one example; returns ``(x_adv, success)``."""
    xb, s = input_pgd_batch(net, np.asarray(x)[None], [y], eps, cfg, np.random.default_rng(seed))
    return xb[0], bool(s[0])


def suffix_loss(net: LayeredNetwork, l: int, h, y) -> np.ndarray:
    """Cross-entropy of the suffix from position ``l`` (no gradients)."""
    return cross_entropy(softmax(net.forward_from(h, l)), y)
