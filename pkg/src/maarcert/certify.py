"""Per-example certification pipeline and evaluation metrics.

Order of the pipeline: misclassification check, input PGD, zonotope
verification, then complete ReLU branch-and-bound. Branch-and-bound bounds
nodes with zonotopes under fixed ReLU phases and decides fully fixed
leaves exactly with a linear program over the activation region.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog

from .attack import AttackConfig, input_pgd_batch, latent_pgd_batch
from .errors import MetricError
from .nn.network import LayeredNetwork
from .zonotope import (
    INPUT_TAG,
    STABLE_WIDTH,
    Zonotope,
    affine,
    bounds,
    input_region,
    region_at,
    relu,
    sample,
)

LP_TOL = 1e-7
THREADS_ENV = "MAARCERT_THREADS"


class Outcome(str, Enum):
    MISCLASSIFIED = "misclassified"
    FALSIFIED = "falsified"
    VERIFIED_ZONOTOPE = "verified_zonotope"
    VERIFIED_COMPLETE = "verified_complete"
    UNKNOWN = "unknown"


@dataclass
class CertificationVerdict:
    outcome: Outcome
    stage: str
    x_adv: np.ndarray | None = None
    margins: list | None = None
    attack_success: bool = False
    nodes: int = 0
    splits: int = 0

    @property
    def verified(self) -> bool:
        return self.outcome in (Outcome.VERIFIED_ZONOTOPE, Outcome.VERIFIED_COMPLETE)

    @property
    def correct(self) -> bool:
        return self.outcome is not Outcome.MISCLASSIFIED


@dataclass(frozen=True)
class CertifyConfig:
    attack: AttackConfig
    budget: int = 50
    seed: int = 0


@dataclass
class CompleteResult:
    status: str  # "verified" | "falsified" | "unknown"
    x_adv: np.ndarray | None = None
    nodes: int = 0
    splits: int = 0
    reason: str = ""


def _predict_one(net, x) -> int:
    return int(np.argmax(net.forward_from(x, 0)))


def _margin_upper(Zout: Zonotope, y: int) -> np.ndarray:
    """Upper bounds of ``z_k - z_y`` for every k (entry y is -inf)."""
    c = Zout.center
    g = Zout.generators.reshape(Zout.num_generators, -1)
    diff_g = g - g[:, [y]]
    ub = (c - c[y]) + np.abs(diff_g).sum(axis=0)
    ub[y] = -np.inf
    return ub


@dataclass
class _Node:
    out: Zonotope
    records: list
    infeasible: bool


def _propagate_phased(net: LayeredNetwork, Z0: Zonotope, phases: dict) -> _Node:
    """Zonotope pass with some ReLUs forced; records pre-activation data per ReLU."""
    Z = Z0
    records = []
    infeasible = False
    for i, layer in enumerate(net.layers):
        if layer.kind != "relu":
            Z = affine(Z, layer)
            continue
        b = bounds(Z)
        lo, hi = b.lower.ravel(), b.upper.ravel()
        ph = phases.get(i)
        if ph is not None:
            if np.any((ph > 0) & (hi < 0)) or np.any((ph < 0) & (lo > 0)):
                infeasible = True
        records.append((i, Z.center.ravel().copy(), Z.generators.reshape(Z.num_generators, -1).copy(), lo, hi, ph))
        Z = relu(Z, b, phases=ph)
    return _Node(Z, records, infeasible)


def _effective_phase(lo, hi, center, ph):
    degenerate = (hi - lo) < STABLE_WIDTH
    active = np.where(degenerate, center >= 0, lo >= 0)
    inactive = np.where(degenerate, center < 0, hi <= 0)
    eff = np.where(active, 1, np.where(inactive, -1, 0))
    if ph is not None:
        eff = np.where(ph != 0, ph, eff)
    return eff


def _unstable(records):
    """(layer, neuron, width) of free crossing neurons, in network order."""
    out = []
    for i, center, _, lo, hi, ph in records:
        eff = _effective_phase(lo, hi, center, ph)
        for j in np.nonzero(eff == 0)[0]:
            out.append((i, int(j), float(hi[j] - lo[j])))
    return out


def _leaf_lp(net, Z0, node: _Node, y: int, ub: np.ndarray):
    """Decide a fully fixed activation region exactly.

    Returns ``("closed", None)``, ``("falsified", x)`` or ``("gap", None)``.
    """
    m0 = int(np.sum(Z0.provenance == INPUT_TAG))
    A_ub, b_ub = [], []
    for _, center, gens, lo, hi, ph in node.records:
        eff = _effective_phase(lo, hi, center, ph)
        G = gens[:m0].T  # (n, m0)
        A_ub.append(np.where(eff[:, None] > 0, -G, G))
        b_ub.append(np.where(eff > 0, center, -center))
    A_ub = np.concatenate(A_ub) if A_ub else np.zeros((0, m0))
    b_ub = np.concatenate(b_ub) if b_ub else np.zeros(0)
    keep = np.abs(A_ub).sum(axis=1) > 0
    if np.any(~keep & (b_ub < -LP_TOL)):
        return "closed", None
    A_ub, b_ub = A_ub[keep], b_ub[keep]
    out = node.out
    c = out.center
    g = out.generators.reshape(out.num_generators, -1)[:m0]
    gap = False
    for k in np.argsort(-ub, kind="stable"):
        if k == y or ub[k] < 0:
            continue
        d = g[:, k] - g[:, y]
        res = linprog(-d, A_ub=A_ub if len(b_ub) else None, b_ub=b_ub if len(b_ub) else None,
                      bounds=[(-1.0, 1.0)] * m0, method="highs")
        if res.status == 2:
            return "closed", None
        if res.status != 0:
            gap = True
            continue
        val = (c[k] - c[y]) + d @ res.x
        if val < -LP_TOL:
            continue
        x = sample(Z0, np.clip(res.x, -1.0, 1.0))
        if _predict_one(net, x) != y:
            return "falsified", x
        gap = True
    return ("gap", None) if gap else ("closed", None)


def _sign_candidate(Z0: Zonotope, out: Zonotope, y: int, k: int) -> np.ndarray:
    m0 = int(np.sum(Z0.provenance == INPUT_TAG))
    g = out.generators.reshape(out.num_generators, -1)[:m0]
    return sample(Z0, np.sign(g[:, k] - g[:, y]))


def zonotope_margins(net: LayeredNetwork, x, y: int, eps: float) -> np.ndarray:
    Z0 = input_region(x, eps)
    return _margin_upper(_propagate_phased(net, Z0, {}).out, y)


def zonotope_verify(net: LayeredNetwork, x, y: int, eps: float) -> bool:
    """True iff every competitor logit is provably below the label logit on the region."""
    return bool(np.all(zonotope_margins(net, x, y, eps) < 0))


def complete_verify(net: LayeredNetwork, x, y: int, eps: float, budget: int = 50) -> CompleteResult:
    """Depth-first ReLU branch-and-bound, at most ``budget`` splits."""
    x = np.asarray(x, dtype=np.float64)
    Z0 = input_region(x, eps)
    stack = [{}]
    nodes = splits = 0
    gap = False
    while stack:
        phases = stack.pop()
        nodes += 1
        node = _propagate_phased(net, Z0, phases)
        if node.infeasible:
            continue
        ub = _margin_upper(node.out, y)
        if np.all(ub < 0):
            continue
        k = int(np.argmax(ub))
        cand = _sign_candidate(Z0, node.out, y, k)
        if _predict_one(net, cand) != y:
            return CompleteResult("falsified", cand, nodes, splits)
        unstable = _unstable(node.records)
        if not unstable:
            status, xs = _leaf_lp(net, Z0, node, y, ub)
            if status == "falsified":
                return CompleteResult("falsified", xs, nodes, splits)
            gap |= status == "gap"
            continue
        if splits >= budget:
            return CompleteResult("unknown", None, nodes, splits, "budget exhausted")
        widths = np.array([w for _, _, w in unstable])
        layer, neuron, _ = unstable[int(np.argmax(widths))]
        splits += 1
        n = node.records[[r[0] for r in node.records].index(layer)][3].size
        for sign in (-1, 1):
            child = {key: val.copy() for key, val in phases.items()}
            arr = child.get(layer, np.zeros(n, dtype=np.int8))
            arr[neuron] = sign
            child[layer] = arr
            stack.append(child)
    if gap:
        return CompleteResult("unknown", None, nodes, splits, "unresolved leaf")
    return CompleteResult("verified", None, nodes, splits)


def certify(net: LayeredNetwork, x, y: int, eps: float, cfg: CertifyConfig, seed=None) -> CertificationVerdict:
    """Run the staged pipeline on one example."""
    x = np.asarray(x, dtype=np.float64)
    if _predict_one(net, x) != y:
        return CertificationVerdict(Outcome.MISCLASSIFIED, "predict")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    x_adv, success = input_pgd_batch(net, x[None], [y], eps, cfg.attack, rng)
    if success[0]:
        return CertificationVerdict(Outcome.FALSIFIED, "attack", x_adv=x_adv[0], attack_success=True)
    margins = zonotope_margins(net, x, y, eps)
    margin_list = [float(v) for k, v in enumerate(margins) if k != y]
    if np.all(margins < 0):
        return CertificationVerdict(Outcome.VERIFIED_ZONOTOPE, "zonotope", margins=margin_list, nodes=1)
    res = complete_verify(net, x, y, eps, cfg.budget)
    outcome = {
        "verified": Outcome.VERIFIED_COMPLETE,
        "falsified": Outcome.FALSIFIED,
        "unknown": Outcome.UNKNOWN,
    }[res.status]
    return CertificationVerdict(outcome, "complete", x_adv=res.x_adv, margins=margin_list, nodes=res.nodes, splits=res.splits)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def certify_dataset(net: LayeredNetwork, X, Y, eps: float, cfg: CertifyConfig) -> list:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)

    def one(i):
        return certify(net, X[i], int(Y[i]), eps, cfg, seed=[cfg.seed, i])

    threads = _threads()
    if threads == 1:
        return [one(i) for i in range(len(Y))]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, range(len(Y))))


def _nonempty(Y):
    if len(Y) == 0:
        raise MetricError("metric undefined on an empty dataset")


def accuracy(net: LayeredNetwork, X, Y) -> float:
    _nonempty(Y)
    pred = np.argmax(net.forward_from(np.asarray(X, dtype=np.float64), 0), axis=1)
    return float(np.mean(pred == np.asarray(Y)))


def certified_robustness(net: LayeredNetwork, X, Y, eps: float, cfg: CertifyConfig) -> float:
    _nonempty(Y)
    verdicts = certify_dataset(net, X, Y, eps, cfg)
    return sum(v.verified for v in verdicts) / len(verdicts)


def verified_error(net: LayeredNetwork, X, Y, eps: float, attack: AttackConfig, seed=0) -> float:
    """Fraction of correctly classified examples broken by input PGD."""
    _nonempty(Y)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    correct = np.argmax(net.forward_from(X, 0), axis=1) == Y
    if not correct.any():
        raise MetricError("verified error undefined: no correctly classified examples")
    _, success = input_pgd_batch(net, X[correct], Y[correct], eps, attack, np.random.default_rng(seed))
    return float(success.mean())


def latent_robust_mask(net: LayeredNetwork, X, Y, eps: float, layer: int, attack: AttackConfig, seed=0, chunk=100):
    """Per-example: correct and the latent attack at ``layer`` keeps the label."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.int64)
    net.latent_index(layer)
    rng = np.random.default_rng(seed)
    correct = np.argmax(net.forward_from(X, 0), axis=1) == Y
    robust = np.zeros(len(Y), dtype=bool)
    idx = np.nonzero(correct)[0]
    for start in range(0, idx.size, chunk):
        sel = idx[start : start + chunk]
        Z = region_at(net, X[sel], eps, layer)
        x_adv, _, _ = latent_pgd_batch(Z, net, Y[sel], attack, rng)
        robust[sel] = np.argmax(net.forward_from(x_adv, layer), axis=1) == Y[sel]
    return robust


def latent_robustness(net: LayeredNetwork, X, Y, eps: float, layer: int, attack: AttackConfig, seed=0) -> float:
    _nonempty(Y)
    return float(latent_robust_mask(net, X, Y, eps, layer, attack, seed).mean())


@dataclass
class MetricsReport:
    acc: float
    cr: float
    ve: float | None
    lr: float | None
    counts: dict = field(default_factory=dict)

    def as_dict(self):
        return {"acc": self.acc, "cr": self.cr, "ve": self.ve, "lr": self.lr, "counts": dict(self.counts)}


def metrics_from_verdicts(verdicts: list, lr_mask=None) -> MetricsReport:
    n = len(verdicts)
    if n == 0:
        raise MetricError("metric undefined on an empty dataset")
    correct = sum(v.correct for v in verdicts)
    verified = sum(v.verified for v in verdicts)
    broken = sum(v.attack_success for v in verdicts)
    counts = {
        "n": n,
        "correct": correct,
        "verified": verified,
        "attack_falsified": broken,
    }
    for o in Outcome:
        counts[o.value] = sum(v.outcome is o for v in verdicts)
    lr = None
    if lr_mask is not None:
        counts["latent_robust"] = int(np.sum(lr_mask))
        lr = float(np.mean(lr_mask))
    ve = broken / correct if correct else None
    return MetricsReport(correct / n, verified / n, ve, lr, counts)
