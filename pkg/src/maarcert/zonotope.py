"""Zonotope abstract domain.

A zonotope is the set ``{a + A e : e in [-1, 1]^m}``. Centers have the
activation shape ``S`` of the layer they live at and generators are stored
generator-major, shape ``(m, *S)``. Batched zonotopes carry a leading batch
axis on both; batch members share the generator count (unused columns are
zero).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError
from .nn.network import LayeredNetwork, apply_layer

INPUT_TAG = -1
STABLE_WIDTH = 1e-9


@dataclass(frozen=True, eq=False)
class Zonotope:
    center: np.ndarray
    generators: np.ndarray
    provenance: np.ndarray
    layer_tag: int = 0
    batched: bool = False

    @property
    def num_generators(self) -> int:
        return self.generators.shape[1 if self.batched else 0]

    @property
    def shape(self) -> tuple:
        return self.center.shape[1:] if self.batched else self.center.shape

    def _batch_view(self):
        if self.batched:
            return self.center, self.generators
        return self.center[None], self.generators[None]

    def _rewrap(self, center_b, gens_b, provenance, layer_tag) -> "Zonotope":
        if self.batched:
            return Zonotope(center_b, gens_b, provenance, layer_tag, True)
        return Zonotope(center_b[0], gens_b[0], provenance, layer_tag, False)

    def member(self, b: int) -> "Zonotope":
        if not self.batched:
            raise ShapeError("member() needs a batched zonotope")
        return Zonotope(self.center[b], self.generators[b], self.provenance, self.layer_tag, False)


@dataclass(frozen=True, eq=False)
class IntervalBounds:
    lower: np.ndarray
    upper: np.ndarray


def _box(x, eps):
    x = np.asarray(x, dtype=np.float64)
    if eps < 0:
        raise DomainError("epsilon must be non-negative")
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("input outside [0, 1]")
    lo = np.maximum(0.0, x - eps)
    hi = np.minimum(1.0, x + eps)
    return lo, hi


def input_region(x, eps: float) -> Zonotope:
    """L-infinity ball around ``x`` clipped to the unit box, as a diagonal zonotope."""
    lo, hi = _box(x, eps)
    n = lo.size
    center = 0.5 * (lo + hi)
    gens = np.zeros((n, n))
    gens[np.arange(n), np.arange(n)] = 0.5 * (hi - lo).ravel()
    return Zonotope(center, gens.reshape((n,) + center.shape), np.full(n, INPUT_TAG), 0, False)


def input_region_batch(X, eps: float) -> Zonotope:
    lo, hi = _box(X, eps)
    b = lo.shape[0]
    n = lo[0].size
    center = 0.5 * (lo + hi)
    gens = np.zeros((b, n, n))
    idx = np.arange(n)
    gens[:, idx, idx] = 0.5 * (hi - lo).reshape(b, n)
    return Zonotope(center, gens.reshape((b, n) + center.shape[1:]), np.full(n, INPUT_TAG), 0, True)


def bounds(Z: Zonotope) -> IntervalBounds:
    """Exact interval hull: center -/+ row-wise L1 norm of the generators."""
    c, g = Z._batch_view()
    bsz, m = g.shape[0], g.shape[1]
    lo, hi = kernels.zono_bounds(c.reshape(bsz, -1), g.reshape(bsz, m, int(np.prod(c.shape[1:]))))
    lo, hi = lo.reshape(c.shape), hi.reshape(c.shape)
    if not Z.batched:
        lo, hi = lo[0], hi[0]
    return IntervalBounds(lo, hi)


def l1_rows_cauchy(Z: Zonotope, k: int, seed) -> np.ndarray:
    """Median-of-|Cauchy projections| estimate of each row's generator L1 norm."""
    if k < 1:
        raise ValueError("need at least one projection")
    c, g = Z._batch_view()
    rng = np.random.default_rng(seed)
    bsz, m = g.shape[0], g.shape[1]
    r = rng.standard_cauchy(size=(m, k))
    proj = np.einsum("bmn,mk->bkn", g.reshape(bsz, m, int(np.prod(c.shape[1:]))), r)
    est = np.median(np.abs(proj), axis=1).reshape(c.shape)
    return est if Z.batched else est[0]


def cauchy_bounds(Z: Zonotope, k: int, seed) -> IntervalBounds:
    est = l1_rows_cauchy(Z, k, seed)
    return IntervalBounds(Z.center - est, Z.center + est)


def affine(Z: Zonotope, layer) -> Zonotope:
    """Exact image under a dense or convolution layer."""
    if layer.kind not in ("dense", "conv"):
        raise ShapeError(f"affine() needs a dense or conv layer, got {layer.kind}")
    c, g = Z._batch_view()
    bsz, m = g.shape[0], g.shape[1]
    out_shape = layer.out_shape(c.shape[1:])
    new_c = apply_layer(layer, c)
    if m:
        new_g = apply_layer(layer, g.reshape((bsz * m,) + c.shape[1:]), with_bias=False)
        new_g = new_g.reshape((bsz, m) + out_shape)
    else:
        new_g = np.zeros((bsz, 0) + out_shape)
    return Z._rewrap(new_c, new_g, Z.provenance, Z.layer_tag + 1)


def relu(Z: Zonotope, pre_bounds: IntervalBounds | None = None, phases=None) -> Zonotope:
    """Sound ReLU transformer.

    Stable neurons pass through (l >= 0) or vanish (u <= 0). A crossing
    neuron is relaxed to ``lam * x + mu (1 + e_new)`` with ``lam = u/(u-l)``
    and ``mu = -u l / (2 (u - l))``; each gets its own fresh generator.
    ``phases`` optionally forces neurons active (+1) or inactive (-1).
    """
    if pre_bounds is None:
        pre_bounds = bounds(Z)
    c, g = Z._batch_view()
    bsz, m = g.shape[0], g.shape[1]
    lo = np.asarray(pre_bounds.lower).reshape(bsz, -1)
    hi = np.asarray(pre_bounds.upper).reshape(bsz, -1)
    cf = c.reshape(bsz, -1)
    gf = g.reshape(bsz, m, int(np.prod(c.shape[1:])))

    degenerate = (hi - lo) < STABLE_WIDTH
    active = np.where(degenerate, cf >= 0, lo >= 0)
    inactive = np.where(degenerate, cf < 0, hi <= 0)
    if phases is not None:
        ph = np.asarray(phases).reshape(bsz, -1)
        active = np.where(ph > 0, True, np.where(ph < 0, False, active))
        inactive = np.where(ph < 0, True, np.where(ph > 0, False, inactive))
    crossing = ~(active | inactive)

    width = np.where(crossing, hi - lo, 1.0)
    lam = np.where(active, 1.0, np.where(crossing, hi / width, 0.0))
    mu = np.where(crossing, -hi * lo / (2.0 * width), 0.0)

    new_c = lam * cf + mu
    scaled = gf * lam[:, None, :]
    counts = crossing.sum(axis=1)
    k = int(counts.max()) if bsz else 0
    fresh = np.zeros((bsz, k, cf.shape[1]))
    if k:
        rank = np.cumsum(crossing, axis=1) - 1
        bi, ii = np.nonzero(crossing)
        fresh[bi, rank[bi, ii], ii] = mu[bi, ii]
    new_g = np.concatenate([scaled, fresh], axis=1)
    prov = np.concatenate([Z.provenance, np.full(k, Z.layer_tag, dtype=Z.provenance.dtype)])
    shape = c.shape[1:]
    return Z._rewrap(new_c.reshape(c.shape), new_g.reshape((bsz, m + k) + shape), prov, Z.layer_tag + 1)


def sample(Z: Zonotope, e) -> np.ndarray:
    """Point ``a + A e`` of the zonotope; ``e`` must lie in the unit cube."""
    e = np.asarray(e, dtype=np.float64)
    if np.any(np.abs(e) > 1 + 1e-12):
        raise DomainError("generator coefficients outside [-1, 1]")
    if Z.batched:
        if e.shape != Z.generators.shape[:2]:
            raise ShapeError(f"coefficients {e.shape} do not match generators {Z.generators.shape[:2]}")
        return Z.center + np.einsum("bm,bm...->b...", e, Z.generators)
    if e.shape != (Z.num_generators,):
        raise ShapeError(f"coefficients {e.shape} do not match {Z.num_generators} generators")
    return Z.center + np.tensordot(e, Z.generators, axes=1)


def propagate(Z: Zonotope, net: LayeredNetwork, stop: int, estimator=None) -> Zonotope:
    """Push ``Z`` through ``net.layers[Z.layer_tag:stop]``.

    ``estimator`` is ``None`` for exact bounds or ``(k, rng)`` to use the
    Cauchy estimate before each ReLU.
    """
    for i in range(Z.layer_tag, stop):
        layer = net.layers[i]
        if layer.kind == "relu":
            if estimator is None:
                Z = relu(Z)
            else:
                k, rng = estimator
                Z = relu(Z, cauchy_bounds(Z, k, rng))
        else:
            Z = affine(Z, layer)
    return Z


def region_at(net: LayeredNetwork, x, eps: float, l: int, estimator=None) -> Zonotope:
    """Convex region at latent position ``l`` for one input or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        Z = input_region(x, eps)
    else:
        Z = input_region_batch(x, eps)
    return propagate(Z, net, net.latent_index(l), estimator)


def dumps(Z: Zonotope) -> str:
    """Structured-text dump for fixtures and debugging."""
    doc = {
        "layer_tag": Z.layer_tag,
        "batched": Z.batched,
        "center": {"shape": list(Z.center.shape), "data": Z.center.ravel().tolist()},
        "generators": {"shape": list(Z.generators.shape), "data": Z.generators.ravel().tolist()},
        "provenance": [int(t) for t in Z.provenance],
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def loads(text: str) -> Zonotope:
    doc = json.loads(text)
    c = np.asarray(doc["center"]["data"], dtype=np.float64).reshape(doc["center"]["shape"])
    g = np.asarray(doc["generators"]["data"], dtype=np.float64).reshape(doc["generators"]["shape"])
    return Zonotope(c, g, np.asarray(doc["provenance"], dtype=np.int64), doc["layer_tag"], doc["batched"])


def from_arrays(center, generators, layer_tag: int = 0) -> Zonotope:
    """Build a single zonotope from a center vector and an (n x m) generator matrix."""
    center = np.asarray(center, dtype=np.float64)
    A = np.asarray(generators, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != center.size:
        raise ShapeError("generator matrix must be (dimension x generators)")
    gens = A.T.reshape((A.shape[1],) + center.shape)
    return Zonotope(center, np.ascontiguousarray(gens), np.full(A.shape[1], INPUT_TAG), layer_tag, False)


def generator_matrix(Z: Zonotope) -> np.ndarray:
    """The (dimension x generators) matrix of a single zonotope."""
    return Z.generators.reshape(Z.num_generators, -1).T
