"""Layered feed-forward networks: dense, convolution and ReLU layers."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, ClassVar

import numpy as np

from ..errors import ShapeError, UnsupportedOpError
from . import autodiff as ad
from .. import kernels

PROB_FLOOR = 1e-12


@dataclass(eq=False)
class Dense:
    weight: np.ndarray
    bias: np.ndarray
    frozen: bool = False
    kind: ClassVar[str] = "dense"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1]:
            raise ShapeError(f"dense layer expects {self.weight.shape[1]} inputs, got shape {in_shape}")
        return (self.weight.shape[0],)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass(eq=False)
class Conv:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    frozen: bool = False
    kind: ClassVar[str] = "conv"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"conv kernel {self.kernel.shape} / bias {self.bias.shape} mismatch")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.kernel.shape[1]:
            raise ShapeError(f"conv layer expects {self.kernel.shape[1]} input channels, got shape {in_shape}")
        _, h, w = in_shape
        kh, kw = self.kernel.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output would be empty for input {in_shape}")
        return (self.kernel.shape[0], ho, wo)

    def params(self):
        return {"weight": self.kernel, "bias": self.bias}


@dataclass(eq=False)
class ReLU:
    frozen: bool = False
    kind: ClassVar[str] = "relu"

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return {}


Layer = Dense | Conv | ReLU


def apply_layer(layer, h: np.ndarray, with_bias: bool = True) -> np.ndarray:
    """Apply one layer to a batch ``h`` of shape (N, *in_shape)."""
    if layer.kind == "dense":
        out = h.reshape(h.shape[0], -1) @ layer.weight.T
        return out + layer.bias if with_bias else out
    if layer.kind == "conv":
        bias = layer.bias if with_bias else None
        return kernels.conv2d_forward(h, layer.kernel, bias, layer.stride, layer.padding)
    return np.maximum(h, 0.0)


@dataclass(eq=False)
class LayeredNetwork:
    layers: list
    input_shape: tuple
    seed: int | None = None
    shapes: list = field(init=False, repr=False)
    blocks: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        self.shapes = shapes
        if len(shapes[-1]) != 1:
            raise ShapeError("the last layer must produce a logit vector")
        blocks = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "relu":
                if not blocks or blocks[-1][1] != i:
                    raise ShapeError("every ReLU must directly follow a dense or conv layer")
                blocks[-1] = (blocks[-1][0], i + 1)
            else:
                blocks.append((i, i + 1))
        self.blocks = blocks
        self._check_freeze_order()

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def latent_index(self, l: int) -> int:
        """Index into ``layers`` where the suffix starting at latent position ``l`` begins.

        Position 0 is the input; position k sits after the k-th block
        (affine layer plus its ReLU).
        """
        if not 0 <= l < self.depth:
            raise ShapeError(f"latent layer index {l} outside [0, {self.depth})")
        return 0 if l == 0 else self.blocks[l - 1][1]

    def latent_shape(self, l: int) -> tuple:
        return self.shapes[self.latent_index(l)]

    def named_parameters(self, trainable_only: bool = False):
        out = []
        for i, layer in enumerate(self.layers):
            if trainable_only and layer.frozen:
                continue
            for name, arr in layer.params().items():
                out.append((f"{i}.{name}", arr))
        return out

    def parameter_count(self) -> int:
        return int(sum(a.size for _, a in self.named_parameters()))

    def freeze_blocks(self, count: int):
        """Freeze the first ``count`` blocks."""
        for start, stop in self.blocks[:count]:
            for layer in self.layers[start:stop]:
                layer.frozen = True
        self._check_freeze_order()

    def frozen_blocks(self) -> int:
        n = 0
        for start, _ in self.blocks:
            if not self.layers[start].frozen:
                break
            n += 1
        return n

    def _check_freeze_order(self):
        flags = [layer.frozen for layer in self.layers]
        if any(b and not a for a, b in zip(flags, flags[1:])):
            raise ShapeError("frozen layers must form a prefix of the network")

    def copy(self) -> "LayeredNetwork":
        return copy.deepcopy(self)

    def _as_batch(self, x, shape):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == tuple(shape):
            return x[None], True
        if x.shape[1:] == tuple(shape):
            return x, False
        raise ShapeError(f"input of shape {x.shape} does not match expected {tuple(shape)}")

    def forward_from(self, h, l: int = 0) -> np.ndarray:
        """Run the suffix from latent position ``l`` on ``h``."""
        start = self.latent_index(l)
        hb, single = self._as_batch(h, self.shapes[start])
        for layer in self.layers[start:]:
            hb = apply_layer(layer, hb)
        return hb[0] if single else hb

    def graph_forward(self, h, l: int = 0, params: dict | None = None):
        """Differentiable suffix forward; ``params`` maps names to :class:`Var` leaves."""
        start = self.latent_index(l)
        hv = ad.as_var(h)
        if hv.shape[1:] != tuple(self.shapes[start]):
            raise ShapeError(f"batched input of shape {hv.shape} does not match {(None,) + self.shapes[start]}")
        params = params or {}
        for i in range(start, len(self.layers)):
            layer = self.layers[i]
            if layer.kind == "relu":
                hv = ad.relu(hv)
                continue
            w = params.get(f"{i}.weight", layer.params()["weight"])
            b = params.get(f"{i}.bias", layer.bias)
            if layer.kind == "dense":
                hv = ad.dense(hv, w, b)
            else:
                hv = ad.conv2d(hv, w, b, layer.stride, layer.padding)
        return hv


def init_network(arch, input_shape, seed: int) -> LayeredNetwork:
    """Build a network from ``arch`` with seeded uniform fan-in initialisation.

    ``arch`` is a list of tuples ``("conv", out_channels, kernel, stride, padding)``
    or ``("dense", units)``. A ReLU follows every layer except the last.
    """
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for i, spec in enumerate(arch):
        if spec[0] == "conv":
            _, out_ch, k, stride, pad = spec
            fan_in = shape[0] * k * k
            bound = np.sqrt(6.0 / fan_in)
            layer = Conv(rng.uniform(-bound, bound, size=(out_ch, shape[0], k, k)), np.zeros(out_ch), stride, pad)
        elif spec[0] == "dense":
            fan_in = int(np.prod(shape))
            bound = np.sqrt(6.0 / fan_in)
            layer = Dense(rng.uniform(-bound, bound, size=(spec[1], fan_in)), np.zeros(spec[1]))
        else:
            raise ShapeError(f"unknown layer spec {spec!r}")
        layers.append(layer)
        shape = layer.out_shape(shape)
        if i < len(arch) - 1:
            layers.append(ReLU())
    return LayeredNetwork(layers, tuple(input_shape), seed=seed)


def forward(net: LayeredNetwork, x) -> np.ndarray:
    return net.forward_from(x, 0)


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def argmax_lowest(z) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return np.argmax(np.asarray(z), axis=-1)


def predict(net: LayeredNetwork, x):
    z = forward(net, x)
    out = argmax_lowest(z)
    return int(out) if np.ndim(out) == 0 else out


def cross_entropy(p, y):
    """``-log(p_y + 1e-12)``; accepts arrays or graph values, shapes (K,) or (N, K)."""
    if isinstance(p, ad.Var):
        return ad.mul(ad.log(ad.add(ad.take_along_last(p, y), PROB_FLOOR)), -1.0)
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    yy = np.asarray(y)
    if np.any((yy < 0) | (yy >= k)):
        raise IndexError(f"label {y} outside [0, {k})")
    if p.ndim == 1:
        return float(-np.log(p[int(yy)] + PROB_FLOOR))
    return -np.log(np.take_along_axis(p, yy.astype(np.int64)[:, None], axis=1)[:, 0] + PROB_FLOOR)


class GraphNet:
    """View of a network whose trainable parameters are graph leaves."""

    def __init__(self, net: LayeredNetwork, params: dict):
        self.net = net
        self.params = params

    def forward(self, h, l: int = 0):
        return self.net.graph_forward(h, l, self.params)


def grad_params(net: LayeredNetwork, loss_closure: Callable, batch=None) -> dict:
    """Gradients of ``loss_closure(GraphNet, batch)`` for every non-frozen parameter."""
    leaves = {name: ad.Var(arr, requires_grad=True) for name, arr in net.named_parameters(trainable_only=True)}
    loss = loss_closure(GraphNet(net, leaves), batch)
    if not isinstance(loss, ad.Var):
        raise UnsupportedOpError(f"loss closure returned {type(loss).__name__}, not a graph value")
    if loss.value.size != 1:
        raise UnsupportedOpError("loss closure must return a scalar")
    loss.backward()
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)) for name, leaf in leaves.items()}


def grad_wrt_activation(net: LayeredNetwork, l: int, x_l, loss_closure: Callable) -> np.ndarray:
    """Gradient of ``loss_closure(suffix_logits)`` with respect to the activation at position ``l``.

    ``x_l`` may be a single activation or a batch; the closure receives
    batched logits and must return a scalar graph value.
    """
    xb, single = net._as_batch(x_l, net.latent_shape(l))
    leaf = ad.Var(xb, requires_grad=True)
    loss = loss_closure(net.graph_forward(leaf, l))
    if not isinstance(loss, ad.Var):
        raise UnsupportedOpError(f"loss closure returned {type(loss).__name__}, not a graph value")
    loss.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(xb)
    return g[0] if single else g
