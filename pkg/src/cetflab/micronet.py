"""Minimal convolutional network engine with batch norm and hand-written backprop.

Public tensors are numpy ``float32`` arrays in NCHW order (or ``[N, F]`` for
flat inputs).  Internally, 4-D activations travel in CNHW order: per-channel
batch-norm reductions then run over a contiguous block and the im2col matmul
produces its output without a transpose.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError

CHECKPOINT_MAGIC = b"CBDL"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    size: int = 2
    out_features: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride, pad=self.pad)
        elif self.kind == "maxpool":
            d.update(size=self.size)
        elif self.kind == "dense":
            d.update(out_features=self.out_features)
        return d


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [spec.to_dict() for spec in self.layers],
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            layers = tuple(LayerSpec(**spec) for spec in d["layers"])
            return cls(
                input_shape=tuple(int(v) for v in d["input_shape"]),
                num_classes=int(d["num_classes"]),
                layers=layers,
                bn_momentum=float(d.get("bn_momentum", 0.1)),
                bn_eps=float(d.get("bn_eps", 1e-5)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed network config: {exc}") from exc

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer; raises ConfigError if they don't compose."""
        shapes = []
        shape = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            shape = _out_shape(spec, shape, i)
            shapes.append(shape)
        if shape != (self.num_classes,):
            raise ConfigError(f"network ends in shape {shape}, expected ({self.num_classes},)")
        return shapes


def reference_config(
    widths: Sequence[int] = (8, 16),
    num_classes: int = 10,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> NetworkConfig:
    """``len(widths)`` x (conv3x3 -> BN -> ReLU -> maxpool2), then flatten -> dense."""
    layers: list[LayerSpec] = []
    for w in widths:
        layers += [
            LayerSpec("conv", out_channels=int(w), kernel=3, stride=1, pad=1),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("maxpool", size=2),
        ]
    layers += [LayerSpec("flatten"), LayerSpec("dense", out_features=num_classes)]
    return NetworkConfig(tuple(input_shape), num_classes, tuple(layers), bn_momentum, bn_eps)


def _out_shape(spec: LayerSpec, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    where = f"layer {index} ({spec.kind})"
    if spec.kind == "conv":
        if len(shape) != 3:
            raise ConfigError(f"{where}: expects [C,H,W] input, got {shape}")
        c, h, w = shape
        if spec.out_channels < 1 or spec.kernel < 1 or spec.stride < 1 or spec.pad < 0:
            raise ConfigError(f"{where}: invalid hyperparameters")
        oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"{where}: kernel larger than padded input")
        return (spec.out_channels, oh, ow)
    if spec.kind == "maxpool":
        if len(shape) != 3:
            raise ConfigError(f"{where}: expects [C,H,W] input, got {shape}")
        c, h, w = shape
        if spec.size < 1 or h % spec.size or w % spec.size:
            raise ConfigError(f"{where}: size {spec.size} does not divide {h}x{w}")
        return (c, h // spec.size, w // spec.size)
    if spec.kind in ("batchnorm", "relu"):
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ConfigError(f"{where}: expects flat input, got {shape}")
        if spec.out_features < 1:
            raise ConfigError(f"{where}: out_features must be positive")
        return (spec.out_features,)
    raise ConfigError(f"{where}: unknown layer kind {spec.kind!r}")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float, epsilon: float, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


# ---------------------------------------------------------------------------
# layers
#
# forward(x, train) -> (y, cache); backward(dy, cache, need_dx, need_grads) -> (dx, grads).
# Layers never keep per-call state, so eval-mode forwards are re-entrant.


class Layer:
    kind = ""
    trainable: tuple[str, ...] = ()

    def tensors(self) -> dict[str, np.ndarray]:
        """All persistent arrays of the layer, trainable first."""
        return {}

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dy, cache, need_dx, need_grads):
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv"
    trainable = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel, stride, pad, rng, dtype=np.float32):
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)).astype(dtype)
        self.bias = np.zeros(out_channels, dtype)
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    def _cols(self, x):
        c, n, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]
        return cols.reshape(c * k * k, n * oh * ow), (n, oh, ow)

    def forward(self, x, train):
        cols, (n, oh, ow) = self._cols(x)
        o = self.weight.shape[0]
        out = self.weight.reshape(o, -1) @ cols
        out += self.bias[:, None]
        return out.reshape(o, n, oh, ow), (cols, x.shape)

    def backward(self, dy, cache, need_dx, need_grads):
        cols, xshape = cache
        o = self.weight.shape[0]
        dy2 = dy.reshape(o, -1)
        grads = {}
        if need_grads:
            grads["weight"] = (dy2 @ cols.T).reshape(self.weight.shape)
            grads["bias"] = dy2.sum(axis=1)
        dx = None
        if need_dx:
            c, n, h, w = xshape
            k, s, p = self.kernel, self.stride, self.pad
            oh, ow = dy.shape[2], dy.shape[3]
            dcols = (self.weight.reshape(o, -1).T @ dy2).reshape(c, k, k, n, oh, ow)
            dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[:, i, j]
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return dx, grads


class BatchNorm(Layer):
    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def __init__(self, channels, momentum, epsilon, dtype=np.float32):
        self.state = BatchNormState.fresh(channels, momentum, epsilon, dtype)

    def tensors(self):
        s = self.state
        return {"gamma": s.gamma, "beta": s.beta, "running_mean": s.running_mean, "running_var": s.running_var}

    @staticmethod
    def _axes(x):
        # CNHW -> per-channel over (N,H,W); [N,F] -> per-feature over N
        if x.ndim == 4:
            return (1, 2, 3), (-1, 1, 1, 1)
        return (0,), (1, -1)

    def forward(self, x, train):
        s = self.state
        axes, shape = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            centered = x - mean.reshape(shape)
            var = (centered * centered).mean(axis=axes)
            std = np.sqrt(var + s.epsilon)
            xhat = centered / std.reshape(shape)
            lam = s.momentum
            s.running_mean[...] = (1 - lam) * s.running_mean + lam * mean
            s.running_var[...] = (1 - lam) * s.running_var + lam * var
        else:
            std = np.sqrt(s.running_var + s.epsilon)
            xhat = (x - s.running_mean.reshape(shape)) / std.reshape(shape)
        y = s.gamma.reshape(shape) * xhat + s.beta.reshape(shape)
        return y, (xhat, std, train)

    def infer(self, x):
        """Eval-mode forward that overwrites ``x``; same arithmetic as :meth:`forward`."""
        s = self.state
        _, shape = self._axes(x)
        x -= s.running_mean.reshape(shape)
        x /= np.sqrt(s.running_var + s.epsilon).reshape(shape)
        np.multiply(s.gamma.reshape(shape), x, out=x)
        x += s.beta.reshape(shape)
        return x

    def backward(self, dy, cache, need_dx, need_grads):
        xhat, std, train = cache
        s = self.state
        axes, shape = self._axes(dy)
        grads = {}
        if need_grads:
            grads["gamma"] = (dy * xhat).sum(axis=axes)
            grads["beta"] = dy.sum(axis=axes)
        dx = None
        if need_dx:
            scale = (s.gamma / std).reshape(shape)
            if train:
                mean_dy = dy.mean(axis=axes).reshape(shape)
                mean_dy_xhat = (dy * xhat).mean(axis=axes).reshape(shape)
                dx = scale * (dy - mean_dy - xhat * mean_dy_xhat)
            else:
                dx = dy * scale
        return dx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        return np.maximum(x, 0), x > 0

    def infer(self, x):
        return np.maximum(x, 0, out=x)

    def backward(self, dy, cache, need_dx, need_grads):
        return (dy * cache if need_dx else None), {}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, size):
        self.size = size

    def forward(self, x, train, keep=True):
        k = self.size
        c, n, h, w = x.shape
        if not keep and k == 2:
            y = np.maximum(
                np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
                np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]),
            )
            return y, None
        win = x.reshape(c, n, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h // k, w // k, k * k)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, need_dx, need_grads):
        if not need_dx:
            return None, {}
        idx, (c, n, h, w) = cache
        k = self.size
        dwin = np.zeros(idx.shape + (k * k,), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(c, n, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, h, w)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train):
        if x.ndim == 2:
            return x, None
        c, n, h, w = x.shape
        return x.transpose(1, 0, 2, 3).reshape(n, c * h * w), x.shape

    def backward(self, dy, cache, need_dx, need_grads):
        if not need_dx or cache is None:
            return (dy if need_dx else None), {}
        c, n, h, w = cache
        return dy.reshape(n, c, h, w).transpose(1, 0, 2, 3), {}


class Dense(Layer):
    kind = "dense"
    trainable = ("weight", "bias")

    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        bound = math.sqrt(6.0 / (in_features + out_features))
        self.weight = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        self.bias = np.zeros(out_features, dtype)

    def tensors(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train):
        return x @ self.weight.T + self.bias, x

    def backward(self, dy, cache, need_dx, need_grads):
        grads = {}
        if need_grads:
            grads["weight"] = dy.T @ cache
            grads["bias"] = dy.sum(axis=0)
        return (dy @ self.weight if need_dx else None), grads


# ---------------------------------------------------------------------------
# network


def _resolve_mask(param_mask) -> str | frozenset:
    if param_mask in ("all", None):
        return "all"
    if param_mask in ("bn", "bn_only"):
        return "bn"
    return frozenset(param_mask)


class Network:
    """A feed-forward stack built from a :class:`NetworkConfig`.

    Parameters are addressed as ``"<layer index>.<tensor name>"``, e.g.
    ``"0.weight"`` or ``"1.running_mean"``.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        shapes = config.layer_shapes()
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        in_shape = tuple(config.input_shape)
        for spec, out_shape in zip(config.layers, shapes):
            if spec.kind == "conv":
                layer = Conv2D(in_shape[0], spec.out_channels, spec.kernel, spec.stride, spec.pad, rng, dtype)
            elif spec.kind == "batchnorm":
                layer = BatchNorm(in_shape[0], config.bn_momentum, config.bn_eps, dtype)
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "maxpool":
                layer = MaxPool(spec.size)
            elif spec.kind == "flatten":
                layer = Flatten()
            else:
                layer = Dense(in_shape[0], spec.out_features, rng, dtype)
            self.layers.append(layer)
            in_shape = out_shape
        self.layer_shapes = shapes

    # -- bookkeeping -------------------------------------------------------

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self):
        for layer in self.layers:
            for t in layer.tensors().values():
                return t.dtype
        return np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every persistent tensor, in layer order (live references, not copies)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.tensors().items():
                out[f"{i}.{name}"] = t
        return out

    def trainable_names(self) -> list[str]:
        return [f"{i}.{n}" for i, layer in enumerate(self.layers) for n in layer.trainable]

    def bn_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, BatchNorm)]

    def bn_states(self) -> list[BatchNormState]:
        return [self.layers[i].state for i in self.bn_indices()]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Deep copy with every tensor cast to ``dtype`` (float64 copies serve gradient checks)."""
        net = self.copy()
        for layer in net.layers:
            if isinstance(layer, BatchNorm):
                s = layer.state
                s.gamma, s.beta = s.gamma.astype(dtype), s.beta.astype(dtype)
                s.running_mean, s.running_var = s.running_mean.astype(dtype), s.running_var.astype(dtype)
            elif isinstance(layer, (Conv2D, Dense)):
                layer.weight, layer.bias = layer.weight.astype(dtype), layer.bias.astype(dtype)
        return net

    def last_conv_activation_index(self) -> int:
        """Index of the activation map GradCAM reads: the ReLU (or BN, or conv) closing the last conv block."""
        last_conv = max((i for i, l in enumerate(self.layers) if isinstance(l, Conv2D)), default=None)
        if last_conv is None:
            raise ConfigError("network has no conv layer")
        idx = last_conv
        for j in range(last_conv + 1, len(self.layers)):
            if isinstance(self.layers[j], (BatchNorm, ReLU)):
                idx = j
            else:
                break
        return idx

    # -- propagation -------------------------------------------------------

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch)
        expected = tuple(self.config.input_shape)
        if batch.ndim != len(expected) + 1 or tuple(batch.shape[1:]) != expected:
            raise ConfigError(f"input batch shape {batch.shape} does not match network input {expected}")
        if batch.dtype != self.dtype:
            batch = batch.astype(self.dtype)
        return batch

    def _run(self, batch, train: bool, keep: bool, record: bool = False):
        batch = self._check_batch(batch)
        if train and batch.shape[0] < 2:
            raise InputError("train-mode forward needs a batch of at least 2 images")
        x = batch.transpose(1, 0, 2, 3) if batch.ndim == 4 else batch
        fast = not (train or keep or record)
        owned = False
        caches, acts = [], []
        for layer in self.layers:
            if fast and hasattr(layer, "infer"):
                x = layer.infer(x if owned else x.copy())
                owned = True
                continue
            if isinstance(layer, MaxPool):
                x, cache = layer.forward(x, train, keep=keep)
            else:
                x, cache = layer.forward(x, train)
            owned = True
            if keep:
                caches.append(cache)
            if record:
                acts.append(x)
        return x, caches, acts

    def forward(self, batch, mode: str = "eval") -> np.ndarray:
        """Logits ``[N, classes]``.  Train mode updates BN running statistics."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        logits, _, _ = self._run(batch, mode == "train", keep=False)
        return logits

    def predict(self, batch, chunk: int = 512) -> np.ndarray:
        batch = np.asarray(batch)
        if len(batch) <= chunk:
            return self.forward(batch).argmax(axis=1)
        return np.concatenate([self.forward(batch[i : i + chunk]).argmax(axis=1) for i in range(0, len(batch), chunk)])

    def forward_with_activations(self, image) -> tuple[np.ndarray, list[np.ndarray]]:
        """Eval-mode logits ``[classes]`` and every layer's output for a single image.

        Activations are returned per sample: ``[C,H,W]`` for spatial layers,
        ``[F]`` for flat ones.
        """
        logits, _, acts = self._run(np.asarray(image)[None], train=False, keep=False, record=True)
        return logits[0], [_sample0(a) for a in acts]

    def backward(self, caches, grad_out, param_mask="all", need_input_grad=False, stop_at: int = 0):
        """Backpropagate ``grad_out`` (gradient w.r.t. the last computed tensor).

        Returns ``(grads, dx)`` where ``dx`` is the gradient reaching the input of
        layer ``stop_at`` (only when ``need_input_grad``), in internal layout.
        """
        mask = _resolve_mask(param_mask)
        wants = []
        for i, layer in enumerate(self.layers[: len(caches)]):
            if mask == "all":
                want = set(layer.trainable)
            elif mask == "bn":
                want = set(layer.trainable) if isinstance(layer, BatchNorm) else set()
            else:
                want = {n for n in layer.trainable if f"{i}.{n}" in mask}
            wants.append(want)
        # earliest layer whose input gradient is still needed by some parameter below it
        lowest = min((i for i, w in enumerate(wants) if w), default=len(caches))
        grads: dict[str, np.ndarray] = {}
        dy = grad_out
        for i in range(len(caches) - 1, stop_at - 1, -1):
            layer = self.layers[i]
            need_dx = need_input_grad or i > lowest
            if i == stop_at and not need_input_grad:
                need_dx = False
            dx, g = layer.backward(dy, caches[i], need_dx, bool(wants[i]))
            for name in wants[i]:
                grads[f"{i}.{name}"] = g[name]
            if not need_dx:
                dy = None
                break
            dy = dx
        return grads, dy

    def loss_and_grads(self, batch, labels, param_mask="all", mode: str = "train", input_grad: bool = False):
        """Mean softmax cross-entropy and its gradients.

        ``param_mask`` is ``"all"``, ``"bn"`` (gamma/beta of BN layers only) or an
        explicit collection of parameter names.  Train mode also updates BN running
        statistics, as any train-mode forward does.  With ``input_grad`` the
        gradient w.r.t. the input batch is returned under key ``"input"``.
        """
        labels = np.asarray(labels)
        n = len(labels)
        if labels.ndim != 1 or n != len(batch):
            raise InputError("labels must be a vector with one entry per image")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        logits, caches, _ = self._run(batch, mode == "train", keep=True)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        grads, dx = self.backward(caches, dlogits, param_mask, need_input_grad=input_grad)
        if input_grad:
            grads["input"] = dx.transpose(1, 0, 2, 3) if dx.ndim == 4 else dx
        return loss, grads

    def sgd_step(self, grads: dict[str, np.ndarray], lr: float) -> "Network":
        """In-place ``p <- p - lr * g`` for every gradient present; other tensors untouched."""
        params = self.state_dict()
        trainable = set(self.trainable_names())
        for name, g in grads.items():
            if name == "input":
                continue
            if name not in trainable:
                raise KeyError(f"gradient for unknown or non-trainable parameter {name!r}")
            p = params[name]
            if g.shape != p.shape:
                raise KeyError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            p -= (lr * g).astype(p.dtype, copy=False)
        return self


def _sample0(a: np.ndarray) -> np.ndarray:
    return a[:, 0] if a.ndim == 4 else a[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())
    d = ez / s
    d[np.arange(n), labels] -= 1
    return loss, d / n


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: Network
    loss_trace: list[float] = field(default_factory=list)


def train(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    seed: int = 0,
    param_mask="all",
    lr_schedule: str = "constant",
    log=None,
) -> TrainResult:
    """Plain minibatch SGD, in place.  Shuffle order is fixed by ``seed``.

    ``lr_schedule="cosine"`` anneals the rate to zero over the run.  A trailing
    batch of one image is dropped (train-mode BN needs two).
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise InputError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise InputError("images and labels differ in length")
    rng = np.random.default_rng(seed)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    result = TrainResult(net)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses, seen = [], 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            if lr_schedule == "cosine":
                rate = lr * 0.5 * (1 + math.cos(math.pi * step / total))
            else:
                rate = lr
            loss, grads = net.loss_and_grads(images[idx], labels[idx], param_mask=param_mask, mode="train")
            net.sgd_step(grads, rate)
            losses.append(loss * len(idx))
            seen += len(idx)
            step += 1
        result.loss_trace.append(float(np.sum(losses) / max(seen, 1)))
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs} loss {result.loss_trace[-1]:.4f}")
    return result


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian: "CBDL" | u32 version | u32 len + config JSON | u32 count |
# per tensor: u32 len + name | u32 rank | u32 dims... | f32 payload


def checkpoint_bytes(net: Network) -> bytes:
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    state = net.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, t in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def checkpoint_from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg = NetworkConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupt config block: {exc}") from exc
    net = Network(cfg)
    state = net.state_dict()
    count = r.u32()
    if count != len(state):
        raise FormatError(f"checkpoint holds {count} tensors, config implies {len(state)}")
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        if name not in state or state[name].shape != dims:
            raise FormatError(f"unexpected tensor {name} {dims}")
        payload = np.frombuffer(r.take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims)
        state[name][...] = payload
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor")
    return net


def load_checkpoint(path) -> Network:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from exc
    return checkpoint_from_bytes(data)


def parameter_count(config: NetworkConfig) -> int:
    return sum(t.size for t in Network(config).state_dict().values())


def tensors_equal(a: dict[str, np.ndarray], b: dict[str, np.ndarray], names: Iterable[str] | None = None) -> bool:
    names = list(a) if names is None else list(names)
    return all(np.array_equal(a[n], b[n]) and a[n].dtype == b[n].dtype for n in names)
