"""Declarative layer stacks and the mapper / classifier / discriminator presets."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

KINDS = ("conv2d", "maxpool2d", "batchnorm2d", "linear", "relu", "dropout", "flatten", "softmax", "sigmoid")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class SpecError(ValueError):
    """A ModelSpec whose layer shapes do not line up."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int | None = None  # conv filters, or linear output width
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] | None = None
    padding: tuple[int, int] = (0, 0)
    p: float = 0.0
    in_features: int | None = None
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if min(self.kernel) < 1 or (self.stride is not None and min(self.stride) < 1):
            raise SpecError(f"{self.kind}: kernel and stride must be >= 1")
        if min(self.padding) < 0:
            raise SpecError(f"{self.kind}: padding must be >= 0")
        if not 0 <= self.p < 1:
            raise SpecError(f"{self.kind}: dropout probability must lie in [0, 1)")

    @property
    def step(self) -> tuple[int, int]:
        if self.stride is not None:
            return self.stride
        return self.kernel if self.kind == "maxpool2d" else (1, 1)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        def tup(v):
            return tuple(v) if isinstance(v, list) else v

        layers = tuple(LayerSpec(**{k: tup(v) for k, v in layer.items()}) for layer in d["layers"])
        return cls(d["name"], layers, tuple(d["input_shape"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def output_shape(self) -> tuple[int, ...]:
        return infer_shapes(self)[-1]


def _out_len(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-example shapes: input first, then after every layer."""
    shapes = [tuple(spec.input_shape)]
    for i, layer in enumerate(spec.layers):
        shape = shapes[-1]
        where = f"{spec.name} layer {i} ({layer.kind})"
        if layer.kind in ("conv2d", "maxpool2d", "batchnorm2d") and len(shape) != 3:
            raise SpecError(f"{where}: expects (channels, height, width) input, got {shape}")
        if layer.kind in ("conv2d", "maxpool2d"):
            c, h, w = shape
            pad = layer.padding if layer.kind == "conv2d" else (0, 0)
            oh = _out_len(h, layer.kernel[0], layer.step[0], pad[0])
            ow = _out_len(w, layer.kernel[1], layer.step[1], pad[1])
            if oh < 1 or ow < 1:
                raise SpecError(f"{where}: kernel {layer.kernel} does not fit input {shape}")
            if layer.kind == "conv2d":
                if not layer.channels:
                    raise SpecError(f"{where}: conv2d needs a channel count")
                c = layer.channels
            shapes.append((c, oh, ow))
        elif layer.kind == "flatten":
            shapes.append((int(np.prod(shape)),))
        elif layer.kind == "linear":
            if len(shape) != 1:
                raise SpecError(f"{where}: linear expects a flat input, got {shape}")
            if layer.in_features is not None and layer.in_features != shape[0]:
                raise SpecError(f"{where}: expects width {layer.in_features}, previous layer produces {shape[0]}")
            if not layer.channels:
                raise SpecError(f"{where}: linear needs an output width")
            shapes.append((layer.channels,))
        else:
            shapes.append(shape)
    return shapes


# ---------------------------------------------------------------- presets


def conv(channels, kernel, stride=(1, 1), padding=None, bias=True) -> LayerSpec:
    if padding is None:
        padding = (kernel[0] // 2, kernel[1] // 2)
    return LayerSpec("conv2d", channels=channels, kernel=tuple(kernel), stride=tuple(stride),
                     padding=tuple(padding), bias=bias)


def pool(kernel, stride=None) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel=tuple(kernel), stride=tuple(stride) if stride else None)


def linear(width, in_features=None) -> LayerSpec:
    return LayerSpec("linear", channels=width, in_features=in_features)


RELU = LayerSpec("relu")
BN = LayerSpec("batchnorm2d")
FLAT = LayerSpec("flatten")
SOFTMAX = LayerSpec("softmax")
SIGMOID = LayerSpec("sigmoid")


def kaggle_m(input_shape=(1, 64, 429), pool_kernel=(2, 2)) -> ModelSpec:
    kernels = [(11, 11), (5, 5), (3, 3), (3, 3), (3, 3)]
    channels = [48, 128, 192, 192, 128]
    strides = [(2, 3), (2, 3), (1, 1), (1, 1), (1, 1)]
    layers: list[LayerSpec] = []
    for i, (k, c, s) in enumerate(zip(kernels, channels, strides)):
        layers += [conv(c, k, s), RELU]
        if i in (0, 1, 4):
            layers += [pool(pool_kernel), BN]
    return ModelSpec("kaggle_m", tuple(layers), tuple(input_shape))


def dcase_m(input_shape=(1, 64, 429)) -> ModelSpec:
    # Batch-norm directly after each conv cancels a conv bias, so none is kept.
    layers = (
        conv(32, (7, 7), padding=(3, 3), bias=False), BN, RELU, pool((8, 4)),
        conv(64, (7, 7), padding=(3, 0), bias=False), BN, RELU, pool((4, 100)),
    )
    return ModelSpec("dcase_m", layers, tuple(input_shape))


def disc_kaggle(input_shape) -> ModelSpec:
    layers: list[LayerSpec] = []
    for c in (64, 32, 16):
        layers += [conv(c, (3, 3)), RELU, BN]
    layers += [FLAT, linear(1), SIGMOID]
    return ModelSpec("disc_kaggle", tuple(layers), tuple(input_shape))


def disc_dcase(input_shape) -> ModelSpec:
    return ModelSpec("disc_dcase", (FLAT, linear(1), SIGMOID), tuple(input_shape))


def _classifier(name, input_shape, hidden, n_classes, p) -> ModelSpec:
    layers: list[LayerSpec] = [FLAT]
    for width in hidden:
        layers += [linear(width), RELU, LayerSpec("dropout", p=p)]
    layers += [linear(n_classes), SOFTMAX]
    return ModelSpec(name, tuple(layers), tuple(input_shape))


def clf_kaggle(input_shape, n_classes=10, hidden=(256, 128)) -> ModelSpec:
    return _classifier("clf_kaggle", input_shape, hidden, n_classes, 0.25)


def clf_dcase(input_shape, n_classes=10, hidden=(256,)) -> ModelSpec:
    return _classifier("clf_dcase", input_shape, hidden, n_classes, 0.30)


def mlp(input_shape, widths: Sequence[int], *, head: str | None = None, p: float = 0.0,
        name: str = "mlp") -> ModelSpec:
    """Linear layers of the given widths, ReLU between them.

    ``head`` picks the final non-linearity: ``None`` keeps ReLU after the last
    layer too, ``"linear"`` leaves the last layer affine, and
    ``"softmax"``/``"sigmoid"`` end the stack with that activation.
    """
    layers: list[LayerSpec] = [FLAT] if len(input_shape) != 1 else []
    for i, width in enumerate(widths):
        layers.append(linear(width))
        last = i == len(widths) - 1
        if not last or head is None:
            layers.append(RELU)
            if p and not last:
                layers.append(LayerSpec("dropout", p=p))
    if head not in (None, "linear"):
        layers.append(LayerSpec(head))
    return ModelSpec(name, tuple(layers), tuple(input_shape))


PRESETS = {
    "kaggle_m": kaggle_m,
    "dcase_m": dcase_m,
    "disc_kaggle": disc_kaggle,
    "disc_dcase": disc_dcase,
    "clf_kaggle": clf_kaggle,
    "clf_dcase": clf_dcase,
    "mlp": mlp,
}


def preset(name: str, *args, **kwargs) -> ModelSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    return PRESETS[name](*args, **kwargs)


# ---------------------------------------------------------------- models


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def clone(self) -> "Model":
        return Model(
            self.spec,
            {k: Tensor(t.data.copy()) for k, t in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.training,
            copy.deepcopy(self.rng),
        )

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Instantiate ``spec`` with parameters drawn deterministically from ``seed``."""
    shapes = infer_shapes(spec)
    dtype = ad.get_dtype()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for i, (layer, shape) in enumerate(zip(spec.layers, shapes)):
        if layer.kind == "conv2d":
            c = shape[0]
            kh, kw = layer.kernel
            f = layer.channels
            params[f"{i}.weight"] = Tensor(_glorot(rng, (f, c, kh, kw), c * kh * kw, f * kh * kw, dtype))
            if layer.bias:
                params[f"{i}.bias"] = Tensor(np.zeros(f, dtype=dtype))
        elif layer.kind == "linear":
            fan_in, fan_out = shape[0], layer.channels
            params[f"{i}.weight"] = Tensor(_glorot(rng, (fan_in, fan_out), fan_in, fan_out, dtype))
            params[f"{i}.bias"] = Tensor(np.zeros(fan_out, dtype=dtype))
        elif layer.kind == "batchnorm2d":
            c = shape[0]
            params[f"{i}.scale"] = Tensor(np.ones(c, dtype=dtype))
            params[f"{i}.shift"] = Tensor(np.zeros(c, dtype=dtype))
            buffers[f"{i}.running_mean"] = np.zeros(c, dtype=dtype)
            buffers[f"{i}.running_var"] = np.ones(c, dtype=dtype)
    return Model(spec, params, buffers, True, np.random.default_rng([seed, 1]))


def forward(model: Model, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=ad.get_dtype()))
    expected = tuple(model.spec.input_shape)
    if tuple(x.shape[1:]) != expected:
        raise ContractError(f"{model.spec.name}: expected input (N, {', '.join(map(str, expected))}), got {x.shape}")
    p = model.params
    for i, layer in enumerate(model.spec.layers):
        kind = layer.kind
        if kind == "conv2d":
            x = ad.conv2d(x, p[f"{i}.weight"], p.get(f"{i}.bias"), layer.step, layer.padding)
        elif kind == "maxpool2d":
            x = ad.max_pool2d(x, layer.kernel, layer.step)
        elif kind == "batchnorm2d":
            x = _batch_norm(model, i, x)
        elif kind == "linear":
            x = ad.add(ad.matmul(x, p[f"{i}.weight"]), p[f"{i}.bias"])
        elif kind == "relu":
            x = ad.relu(x)
        elif kind == "dropout":
            if model.training and layer.p > 0:
                x = ad.dropout(x, layer.p, model.rng)
        elif kind == "flatten":
            x = ad.flatten(x)
        elif kind == "softmax":
            x = ad.softmax(x, axis=-1)
        elif kind == "sigmoid":
            x = ad.sigmoid(x)
    return x


def _batch_norm(model: Model, i: int, x: Tensor) -> Tensor:
    scale, shift = model.params[f"{i}.scale"], model.params[f"{i}.shift"]
    rm, rv = model.buffers[f"{i}.running_mean"], model.buffers[f"{i}.running_var"]
    if not model.training:
        return ad.batch_norm(x, scale, shift, mean_=rm, var_=rv, eps=BN_EPS)
    out, mu, var = ad.batch_norm(x, scale, shift, eps=BN_EPS)
    m = x.size // x.shape[1]
    unbiased = var * (m / max(m - 1, 1))
    rm *= 1 - BN_MOMENTUM
    rm += BN_MOMENTUM * mu.astype(rm.dtype)
    rv *= 1 - BN_MOMENTUM
    rv += BN_MOMENTUM * unbiased.astype(rv.dtype)
    return out


def softmax(logits) -> Tensor:
    return ad.softmax(logits if isinstance(logits, Tensor) else Tensor(logits), axis=-1)
