"""Layer definitions, traced single-image forward pass, model builders, model file I/O.

Feature maps are CHW float32, conv kernels OIHW (3x3, stride 1, zero-padded),
dense weights OI. Images enter as 8-bit CHW values in [0, 255]; the forward
pass scales them to [0, 1] and subtracts the per-channel means stored with the
model. Reductions accumulate in float64; layer outputs are stored as float32.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorio

KERNEL = 3
PAD = 1


class ShapeError(ValueError):
    """A tensor does not fit the model's layer chain."""


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Softmax:
    pass


def param_names(layers) -> list[tuple[str, str] | None]:
    """Per-layer (weight, bias) parameter names; None for parameter-free layers."""
    names: list[tuple[str, str] | None] = []
    n_conv = n_fc = 0
    for layer in layers:
        if isinstance(layer, Conv):
            names.append((f"conv{n_conv}.w", f"conv{n_conv}.b"))
            n_conv += 1
        elif isinstance(layer, Dense):
            names.append((f"fc{n_fc}.w", f"fc{n_fc}.b"))
            n_fc += 1
        else:
            names.append(None)
    return names


def layer_output_shape(layer, shape: tuple) -> tuple:
    """Shape produced by `layer` on an input of `shape`; raises ShapeError on misfit."""
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"conv expects ({layer.in_channels}, H, W), got {shape}")
        return (layer.out_channels, shape[1], shape[2])
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {shape}")
        if shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"maxpool needs even spatial extents, got {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if isinstance(layer, Flatten):
        if len(shape) != 3:
            raise ShapeError(f"flatten expects (C, H, W), got {shape}")
        return (shape[0] * shape[1] * shape[2],)
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeError(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, (ReLU, Softmax)):
        return shape
    raise ShapeError(f"unknown layer {layer!r}")


@dataclass
class ModelDef:
    """Immutable-by-convention model: layer chain plus named parameter tensors."""

    layers: tuple
    params: dict[str, np.ndarray]
    input_shape: tuple  # (C, H, W)
    mean: tuple  # per-channel mean subtracted after scaling pixels to [0, 1]
    feature_end: int  # index of the last MaxPool; boundary to the classifier

    def validate(self) -> None:
        chain_shapes(self)
        if not 0 <= self.feature_end < len(self.layers):
            raise ShapeError(f"feature_end {self.feature_end} out of range")
        if not isinstance(self.layers[self.feature_end], MaxPool):
            raise ShapeError("feature_end must point at a MaxPool layer")
        if not any(isinstance(l, Dense) for l in self.layers[self.feature_end + 1 :]):
            raise ShapeError("no Dense layer after feature_end")
        if len(self.mean) != self.input_shape[0]:
            raise ShapeError(f"{len(self.mean)} means for {self.input_shape[0]} channels")
        for idx, names in enumerate(param_names(self.layers)):
            if names is None:
                continue
            layer = self.layers[idx]
            w_name, b_name = names
            for name in names:
                if name not in self.params:
                    raise ShapeError(f"missing parameter {name!r}")
                self.params[name] = tensorio.check_tensor(self.params[name], name)
            if isinstance(layer, Conv):
                expect_w = (layer.out_channels, layer.in_channels, KERNEL, KERNEL)
                expect_b = (layer.out_channels,)
            else:
                expect_w = (layer.out_features, layer.in_features)
                expect_b = (layer.out_features,)
            if self.params[w_name].shape != expect_w:
                raise ShapeError(f"{w_name}: shape {self.params[w_name].shape}, expected {expect_w}")
            if self.params[b_name].shape != expect_b:
                raise ShapeError(f"{b_name}: shape {self.params[b_name].shape}, expected {expect_b}")

    def feature_grid_shape(self) -> tuple:
        return chain_shapes(self)[self.feature_end + 1]


def chain_shapes(model: ModelDef) -> list[tuple]:
    """Propagate the input shape through every layer; element 0 is the input shape."""
    shapes = [tuple(model.input_shape)]
    for idx, layer in enumerate(model.layers):
        try:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        except ShapeError as exc:
            raise ShapeError(f"layer {idx}: {exc}") from None
    return shapes


# ---------------------------------------------------------------------------
# forward operations


def im2col(x) -> np.ndarray:
    """(C, H, W) -> (H*W, C*9) float64 patch matrix for the 3x3/pad-1 geometry."""
    c, h, w = x.shape
    padded = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (PAD, PAD), (PAD, PAD)))
    win = sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))  # (C, H, W, 3, 3)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * KERNEL * KERNEL)


def col2im(cols, shape: tuple) -> np.ndarray:
    """Scatter-add inverse of im2col: (H*W, C*9) -> (C, H, W) float64."""
    c, h, w = shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=np.float64)
    patches = cols.reshape(h, w, c, KERNEL, KERNEL).transpose(2, 0, 1, 3, 4)
    for ky in range(KERNEL):
        for kx in range(KERNEL):
            padded[:, ky : ky + h, kx : kx + w] += patches[:, :, :, ky, kx]
    return padded[:, PAD : PAD + h, PAD : PAD + w]


def conv2d_forward(x, weight, bias) -> np.ndarray:
    """3x3 stride-1 zero-padded convolution with float64 accumulation."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"conv input must be (C, H, W), got {x.shape}")
    o, i, kh, kw = weight.shape
    if (kh, kw) != (KERNEL, KERNEL):
        raise ShapeError(f"conv kernel must be {KERNEL}x{KERNEL}, got {kh}x{kw}")
    if x.shape[0] != i:
        raise ShapeError(f"conv input has {x.shape[0]} channels, kernel expects {i}")
    _, h, w = x.shape
    cols = im2col(x)
    out = cols @ weight.reshape(o, -1).astype(np.float64).T + np.asarray(bias, np.float64)
    return out.T.reshape(o, h, w).astype(np.float32)


def maxpool_forward(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool; argmax holds the window-flat winner index (row-major,
    first maximum wins on ties)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial extents, got {x.shape}")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.uint8)


def pool_scatter(values, argmax, shape: tuple) -> np.ndarray:
    """Scatter per-cell values back to the argmax source positions (float64)."""
    c, h, w = shape
    win = np.zeros((c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), np.asarray(values, np.float64)[..., None], axis=-1)
    return win.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def dense_forward(x, weight, bias) -> np.ndarray:
    """out[o] = bias[o] + sum_i weight[o, i] * x[i], accumulated in float64."""
    x = np.asarray(x)
    if x.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"dense expects ({weight.shape[1]},), got {x.shape}")
    out = weight.astype(np.float64) @ x.astype(np.float64) + np.asarray(bias, np.float64)
    return out.astype(np.float32)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(logits) -> np.ndarray:
    """Max-subtracted stable softmax."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or not np.isfinite(z).all():
        raise ValueError("softmax needs a non-empty finite input")
    e = np.exp(z - z.max())
    return (e / e.sum()).astype(np.float32)


@dataclass
class ActivationTrace:
    """Per-layer inputs/outputs of one forward pass, plus pool winner indices."""

    inputs: list
    outputs: list
    pool_argmax: dict[int, np.ndarray]
    logits: np.ndarray
    probs: np.ndarray


def normalize(model: ModelDef, image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.shape != tuple(model.input_shape):
        raise ShapeError(f"image shape {img.shape}, model expects {tuple(model.input_shape)}")
    mean = np.asarray(model.mean, dtype=np.float32)[:, None, None]
    return img / np.float32(255.0) - mean


def forward_full(model: ModelDef, image) -> ActivationTrace:
    """Run every layer on one image, recording all intermediate activations."""
    x = normalize(model, image)
    names = param_names(model.layers)
    inputs, outputs = [], []
    pool_argmax: dict[int, np.ndarray] = {}
    for idx, layer in enumerate(model.layers):
        inputs.append(x)
        if isinstance(layer, Conv):
            w_name, b_name = names[idx]
            x = conv2d_forward(x, model.params[w_name], model.params[b_name])
        elif isinstance(layer, ReLU):
            x = relu(x)
        elif isinstance(layer, MaxPool):
            x, pool_argmax[idx] = maxpool_forward(x)
        elif isinstance(layer, Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, Dense):
            w_name, b_name = names[idx]
            x = dense_forward(x, model.params[w_name], model.params[b_name])
        elif isinstance(layer, Softmax):
            x = softmax(x)
        outputs.append(x)
    if isinstance(model.layers[-1], Softmax):
        logits, probs = inputs[-1], outputs[-1]
    else:
        logits, probs = outputs[-1], softmax(outputs[-1])
    return ActivationTrace(inputs, outputs, pool_argmax, logits, probs)


# ---------------------------------------------------------------------------
# builders


def _init_conv(rng, out_channels: int, in_channels: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (in_channels * KERNEL * KERNEL))
    return (rng.standard_normal((out_channels, in_channels, KERNEL, KERNEL)) * scale).astype(np.float32)


def _init_dense(rng, out_features: int, in_features: int) -> np.ndarray:
    scale = np.sqrt(2.0 / in_features)
    return (rng.standard_normal((out_features, in_features)) * scale).astype(np.float32)


def _assemble(layers, input_shape, rng) -> ModelDef:
    params = {}
    for idx, names in enumerate(param_names(layers)):
        if names is None:
            continue
        layer = layers[idx]
        if isinstance(layer, Conv):
            params[names[0]] = _init_conv(rng, layer.out_channels, layer.in_channels)
            params[names[1]] = np.zeros(layer.out_channels, dtype=np.float32)
        else:
            params[names[0]] = _init_dense(rng, layer.out_features, layer.in_features)
            params[names[1]] = np.zeros(layer.out_features, dtype=np.float32)
    feature_end = max(i for i, l in enumerate(layers) if isinstance(l, MaxPool))
    mean = tuple(0.5 for _ in range(input_shape[0]))
    model = ModelDef(tuple(layers), params, tuple(input_shape), mean, feature_end)
    model.validate()
    return model


def build_vgg_a(num_classes: int = 2, fc_width: int = 1024, seed: int = 0) -> ModelDef:
    """VGG-A feature extractor (8 convs, 5 pools, 224 -> 7) with a two-layer classifier."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    blocks = [(64,), (128,), (256, 256), (512, 512), (512, 512)]
    layers: list = []
    in_ch = 3
    for block in blocks:
        for out_ch in block:
            layers += [Conv(in_ch, out_ch), ReLU()]
            in_ch = out_ch
        layers.append(MaxPool())
    layers += [
        Flatten(),
        Dense(512 * 7 * 7, fc_width),
        ReLU(),
        Dense(fc_width, num_classes),
        Softmax(),
    ]
    return _assemble(layers, (3, 224, 224), rng)


def build_toy(width_multiplier: int = 1, seed: int = 0) -> ModelDef:
    """Three conv blocks (32 -> 4 spatial) mirroring the full detector's layout."""
    if width_multiplier < 1:
        raise ValueError("width multiplier must be >= 1")
    m = width_multiplier
    rng = np.random.default_rng(seed)
    layers = [
        Conv(3, 8 * m), ReLU(), MaxPool(),
        Conv(8 * m, 16 * m), ReLU(), MaxPool(),
        Conv(16 * m, 32 * m), ReLU(), MaxPool(),
        Flatten(),
        Dense(4 * 4 * 32 * m, 64 * m), ReLU(),
        Dense(64 * m, 2),
        Softmax(),
    ]
    return _assemble(layers, (3, 32, 32), rng)


# ---------------------------------------------------------------------------
# model file I/O: a JSON layer description plus a sibling RTEN parameter file

_LAYER_TAGS = {Conv: "conv", ReLU: "relu", MaxPool: "maxpool", Flatten: "flatten", Dense: "dense", Softmax: "softmax"}


def _layer_to_json(layer) -> dict:
    entry = {"type": _LAYER_TAGS[type(layer)]}
    if isinstance(layer, Conv):
        entry.update(in_channels=layer.in_channels, out_channels=layer.out_channels)
    elif isinstance(layer, Dense):
        entry.update(in_features=layer.in_features, out_features=layer.out_features)
    return entry


def _layer_from_json(entry: dict):
    kind = entry.get("type")
    if kind == "conv":
        return Conv(int(entry["in_channels"]), int(entry["out_channels"]))
    if kind == "dense":
        return Dense(int(entry["in_features"]), int(entry["out_features"]))
    simple = {"relu": ReLU, "maxpool": MaxPool, "flatten": Flatten, "softmax": Softmax}
    if kind in simple:
        return simple[kind]()
    raise ValueError(f"unknown layer type {kind!r}")


def _rten_sibling(json_path: Path) -> Path:
    return json_path.with_suffix(".rten")


def save_model(model: ModelDef, json_path) -> Path:
    """Write the layer description as JSON and the parameters as a sibling RTEN file."""
    json_path = Path(json_path)
    doc = {
        "layers": [_layer_to_json(l) for l in model.layers],
        "input_shape": list(model.input_shape),
        "mean": [float(v) for v in model.mean],
        "feature_end": model.feature_end,
        "params_file": _rten_sibling(json_path).name,
    }
    json_path.write_text(json.dumps(doc, indent=1) + "\n")
    ordered = [n for pair in param_names(model.layers) if pair for n in pair]
    tensorio.write_rten(_rten_sibling(json_path), [(n, model.params[n]) for n in ordered])
    return json_path


def load_model(json_path) -> ModelDef:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    layers = tuple(_layer_from_json(e) for e in doc["layers"])
    params = tensorio.read_rten(json_path.parent / doc.get("params_file", _rten_sibling(json_path).name))
    model = ModelDef(
        layers,
        params,
        tuple(int(v) for v in doc["input_shape"]),
        tuple(float(v) for v in doc["mean"]),
        int(doc["feature_end"]),
    )
    model.validate()
    return model


def model_param_hash(model: ModelDef) -> str:
    """Stable short hash over the serialized parameters."""
    ordered = [n for pair in param_names(model.layers) if pair for n in pair]
    return hashlib.sha256(tensorio.dumps([(n, model.params[n]) for n in ordered])).hexdigest()[:16]


def with_params(model: ModelDef, params: dict[str, np.ndarray]) -> ModelDef:
    """New ModelDef sharing everything but the parameter set."""
    return replace(model, params=params)
