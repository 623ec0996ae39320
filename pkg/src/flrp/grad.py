"""Reverse-mode gradients over a traced forward pass, losses, SGD, augmentation.

Gradients are defined at the pre-softmax logits (softmax is folded into the
cross-entropy), accumulated in float64 and returned as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import (
    ActivationTrace,
    Conv,
    Dense,
    Flatten,
    MaxPool,
    ModelDef,
    ReLU,
    Softmax,
    col2im,
    forward_full,
    im2col,
    param_names,
    pool_scatter,
)


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class GradientBundle:
    input_grad: np.ndarray  # gradient w.r.t. the raw image (or the stop layer's output)
    param_grads: dict[str, np.ndarray]


def backward_full(model: ModelDef, trace: ActivationTrace, output_grad, stop_layer: int | None = None) -> GradientBundle:
    """Backpropagate `output_grad` (taken at the logits) down to the input.

    With `stop_layer` set, propagation halts there: input_grad is the gradient
    with respect to that layer's output and parameter gradients of the layers
    at or below it are omitted.
    """
    n = len(model.layers)
    if len(trace.inputs) != n or len(trace.outputs) != n:
        raise ValueError("trace does not match the model's layer count")
    start = n - 1
    while start >= 0 and isinstance(model.layers[start], Softmax):
        start -= 1
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ValueError(f"output gradient shape {g.shape}, logits shape {trace.logits.shape}")
    if stop_layer is not None and not 0 <= stop_layer < start:
        raise ValueError(f"stop layer {stop_layer} outside 0..{start - 1}")
    last = 0 if stop_layer is None else stop_layer + 1

    names = param_names(model.layers)
    param_grads: dict[str, np.ndarray] = {}
    for idx in range(start, last - 1, -1):
        layer = model.layers[idx]
        x = trace.inputs[idx]
        if isinstance(layer, Conv):
            w_name, b_name = names[idx]
            weight = model.params[w_name]
            o = weight.shape[0]
            _, h, w = x.shape
            gmat = g.reshape(o, h * w).T  # (H*W, O)
            cols = im2col(x)
            param_grads[w_name] = (gmat.T @ cols).reshape(weight.shape).astype(np.float32)
            param_grads[b_name] = g.sum(axis=(1, 2)).astype(np.float32)
            g = col2im(gmat @ weight.reshape(o, -1).astype(np.float64), x.shape)
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, MaxPool):
            g = pool_scatter(g, trace.pool_argmax[idx], x.shape)
        elif isinstance(layer, Flatten):
            g = g.reshape(x.shape)
        elif isinstance(layer, Dense):
            w_name, b_name = names[idx]
            param_grads[w_name] = np.outer(g, x).astype(np.float32)
            param_grads[b_name] = g.astype(np.float32)
            g = model.params[w_name].astype(np.float64).T @ g
    if stop_layer is None:
        g = g / 255.0  # input scaling folded into the image gradient
    return GradientBundle(g.astype(np.float32), param_grads)


def cross_entropy(probs, true_class: int) -> tuple[float, np.ndarray, bool]:
    """Negative log-likelihood and its gradient at the logits (p - onehot).

    Probabilities below 1e-12 are clamped before the log; the returned flag
    reports whether clamping occurred.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= true_class < p.shape[0]:
        raise IndexError(f"class {true_class} outside 0..{p.shape[0] - 1}")
    clamped = bool(p[true_class] < 1e-12)
    loss = -float(np.log(max(p[true_class], 1e-12)))
    grad = p.copy()
    grad[true_class] -= 1.0
    return loss, grad.astype(np.float32), clamped


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    jitter: bool = True  # +-2 px translation
    flip: bool = True  # horizontal, p = 0.5
    noise_sigma: float = 1.0  # Gaussian noise on the 0..255 scale
    salt_pepper: float = 0.005  # per-pixel corruption rate
    blur: bool = False  # 3x3 box blur, p = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be >= 1")
        if self.noise_sigma < 0 or not 0 <= self.salt_pepper < 1:
            raise ValueError("bad augmentation parameters")


def sgd_step(params: dict, grads: dict, velocity: dict | None, config: TrainConfig) -> tuple[dict, dict]:
    """Momentum SGD: v <- momentum*v - lr*g; w <- w + v."""
    new_params, new_velocity = {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {value.shape}")
        v = velocity.get(name) if velocity else None
        if v is None:
            v = np.zeros_like(value)
        v = (config.momentum * v - config.learning_rate * g).astype(np.float32)
        new_velocity[name] = v
        new_params[name] = value + v
    return new_params, new_velocity


def augment(image, rng, config: TrainConfig) -> np.ndarray:
    """Label- and shape-preserving input augmentation on the 0..255 scale."""
    x = np.asarray(image, dtype=np.float64)
    c, h, w = x.shape
    if config.jitter:
        dy, dx = rng.integers(-2, 3, size=2)
        padded = np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="edge")
        x = padded[:, 2 + dy : 2 + dy + h, 2 + dx : 2 + dx + w]
    if config.flip and rng.random() < 0.5:
        x = x[:, :, ::-1]
    if config.noise_sigma > 0:
        x = x + rng.normal(0.0, config.noise_sigma, size=x.shape)
    if config.salt_pepper > 0:
        u = rng.random((h, w))
        x = np.where(u < config.salt_pepper / 2, 255.0, x)
        x = np.where((u >= config.salt_pepper / 2) & (u < config.salt_pepper), 0.0, x)
    if config.blur and rng.random() < 0.5:
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
        x = sliding_window_view(padded, (3, 3), axis=(1, 2)).mean(axis=(-1, -2))
    return np.clip(x, 0.0, 255.0).astype(np.float32)


def train(model: ModelDef, images, labels, config: TrainConfig) -> tuple[ModelDef, list[tuple[int, float, float]]]:
    """Minimal deterministic SGD loop over single samples, batched gradient means.

    Returns the trained model and per-epoch (epoch, mean loss, accuracy) rows;
    accuracy is measured on the augmented training stream.
    """
    rng = np.random.default_rng(config.seed)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ValueError("no training samples")
    params = dict(model.params)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for s in range(0, n, config.batch_size):
            batch = order[s : s + config.batch_size]
            current = replace(model, params=params)
            acc: dict[str, np.ndarray] | None = None
            for j in batch:
                x = augment(images[j], rng, config)
                trace = forward_full(current, x)
                loss, logit_grad, _ = cross_entropy(trace.probs, int(labels[j]))
                bundle = backward_full(current, trace, logit_grad)
                total_loss += loss
                correct += int(np.argmax(trace.probs) == labels[j])
                if acc is None:
                    acc = {k: v.astype(np.float64) for k, v in bundle.param_grads.items()}
                else:
                    for k, v in bundle.param_grads.items():
                        acc[k] += v
            mean_grads = {k: (v / len(batch)).astype(np.float32) for k, v in acc.items()}
            params, velocity = sgd_step(params, mean_grads, velocity, config)
        epoch_loss = total_loss / n
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
        history.append((epoch, float(epoch_loss), correct / n))
    return replace(model, params=params), history
