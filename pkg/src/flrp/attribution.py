"""Pixel attribution for a traced forward pass.

Three methods, all producing an H x W relevance map over the input image:

* ``lrp_map`` -- layer-wise relevance propagation started at a class logit,
  with epsilon decomposition on dense layers, alpha-beta (2, -1) on all conv
  layers except the first two, and uniform ("flat") redistribution on those.
* ``sensitivity_map`` -- channel-wise L1 of the class-logit gradient taken at
  the activation after the second conv layer, then flat-propagated to pixels.
* ``flrp_map`` -- relevance started inside the last feature-extractor layer at
  per-cell class-discriminative channels (selected by an equal-error-count
  threshold), skipping the classifier entirely.

Biases are excluded from every redistribution, so total relevance is conserved
through alpha-beta/flat/pool/ReLU steps up to explicitly reported drops at
degenerate (all-zero denominator) neurons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grad, network as net, util


@dataclass(frozen=True)
class RuleConfig:
    epsilon: float = 1e-6
    alpha: float = 2.0
    beta: float = -1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError("alpha + beta must equal 1")


def rule_assignment(model: net.ModelDef) -> tuple[str, ...]:
    """Per-layer propagation rule: flat for the first two convs, alpha-beta for
    later convs, epsilon for dense, winner-take-all for pools."""
    tags = []
    conv_seen = 0
    for layer in model.layers:
        if isinstance(layer, net.Conv):
            tags.append("flat" if conv_seen < 2 else "alphabeta")
            conv_seen += 1
        elif isinstance(layer, net.Dense):
            tags.append("epsilon")
        elif isinstance(layer, net.MaxPool):
            tags.append("winner")
        elif isinstance(layer, net.ReLU):
            tags.append("identity")
        elif isinstance(layer, net.Flatten):
            tags.append("reshape")
        else:
            tags.append("output")
    return tuple(tags)


# ---------------------------------------------------------------------------
# single-layer rules


def rule_epsilon_dense(x, weight, relevance, epsilon: float) -> np.ndarray:
    """Stabilized proportional redistribution through a dense layer, bias excluded.

    R_j = sum_k a_j w_kj / (z_k + eps*sign(z_k)) * R_k with z_k = sum_j a_j w_kj
    and sign(0) = +1.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.float64)
    z = w @ x
    denom = z + epsilon * np.where(z >= 0, 1.0, -1.0)
    return x * (w.T @ (r / denom))


def rule_alphabeta_dense(x, weight, relevance, config: RuleConfig) -> tuple[np.ndarray, float]:
    """Alpha-beta redistribution through a dense layer; returns (R_in, dropped).

    Activating and inhibiting contributions are normalized separately; a branch
    with an all-zero denominator contributes nothing and its share of the
    output relevance is reported as dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    r = np.asarray(relevance, dtype=np.float64)
    xp, xm = np.maximum(x, 0), np.minimum(x, 0)
    wp, wm = np.maximum(w, 0), np.minimum(w, 0)
    zp = wp @ xp + wm @ xm
    zm = wp @ xm + wm @ xp
    sp = np.zeros_like(r)
    sm = np.zeros_like(r)
    nz = zp != 0
    sp[nz] = config.alpha * r[nz] / zp[nz]
    nz = zm != 0
    sm[nz] = config.beta * r[nz] / zm[nz]
    r_in = xp * (wp.T @ sp + wm.T @ sm) + xm * (wm.T @ sp + wp.T @ sm)
    dropped = float(np.sum(r * (config.alpha * (zp == 0) + config.beta * (zm == 0))))
    return r_in, dropped


def rule_alphabeta_conv(x, weight, relevance, config: RuleConfig) -> tuple[np.ndarray, float]:
    """Alpha-beta redistribution through a 3x3/pad-1 conv layer (per receptive field)."""
    x = np.asarray(x, dtype=np.float64)
    o = weight.shape[0]
    _, h, w = x.shape
    cp = net.im2col(np.maximum(x, 0))
    cm = net.im2col(np.minimum(x, 0))
    wk = weight.reshape(o, -1).astype(np.float64)
    wkp, wkm = np.maximum(wk, 0), np.minimum(wk, 0)
    zp = cp @ wkp.T + cm @ wkm.T  # (H*W, O)
    zm = cp @ wkm.T + cm @ wkp.T
    r = np.asarray(relevance, dtype=np.float64).reshape(o, h * w).T
    sp = np.zeros_like(r)
    sm = np.zeros_like(r)
    nz = zp != 0
    sp[nz] = config.alpha * r[nz] / zp[nz]
    nz = zm != 0
    sm[nz] = config.beta * r[nz] / zm[nz]
    cols = cp * (sp @ wkp + sm @ wkm) + cm * (sp @ wkm + sm @ wkp)
    dropped = float(np.sum(r * (config.alpha * (zp == 0) + config.beta * (zm == 0))))
    return net.col2im(cols, x.shape), dropped


def rule_flat_conv(relevance, in_channels: int) -> np.ndarray:
    """Divide each output neuron's relevance equally over its in-bounds receptive
    field across all input channels; weights and activations are ignored."""
    s = np.asarray(relevance, dtype=np.float64).sum(axis=0)
    reach = util.box3_sum(np.ones(s.shape))  # in-bounds taps per output position
    spread = util.box3_sum(s / (in_channels * reach))
    return np.repeat(spread[None, :, :], in_channels, axis=0)


def rule_pool_winner(relevance, argmax, input_shape: tuple) -> np.ndarray:
    """Route each pooled cell's relevance to the recorded winning source."""
    return net.pool_scatter(relevance, argmax, input_shape)


def rule_quarter_pool(relevance) -> np.ndarray:
    """Spread each pooled cell's relevance uniformly over its 2x2 window."""
    return np.kron(np.asarray(relevance, dtype=np.float64), np.full((2, 2), 0.25))


# ---------------------------------------------------------------------------
# full propagation


@dataclass
class PropagationStep:
    layer: int
    rule: str
    total_out: float  # relevance entering the layer (at its output)
    total_in: float  # relevance leaving the layer (at its input)
    dropped: float  # share lost at degenerate alpha-beta neurons


def propagate(model: net.ModelDef, trace: net.ActivationTrace, relevance, start_layer: int,
              config: RuleConfig | None = None, rules: tuple[str, ...] | None = None):
    """Apply per-layer rules from `start_layer` (relevance given at its output)
    down to the input; returns (input relevance, per-step records)."""
    config = config or RuleConfig()
    rules = rules or rule_assignment(model)
    names = net.param_names(model.layers)
    r = np.asarray(relevance, dtype=np.float64)
    steps: list[PropagationStep] = []
    for idx in range(start_layer, -1, -1):
        layer = model.layers[idx]
        tag = rules[idx]
        x = trace.inputs[idx]
        if r.shape != trace.outputs[idx].shape:
            raise ValueError(f"relevance shape {r.shape} != layer {idx} output {trace.outputs[idx].shape}")
        total_out = float(r.sum())
        dropped = 0.0
        if tag == "epsilon":
            r = rule_epsilon_dense(x, model.params[names[idx][0]], r, config.epsilon)
        elif tag == "alphabeta":
            if isinstance(layer, net.Conv):
                r, dropped = rule_alphabeta_conv(x, model.params[names[idx][0]], r, config)
            else:
                r, dropped = rule_alphabeta_dense(x, model.params[names[idx][0]], r, config)
        elif tag == "flat":
            r = rule_flat_conv(r, layer.in_channels)
        elif tag == "winner":
            r = rule_pool_winner(r, trace.pool_argmax[idx], x.shape)
        elif tag == "identity":
            pass
        elif tag == "reshape":
            r = r.reshape(x.shape)
        else:
            raise ValueError(f"relevance cannot cross layer {idx} ({tag})")
        steps.append(PropagationStep(idx, tag, total_out, float(r.sum()), dropped))
    return r, steps


@dataclass
class RelevanceMap:
    values: np.ndarray  # (H, W) float32, color channels already summed
    method: str
    image_id: str = ""


def _logit_start_layer(model: net.ModelDef) -> int:
    start = len(model.layers) - 1
    while start >= 0 and isinstance(model.layers[start], net.Softmax):
        start -= 1
    return start


def lrp_map(model: net.ModelDef, trace: net.ActivationTrace, class_index: int,
            config: RuleConfig | None = None, image_id: str = "") -> RelevanceMap:
    """Relevance propagation started with the selected class logit as relevance."""
    logits = trace.logits
    if not 0 <= class_index < logits.shape[0]:
        raise IndexError(f"class {class_index} outside 0..{logits.shape[0] - 1}")
    start_relevance = np.zeros(logits.shape[0], dtype=np.float64)
    start_relevance[class_index] = float(logits[class_index])
    r, _ = propagate(model, trace, start_relevance, _logit_start_layer(model), config)
    return RelevanceMap(r.sum(axis=0).astype(np.float32), "lrp", image_id)


def sensitivity_map(model: net.ModelDef, trace: net.ActivationTrace, class_index: int,
                    image_id: str = "") -> RelevanceMap:
    """Gradient sensitivity, L1-collapsed after the second conv layer's activation
    and flat-propagated to the pixels (pools crossed by uniform 1/4 splitting)."""
    conv_idx = [i for i, l in enumerate(model.layers) if isinstance(l, net.Conv)]
    if len(conv_idx) < 2:
        raise ValueError("sensitivity map needs at least two conv layers")
    stop = next((i for i in range(conv_idx[1] + 1, len(model.layers)) if isinstance(model.layers[i], net.ReLU)), None)
    if stop is None:
        raise ValueError("no activation after the second conv layer")
    onehot = np.zeros(trace.logits.shape[0], dtype=np.float64)
    onehot[class_index] = 1.0
    g = grad.backward_full(model, trace, onehot, stop_layer=stop).input_grad
    r = np.abs(np.asarray(g, dtype=np.float64)).sum(axis=0, keepdims=True)
    for idx in range(stop, -1, -1):
        layer = model.layers[idx]
        if isinstance(layer, net.ReLU):
            continue
        if isinstance(layer, net.Conv):
            r = rule_flat_conv(r, layer.in_channels)
        elif isinstance(layer, net.MaxPool):
            r = rule_quarter_pool(r)
        else:
            raise ValueError(f"unexpected layer {layer!r} below the sensitivity stop point")
    return RelevanceMap(r.sum(axis=0).astype(np.float32), "sensitivity", image_id)


# ---------------------------------------------------------------------------
# focused start-neuron selection


@dataclass
class NeuronSelection:
    """Per-feature-grid-cell discriminative channel with its threshold and
    equal-error rate."""

    target: str  # class whose activations the selected channels favor
    channel: np.ndarray  # (G, G) int
    threshold: np.ndarray  # (G, G) float64
    eer: np.ndarray  # (G, G) float64 in [0, 0.5] for separable data
    model_hash: str = ""  # provenance only, never enforced

    @property
    def grid(self) -> tuple:
        return self.channel.shape


def equal_count_threshold(target_values, other_values) -> tuple[float, float]:
    """Threshold where #(target above) equals #(other below), and the miss rate.

    Scans midpoints of consecutive pooled sorted values in ascending order and
    returns the first achieving equality (smallest t); if ties make exact
    equality unreachable, the first midpoint minimizing the count difference is
    used. The second return value is |{target <= t}| / n_target.
    """
    tv = np.sort(np.asarray(target_values, dtype=np.float64))
    ov = np.sort(np.asarray(other_values, dtype=np.float64))
    pooled = np.sort(np.concatenate([tv, ov]))
    mids = 0.5 * (pooled[:-1] + pooled[1:])
    above = tv.size - np.searchsorted(tv, mids, side="right")
    below = np.searchsorted(ov, mids, side="left")
    diff = above - below
    hits = np.nonzero(diff == 0)[0]
    i = int(hits[0]) if hits.size else int(np.argmin(np.abs(diff)))
    t = float(mids[i])
    eer = float(np.searchsorted(tv, t, side="right")) / tv.size
    return t, eer


def select_neurons(grids, is_target, target_name: str, model_hash: str = "") -> NeuronSelection:
    """Pick, per feature-grid cell, the channel separating target from other best.

    grids: (N, C, G, G) feature-extractor outputs for N labeled images.
    Candidate channels must have a strictly larger target-class mean; among
    candidates the minimal equal-error rate wins, ties by lowest channel index.
    """
    grids = np.asarray(grids, dtype=np.float64)
    is_target = np.asarray(is_target, dtype=bool)
    if grids.ndim != 4:
        raise ValueError(f"expected (N, C, G, G) grids, got shape {grids.shape}")
    if grids.shape[0] != is_target.shape[0]:
        raise ValueError("one label per grid required")
    if is_target.sum() < 2 or (~is_target).sum() < 2:
        raise ValueError("need at least two samples per class")
    target = grids[is_target]
    other = grids[~is_target]
    mean_t = target.mean(axis=0)
    mean_o = other.mean(axis=0)
    _, channels, gh, gw = grids.shape
    channel = np.zeros((gh, gw), dtype=np.int64)
    threshold = np.zeros((gh, gw), dtype=np.float64)
    eer = np.zeros((gh, gw), dtype=np.float64)
    for gy in range(gh):
        for gx in range(gw):
            best = None
            for ch in range(channels):
                if not mean_t[ch, gy, gx] > mean_o[ch, gy, gx]:
                    continue
                t, e = equal_count_threshold(target[:, ch, gy, gx], other[:, ch, gy, gx])
                if best is None or e < best[0]:
                    best = (e, ch, t)
            if best is None:
                raise ValueError(f"cell ({gy}, {gx}): no channel activates more strongly for {target_name!r}")
            eer[gy, gx], channel[gy, gx], threshold[gy, gx] = best
    return NeuronSelection(target_name, channel, threshold, eer, model_hash)


def flrp_start_relevance(grid, selection: NeuronSelection) -> np.ndarray:
    """Initial relevance over the feature grid: zero everywhere except the selected
    neurons, which get max(0, activation * (1 - 2*eer))."""
    grid = np.asarray(grid, dtype=np.float64)
    _check_selection(grid.shape, selection)
    ys, xs = np.indices(selection.grid)
    start = np.zeros_like(grid)
    acts = grid[selection.channel, ys, xs]
    start[selection.channel, ys, xs] = np.maximum(0.0, acts * (1.0 - 2.0 * selection.eer))
    return start


def _check_selection(grid_shape: tuple, selection: NeuronSelection) -> None:
    if len(grid_shape) != 3 or grid_shape[1:] != selection.grid:
        raise ValueError(f"selection grid {selection.grid} does not match feature grid {grid_shape}")
    if selection.channel.max() >= grid_shape[0]:
        raise ValueError(f"selection channel {selection.channel.max()} outside {grid_shape[0]} channels")


def flrp_map(model: net.ModelDef, trace: net.ActivationTrace, selection: NeuronSelection,
             config: RuleConfig | None = None, image_id: str = "") -> RelevanceMap:
    """Focused relevance propagation from the last feature-extractor layer; the
    classifier layers are never touched."""
    grid = trace.outputs[model.feature_end]
    start = flrp_start_relevance(grid, selection)
    r, _ = propagate(model, trace, start, model.feature_end, config)
    return RelevanceMap(r.sum(axis=0).astype(np.float32), "flrp", image_id)


def mean_selected_activation(grid, selection: NeuronSelection) -> float:
    """Mean activation over the selected (cell, channel) neurons of one grid."""
    grid = np.asarray(grid, dtype=np.float64)
    _check_selection(grid.shape, selection)
    ys, xs = np.indices(selection.grid)
    return float(grid[selection.channel, ys, xs].mean())


def save_selection(selection: NeuronSelection, path) -> Path:
    doc = {
        "target": selection.target,
        "grid": list(selection.grid),
        "channel": selection.channel.tolist(),
        "threshold": selection.threshold.tolist(),
        "eer": selection.eer.tolist(),
        "model_hash": selection.model_hash,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_selection(path) -> NeuronSelection:
    doc = json.loads(Path(path).read_text())
    sel = NeuronSelection(
        target=str(doc["target"]),
        channel=np.asarray(doc["channel"], dtype=np.int64),
        threshold=np.asarray(doc["threshold"], dtype=np.float64),
        eer=np.asarray(doc["eer"], dtype=np.float64),
        model_hash=str(doc.get("model_hash", "")),
    )
    if sel.channel.shape != tuple(doc["grid"]) or sel.channel.shape != sel.eer.shape:
        raise ValueError("inconsistent selection grids")
    return sel


def colorize(values) -> np.ndarray:
    """Min-max normalize a relevance map and render blue (low) to yellow (high),
    (3, H, W) uint8; a constant map renders all blue."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    t = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return util.to_uint8(np.stack([255.0 * t, 255.0 * t, 255.0 * (1.0 - t)]))
