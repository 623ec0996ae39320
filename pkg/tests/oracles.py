"""Independent reference implementations used as test oracles.

Everything here is written against the documented layer semantics, not the
engine internals: the forward pass runs end to end in float64 via einsum, the
relevance rules use direct per-connection loops. Slow on purpose.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from flrp import network as net


def forward_logits_f64(model, image, params=None):
    """Float64 end-to-end forward pass up to the logits."""
    params = model.params if params is None else params
    x = np.asarray(image, dtype=np.float64) / 255.0 - np.asarray(model.mean, np.float64)[:, None, None]
    names = net.param_names(model.layers)
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, net.Conv):
            w = np.asarray(params[names[idx][0]], np.float64)
            b = np.asarray(params[names[idx][1]], np.float64)
            padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
            win = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
            x = np.einsum("oikl,ihwkl->ohw", w, win) + b[:, None, None]
        elif isinstance(layer, net.ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, net.MaxPool):
            c, h, w = x.shape
            x = x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
        elif isinstance(layer, net.Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, net.Dense):
            w = np.asarray(params[names[idx][0]], np.float64)
            b = np.asarray(params[names[idx][1]], np.float64)
            x = w @ x + b
        elif isinstance(layer, net.Softmax):
            break
    return x


def resume_logits_f64(model, layer_index, activation):
    """Float64 forward pass of the layers above `layer_index`, starting from the
    given value of that layer's output."""
    x = np.asarray(activation, dtype=np.float64)
    names = net.param_names(model.layers)
    for idx in range(layer_index + 1, len(model.layers)):
        layer = model.layers[idx]
        if isinstance(layer, net.Conv):
            w = np.asarray(model.params[names[idx][0]], np.float64)
            b = np.asarray(model.params[names[idx][1]], np.float64)
            padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
            win = sliding_window_view(padded, (3, 3), axis=(1, 2))
            x = np.einsum("oikl,ihwkl->ohw", w, win) + b[:, None, None]
        elif isinstance(layer, net.ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, net.MaxPool):
            c, h, w = x.shape
            x = x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))
        elif isinstance(layer, net.Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, net.Dense):
            w = np.asarray(model.params[names[idx][0]], np.float64)
            b = np.asarray(model.params[names[idx][1]], np.float64)
            x = w @ x + b
        elif isinstance(layer, net.Softmax):
            break
    return x


def fd_input_gradient(model, image, class_index, coords, h=1e-3):
    """Central finite differences of the class logit w.r.t. raw image pixels."""
    base = np.asarray(image, dtype=np.float64)
    grads = {}
    for coord in coords:
        plus = base.copy()
        plus[coord] += h
        minus = base.copy()
        minus[coord] -= h
        fp = forward_logits_f64(model, plus)[class_index]
        fm = forward_logits_f64(model, minus)[class_index]
        grads[coord] = (fp - fm) / (2.0 * h)
    return grads


def fd_param_gradient(model, image, class_index, name, coords, h=1e-3):
    """Central finite differences of the class logit w.r.t. parameter entries."""
    grads = {}
    for coord in coords:
        params_p = {k: v.astype(np.float64) for k, v in model.params.items()}
        params_m = {k: v.astype(np.float64) for k, v in model.params.items()}
        params_p[name] = params_p[name].copy()
        params_m[name] = params_m[name].copy()
        params_p[name][coord] += h
        params_m[name][coord] -= h
        fp = forward_logits_f64(model, image, params_p)[class_index]
        fm = forward_logits_f64(model, image, params_m)[class_index]
        grads[coord] = (fp - fm) / (2.0 * h)
    return grads


def trace_margins(model, trace):
    """Distances to the nearest ReLU/max-pool kink; small margins make finite
    differences unreliable."""
    relu_margin = np.inf
    pool_margin = np.inf
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, net.ReLU):
            relu_margin = min(relu_margin, float(np.abs(trace.inputs[idx]).min()))
        elif isinstance(layer, net.MaxPool):
            x = trace.inputs[idx]
            c, h, w = x.shape
            win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
            top2 = np.sort(win, axis=-1)[..., -2:]
            pool_margin = min(pool_margin, float((top2[..., 1] - top2[..., 0]).min()))
    return relu_margin, pool_margin


def conv_alphabeta_brute(x, weight, relevance, alpha, beta):
    """Per-connection alpha-beta redistribution for a 3x3/pad-1 conv, direct loops."""
    x = np.asarray(x, dtype=np.float64)
    r_out = np.asarray(relevance, dtype=np.float64)
    o_ch, i_ch, _, _ = weight.shape
    c, h, w = x.shape
    r_in = np.zeros_like(x)
    dropped = 0.0
    for o in range(o_ch):
        for y in range(h):
            for xx in range(w):
                contribs = []
                for i in range(i_ch):
                    for ky in range(3):
                        for kx in range(3):
                            sy, sx = y + ky - 1, xx + kx - 1
                            if 0 <= sy < h and 0 <= sx < w:
                                z = x[i, sy, sx] * float(weight[o, i, ky, kx])
                                contribs.append((i, sy, sx, z))
                zp = sum(z for *_, z in contribs if z > 0)
                zm = sum(z for *_, z in contribs if z < 0)
                r = r_out[o, y, xx]
                if zp == 0:
                    dropped += alpha * r
                if zm == 0:
                    dropped += beta * r
                for i, sy, sx, z in contribs:
                    if z > 0 and zp != 0:
                        r_in[i, sy, sx] += alpha * z / zp * r
                    elif z < 0 and zm != 0:
                        r_in[i, sy, sx] += beta * z / zm * r
    return r_in, dropped


def flat_conv_brute(relevance, in_channels):
    """Uniform receptive-field redistribution for a 3x3/pad-1 conv, direct loops."""
    r_out = np.asarray(relevance, dtype=np.float64)
    _, h, w = r_out.shape
    r_in = np.zeros((in_channels, h, w))
    for o in range(r_out.shape[0]):
        for y in range(h):
            for x in range(w):
                taps = [
                    (sy, sx)
                    for sy in range(y - 1, y + 2)
                    for sx in range(x - 1, x + 2)
                    if 0 <= sy < h and 0 <= sx < w
                ]
                share = r_out[o, y, x] / (in_channels * len(taps))
                for sy, sx in taps:
                    r_in[:, sy, sx] += share
    return r_in


def equal_count_threshold_brute(target_values, other_values):
    """Exhaustive midpoint scan mirroring the documented selection contract."""
    tv = sorted(float(v) for v in target_values)
    ov = sorted(float(v) for v in other_values)
    pooled = sorted(tv + ov)
    mids = [(a + b) / 2.0 for a, b in zip(pooled, pooled[1:])]
    best = None
    for t in mids:
        above = sum(1 for v in tv if v > t)
        below = sum(1 for v in ov if v < t)
        gap = abs(above - below)
        if best is None or gap < best[0]:
            best = (gap, t)
        if gap == 0:
            break
    t = best[1]
    eer = sum(1 for v in tv if v <= t) / len(tv)
    return t, eer


def receptive_field(model, layer_index, cell):
    """Input-pixel bounding box influencing one spatial cell of a layer's output,
    pushed down through the conv/pool geometry. Returns (y0, y1, x0, x1) inclusive."""
    y0, y1 = cell[0], cell[0]
    x0, x1 = cell[1], cell[1]
    for idx in range(layer_index, -1, -1):
        layer = model.layers[idx]
        if isinstance(layer, net.Conv):
            y0, y1, x0, x1 = y0 - 1, y1 + 1, x0 - 1, x1 + 1
        elif isinstance(layer, net.MaxPool):
            y0, y1, x0, x1 = 2 * y0, 2 * y1 + 1, 2 * x0, 2 * x1 + 1
    _, h, w = model.input_shape
    return max(y0, 0), min(y1, h - 1), max(x0, 0), min(x1, w - 1)
