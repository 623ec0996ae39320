"""Substitution-based evaluation of pixel attributions.

The pipeline per image: select the top alpha% relevance pixels, dilate the
binary mask (3x3), blur it into a transparency mask (5x5 box, zero-padded),
blend the aligned source image over the morph where the mask is high, and
re-run the detector. Reports track mean NLL, APCER and the activations of the
selected morph/bona-fide neurons as a function of alpha.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attribution, network as net, util

DILATION = 3  # binary-mask dilation window
BLUR = 5  # transparency blur window
DECISION_THRESHOLD = 0.5  # morph probability at/above which a morph counts as detected


@dataclass(frozen=True)
class SubstitutionConfig:
    alphas: tuple = (0.5, 1.0, 2.0, 5.0, 10.0)  # percent of pixels to substitute

    def __post_init__(self):
        if not self.alphas:
            raise ValueError("need at least one alpha")
        if any(not 0 < a <= 100 for a in self.alphas):
            raise ValueError("alphas must lie in (0, 100]")
        if any(b <= a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("alphas must be strictly increasing")


@dataclass
class TransparencyMask:
    weights: np.ndarray  # (H, W) float32 in [0, 1]
    method: str = ""
    alpha: float = 0.0


def _weights(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "weights", mask), dtype=np.float64)


def mask_pixel_count(shape: tuple, alpha_percent: float) -> int:
    """Number of substituted pixels: ceil(alpha * H * W / 100)."""
    if not 0 < alpha_percent <= 100:
        raise ValueError(f"alpha {alpha_percent} outside (0, 100]")
    h, w = shape
    return math.ceil(alpha_percent * h * w / 100.0 - 1e-9)


def build_binary_mask(values, alpha_percent: float) -> np.ndarray:
    """Mark exactly ceil(alpha*H*W/100) pixels with the largest scores; ties at
    the cutoff go to the earlier pixel in row-major scan order."""
    v = np.asarray(values, dtype=np.float64)
    k = mask_pixel_count(v.shape, alpha_percent)
    order = np.argsort(-v.reshape(-1), kind="stable")
    mask = np.zeros(v.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(v.shape)


def refine_mask(mask, method: str = "", alpha: float = 0.0) -> TransparencyMask:
    """Dilate a binary mask (3x3, border-clipped) and blur it (5x5 box, zero pad)
    into per-pixel blend weights in [0, 1]."""
    blurred = util.box_blur5(util.dilate3(mask).astype(np.float64))
    return TransparencyMask(np.clip(blurred, 0.0, 1.0).astype(np.float32), method, alpha)


def blend(morph, source, mask) -> np.ndarray:
    """Per channel: (1 - m) * morph + m * source, rounded half away from zero.

    Where m is 0 the morph pixel is reproduced bit-exactly, where m is 1 the
    source pixel is.
    """
    morph = np.asarray(morph)
    source = np.asarray(source)
    m = _weights(mask)
    if morph.shape != source.shape or morph.shape[1:] != m.shape:
        raise ValueError(f"shape mismatch: morph {morph.shape}, source {source.shape}, mask {m.shape}")
    out = (1.0 - m)[None] * morph.astype(np.float64) + m[None] * source.astype(np.float64)
    return util.to_uint8(out)


# ---------------------------------------------------------------------------
# substitution sweep


@dataclass
class SweepSample:
    image_id: str
    morph: np.ndarray  # (3, H, W) uint8
    source: np.ndarray  # aligned artifact-free image, same shape
    maps: dict[str, np.ndarray]  # method -> (H, W) relevance values


@dataclass
class EvalRow:
    alpha: float
    mean_nll: float
    apcer: float
    morph_neuron_act: float
    bonafide_neuron_act: float
    n: int


@dataclass
class EvalReport:
    method: str
    rows: list[EvalRow]


def _detector_stats(model, image, morph_sel, bona_sel, morph_class):
    trace = net.forward_full(model, image)
    grid = trace.outputs[model.feature_end]
    p = float(trace.probs[morph_class])
    return (
        p,
        -math.log(max(p, 1e-12)),
        attribution.mean_selected_activation(grid, morph_sel),
        attribution.mean_selected_activation(grid, bona_sel),
    )


def substitution_sweep(model, morph_selection, bonafide_selection, samples,
                       config: SubstitutionConfig | None = None,
                       include_undetected: bool = False,
                       morph_class: int = 1) -> list[EvalReport]:
    """Evaluate each attribution method by substituting its top-alpha pixels.

    An alpha = 0 baseline row (unmodified images) is always included. Unless
    `include_undetected` is set, morphs the detector misses at alpha = 0 are
    dropped from the evaluation.
    """
    config = config or SubstitutionConfig()
    if not samples:
        raise ValueError("no samples to evaluate")
    methods = list(samples[0].maps)
    if any(list(s.maps) != methods for s in samples):
        raise ValueError("samples carry inconsistent method maps")
    base = [_detector_stats(model, s.morph, morph_selection, bonafide_selection, morph_class) for s in samples]
    included = [i for i, b in enumerate(base) if include_undetected or b[0] >= DECISION_THRESHOLD]
    if not included:
        raise ValueError("no morphs detected at zero substitution; nothing to evaluate")

    def aggregate(alpha, stats):
        return EvalRow(
            alpha=float(alpha),
            mean_nll=float(np.mean([s[1] for s in stats])),
            apcer=float(np.mean([s[0] < DECISION_THRESHOLD for s in stats])),
            morph_neuron_act=float(np.mean([s[2] for s in stats])),
            bonafide_neuron_act=float(np.mean([s[3] for s in stats])),
            n=len(stats),
        )

    base_row = aggregate(0.0, [base[i] for i in included])
    reports = []
    for method in methods:
        rows = [base_row]
        for alpha in config.alphas:
            stats = []
            for i in included:
                sample = samples[i]
                mask = build_binary_mask(sample.maps[method], alpha)
                blended = blend(sample.morph, sample.source, refine_mask(mask, method, alpha))
                stats.append(_detector_stats(model, blended, morph_selection, bonafide_selection, morph_class))
            rows.append(aggregate(alpha, stats))
        reports.append(EvalReport(method, rows))
    return reports


# ---------------------------------------------------------------------------
# detector error rates


def _split_scores(scores):
    pairs = [(float(p), bool(l)) for p, l in scores]
    if not pairs:
        raise ValueError("no scores")
    p = np.array([x[0] for x in pairs])
    is_morph = np.array([x[1] for x in pairs])
    return p[is_morph], p[~is_morph]


def detector_metrics(scores, threshold: float) -> tuple[float, float]:
    """(APCER, BPCER) at a fixed threshold: the fraction of morphs scoring below
    it, and the fraction of genuines scoring at or above it."""
    morph, genuine = _split_scores(scores)
    if morph.size == 0 or genuine.size == 0:
        raise ValueError("need both classes for error rates")
    return float(np.mean(morph < threshold)), float(np.mean(genuine >= threshold))


def detector_eer(scores) -> float:
    """Equal error rate: scan thresholds at score midpoints; if no midpoint gives
    APCER == BPCER exactly, interpolate linearly between the two nearest."""
    morph, genuine = _split_scores(scores)
    if morph.size == 0 or genuine.size == 0:
        raise ValueError("EER needs scores from both classes")
    morph = np.sort(morph)
    genuine = np.sort(genuine)
    pooled = np.sort(np.concatenate([morph, genuine]))
    mids = 0.5 * (pooled[:-1] + pooled[1:])
    apcer = np.searchsorted(morph, mids, side="left") / morph.size
    bpcer = (genuine.size - np.searchsorted(genuine, mids, side="left")) / genuine.size
    diff = apcer - bpcer
    zero = np.nonzero(diff == 0)[0]
    if zero.size:
        return float(apcer[zero[0]])
    j = int(np.nonzero(diff > 0)[0][0])
    a1, b1, a2, b2 = apcer[j - 1], bpcer[j - 1], apcer[j], bpcer[j]
    s = (b1 - a1) / ((a2 - a1) - (b2 - b1))
    return float(a1 + s * (a2 - a1))


# ---------------------------------------------------------------------------
# transparency-mask differences


def mask_difference(mask_a, mask_b, substituted_pixels: int) -> float:
    """Sum of per-pixel absolute differences, normalized by the substituted
    pixel count."""
    a = _weights(mask_a)
    b = _weights(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if substituted_pixels <= 0:
        raise ValueError("substituted pixel count must be positive")
    return float(np.abs(a - b).sum() / substituted_pixels)


@dataclass
class MaskDiffHistogram:
    edges: np.ndarray  # bins + 1 uniform edges starting at 0
    counts: np.ndarray
    pair: tuple = ("", "")


def diff_histogram(values, bins: int, pair: tuple = ("", "")) -> MaskDiffHistogram:
    """Uniform histogram over [0, max(2, max value)]; counts sum to len(values)."""
    if bins < 1:
        raise ValueError("need at least one bin")
    v = np.asarray(values, dtype=np.float64)
    hi = 2.0 if v.size == 0 else max(2.0, float(v.max()))
    counts, edges = np.histogram(v, bins=bins, range=(0.0, hi))
    return MaskDiffHistogram(edges, counts, tuple(pair))


def mean_std(values) -> tuple[float, float]:
    """Population mean and standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


# ---------------------------------------------------------------------------
# CSV interfaces


def write_report_csv(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "alpha", "mean_nll", "apcer", "morph_neuron_act", "bonafide_neuron_act", "n"])
        for report in reports:
            for row in report.rows:
                writer.writerow([report.method, row.alpha, row.mean_nll, row.apcer,
                                 row.morph_neuron_act, row.bonafide_neuron_act, row.n])
    return path


def write_histogram_csv(hist: MaskDiffHistogram, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            writer.writerow([float(lo), float(hi), int(count)])
    return path


@dataclass
class EvalPair:
    image_id: str
    morph_path: Path
    source_path: Path


def load_eval_manifest(path) -> list[EvalPair]:
    """Minimal evaluation manifest: CSV with columns id, morph_path, source_path;
    relative paths resolve against the manifest's directory."""
    path = Path(path)
    root = path.parent
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "morph_path", "source_path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            pairs.append(EvalPair(row["id"], root / row["morph_path"], root / row["source_path"]))
    return pairs
