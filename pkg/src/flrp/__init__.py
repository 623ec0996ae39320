"""Pixel-level attribution for CNN-based morph detectors.

The package bundles a small deterministic CNN inference engine with full
activation tracing (``network``), reverse-mode gradients and a minimal SGD
trainer (``grad``), three attribution methods producing per-pixel relevance
maps (``attribution``), a substitution-based evaluation framework with
detector error rates (``evalkit``), a synthetic planted-artifact benchmark
(``synth``), and a command-line pipeline (``cli``).
"""

from .network import build_toy, build_vgg_a, forward_full, load_model, save_model
from .attribution import flrp_map, lrp_map, select_neurons, sensitivity_map

__version__ = "0.1.0"

__all__ = [
    "build_toy",
    "build_vgg_a",
    "forward_full",
    "load_model",
    "save_model",
    "lrp_map",
    "sensitivity_map",
    "flrp_map",
    "select_neurons",
]
