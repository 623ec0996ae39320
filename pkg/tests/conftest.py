"""Shared fixtures: small random models and the cached toy benchmark runs."""

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flrp import attribution, evalkit, grad, netpbm, network as net, synth

BENCH_SEEDS = (0, 1, 2, 3, 4)
BENCH_GENUINE = 170
BENCH_MORPHS = 170
SWEEP_ALPHAS = (0.5, 1.0, 2.0, 5.0, 10.0)


def small_random_model(seed, in_channels=2, size=16):
    """Three-conv model exercising every propagation rule, with nonzero biases
    and a mix of weight signs."""
    rng = np.random.default_rng(seed)
    layers = (
        net.Conv(in_channels, 4), net.ReLU(), net.MaxPool(),
        net.Conv(4, 5), net.ReLU(), net.MaxPool(),
        net.Conv(5, 6), net.ReLU(), net.MaxPool(),
        net.Flatten(),
        net.Dense(6 * (size // 8) ** 2, 7), net.ReLU(),
        net.Dense(7, 2),
        net.Softmax(),
    )
    params = {}
    for idx, names in enumerate(net.param_names(layers)):
        if names is None:
            continue
        layer = layers[idx]
        if isinstance(layer, net.Conv):
            w_shape = (layer.out_channels, layer.in_channels, 3, 3)
            b_shape = (layer.out_channels,)
        else:
            w_shape = (layer.out_features, layer.in_features)
            b_shape = (layer.out_features,)
        params[names[0]] = rng.normal(0.0, 0.4, w_shape).astype(np.float32)
        params[names[1]] = rng.normal(0.0, 0.1, b_shape).astype(np.float32)
    model = net.ModelDef(layers, params, (in_channels, size, size), tuple([0.5] * in_channels), 8)
    model.validate()
    return model


def random_image(rng, shape):
    return rng.integers(0, 256, size=shape).astype(np.uint8)


@dataclass
class BenchmarkRun:
    seed: int
    data_dir: Path
    manifests: dict
    model: net.ModelDef
    model_path: Path
    selection_morph: attribution.NeuronSelection
    selection_bonafide: attribution.NeuronSelection
    test_accuracy: float
    samples: list  # evalkit.SweepSample for every test morph
    truth_masks: dict  # image id -> ground-truth artifact mask


def run_benchmark(seed: int, root: Path) -> BenchmarkRun:
    """Generate data, train, select neurons and precompute test-morph maps."""
    config = synth.SynthConfig()
    data_dir = root / f"data{seed}"
    manifests = synth.gen_dataset(config, BENCH_GENUINE, BENCH_MORPHS, data_dir, seed=seed)
    train_config = grad.TrainConfig(seed=seed)
    model_path, _ = synth.train_toy(manifests["train"], train_config, root / f"run{seed}")
    model = net.load_model(model_path)

    images, labels, _ = synth.load_samples(manifests["train"])
    grids = np.stack([net.forward_full(model, img).outputs[model.feature_end] for img in images])
    morph_mask = labels == synth.CLASS_INDEX[synth.LABEL_MORPH]
    model_hash = net.model_param_hash(model)
    sel_morph = attribution.select_neurons(grids, morph_mask, synth.LABEL_MORPH, model_hash)
    sel_bona = attribution.select_neurons(grids, ~morph_mask, synth.LABEL_GENUINE, model_hash)

    accuracy = synth.classification_accuracy(model, manifests["test"])

    samples = []
    truth_masks = {}
    morph_class = synth.CLASS_INDEX[synth.LABEL_MORPH]
    for row in synth.load_manifest(manifests["test"]):
        if row.label != synth.LABEL_MORPH:
            continue
        morph = netpbm.read_ppm(row.image_path)
        source = netpbm.read_ppm(row.source_path)
        trace = net.forward_full(model, morph)
        maps = {
            "lrp": attribution.lrp_map(model, trace, morph_class, image_id=row.image_id).values,
            "flrp": attribution.flrp_map(model, trace, sel_morph, image_id=row.image_id).values,
            "sensitivity": attribution.sensitivity_map(model, trace, morph_class, image_id=row.image_id).values,
        }
        samples.append(evalkit.SweepSample(row.image_id, morph, source, maps))
        truth_masks[row.image_id] = netpbm.read_pgm(row.mask_path) > 0
    return BenchmarkRun(seed, data_dir, manifests, model, model_path,
                        sel_morph, sel_bona, accuracy, samples, truth_masks)


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    return tmp_path_factory.mktemp("bench")


_RUNS: dict[int, BenchmarkRun] = {}


def get_run(seed: int, root: Path) -> BenchmarkRun:
    if seed not in _RUNS:
        _RUNS[seed] = run_benchmark(seed, root)
    return _RUNS[seed]


@pytest.fixture(scope="session")
def bench(bench_root) -> BenchmarkRun:
    """Single trained benchmark run (seed 0), shared across the session."""
    return get_run(BENCH_SEEDS[0], bench_root)


@pytest.fixture(scope="session")
def bench_all(bench_root) -> list[BenchmarkRun]:
    """All benchmark seeds; used by the acceptance suite."""
    return [get_run(seed, bench_root) for seed in BENCH_SEEDS]
