"""Command-line pipeline: gen, train, select, explain, evaluate, compare.

Every command reads defaults from an optional JSON config file (flat keys
matching the flag names) with explicit flags taking precedence, writes its
artifacts only under --out, and is deterministic given identical inputs and
seed. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attribution, evalkit, grad, netpbm, network as net, synth, tensorio

METHODS = ("lrp", "flrp", "sensitivity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _merge_config(args, defaults: dict) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _parse_methods(spec: str) -> list[str]:
    methods = [m.strip() for m in spec.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}; choose from {list(METHODS)}")
    if not methods:
        raise ValueError("no methods given")
    return methods


def _parse_alphas(spec: str) -> list[float]:
    return [float(a) for a in spec.split(",") if a.strip()]


def _morph_rows(manifest_path):
    """Morph entries from either the full dataset manifest or the minimal
    id,morph_path,source_path evaluation manifest."""
    path = Path(manifest_path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    header = path.read_text().splitlines()[0] if path.read_text() else ""
    if "morph_path" in header:
        return [(p.image_id, p.morph_path, p.source_path, None) for p in evalkit.load_eval_manifest(path)]
    rows = synth.load_manifest(path)
    return [
        (r.image_id, r.image_path, r.source_path, r.mask_path)
        for r in rows
        if r.label == synth.LABEL_MORPH
    ]


def _compute_map(method: str, model, trace, morph_selection, image_id: str):
    morph_class = synth.CLASS_INDEX[synth.LABEL_MORPH]
    if method == "lrp":
        return attribution.lrp_map(model, trace, morph_class, image_id=image_id)
    if method == "sensitivity":
        return attribution.sensitivity_map(model, trace, morph_class, image_id=image_id)
    if morph_selection is None:
        raise ValueError("method 'flrp' needs --selection with a morph-neuron selection file")
    return attribution.flrp_map(model, trace, morph_selection, image_id=image_id)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _merge_config(args, {
        "seed": 0, "n_genuine": 240, "n_morphs": 240,
        "size": 32, "regions": 2, "texture_seed": 0,
    })
    config = synth.SynthConfig(size=cfg["size"], regions=cfg["regions"], texture_seed=cfg["texture_seed"])
    manifests = synth.gen_dataset(config, cfg["n_genuine"], cfg["n_morphs"], args.out, seed=cfg["seed"])
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _merge_config(args, {
        "seed": 0, "learning_rate": 0.05, "momentum": 0.9, "batch_size": 16,
        "epochs": 20, "width": 1, "noise_sigma": 1.0, "salt_pepper": 0.005,
        "jitter": True, "flip": True, "blur": False,
    })
    train_config = grad.TrainConfig(
        learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
        batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
        jitter=cfg["jitter"], flip=cfg["flip"], noise_sigma=cfg["noise_sigma"],
        salt_pepper=cfg["salt_pepper"], blur=cfg["blur"],
    )
    model_path, log_path = synth.train_toy(args.manifest, train_config, args.out, cfg["width"])
    print(f"model: {model_path}")
    print(f"log: {log_path}")
    return 0


def cmd_select(args) -> int:
    model = net.load_model(args.model)
    images, labels, _ = synth.load_samples(args.manifest)
    grids = np.stack([net.forward_full(model, img).outputs[model.feature_end] for img in images])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_hash = net.model_param_hash(model)
    morph_mask = labels == synth.CLASS_INDEX[synth.LABEL_MORPH]
    for target, is_target, name in (
        (synth.LABEL_MORPH, morph_mask, "selection_morph.json"),
        (synth.LABEL_GENUINE, ~morph_mask, "selection_bonafide.json"),
    ):
        selection = attribution.select_neurons(grids, is_target, target, model_hash)
        path = attribution.save_selection(selection, out / name)
        print(f"{target}: {path}")
    return 0


def cmd_explain(args) -> int:
    cfg = _merge_config(args, {"method": "lrp,flrp,sensitivity", "limit": 0})
    methods = _parse_methods(cfg["method"])
    model = net.load_model(args.model)
    selection = attribution.load_selection(args.selection) if args.selection else None
    rows = _morph_rows(args.manifest)
    if cfg["limit"]:
        rows = rows[: cfg["limit"]]
    if not rows:
        raise ValueError("manifest contains no morph entries to explain")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_id, image_path, _, _ in rows:
        trace = net.forward_full(model, netpbm.read_ppm(image_path))
        for method in methods:
            rmap = _compute_map(method, model, trace, selection, image_id)
            tensorio.write_rten(out / f"{image_id}.{method}.rten", {"relevance": rmap.values})
            netpbm.write_ppm(out / f"{image_id}.{method}.ppm", attribution.colorize(rmap.values))
    print(f"wrote {len(rows) * len(methods) * 2} files to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _merge_config(args, {"methods": "lrp,flrp,sensitivity", "alphas": "0,0.5,1,2,5,10",
                               "include_undetected": False})
    methods = _parse_methods(cfg["methods"])
    alphas = sorted(a for a in _parse_alphas(cfg["alphas"]) if a > 0)  # the 0 baseline row is always reported
    model = net.load_model(args.model)
    sel_morph = attribution.load_selection(args.selection_morph)
    sel_bona = attribution.load_selection(args.selection_bonafide)
    samples = []
    for image_id, image_path, source_path, _ in _morph_rows(args.manifest):
        morph = netpbm.read_ppm(image_path)
        source = netpbm.read_ppm(source_path)
        trace = net.forward_full(model, morph)
        maps = {m: _compute_map(m, model, trace, sel_morph, image_id).values for m in methods}
        samples.append(evalkit.SweepSample(image_id, morph, source, maps))
    reports = evalkit.substitution_sweep(
        model, sel_morph, sel_bona, samples,
        evalkit.SubstitutionConfig(tuple(alphas)),
        include_undetected=cfg["include_undetected"],
        morph_class=synth.CLASS_INDEX[synth.LABEL_MORPH],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = evalkit.write_report_csv(reports, out / "report.csv")
    print(f"report: {path}")
    return 0


def cmd_compare(args) -> int:
    cfg = _merge_config(args, {"methods": "lrp,flrp,sensitivity", "alpha": 1.0, "bins": 20})
    methods = _parse_methods(cfg["methods"])
    model = net.load_model(args.model)
    selection = attribution.load_selection(args.selection) if args.selection else None
    rows = _morph_rows(args.manifest)
    if not rows:
        raise ValueError("manifest contains no morph entries to compare")
    masks: dict[str, list[np.ndarray]] = {m: [] for m in methods}
    k = None
    for image_id, image_path, _, _ in rows:
        trace = net.forward_full(model, netpbm.read_ppm(image_path))
        for method in methods:
            rmap = _compute_map(method, model, trace, selection, image_id)
            if k is None:
                k = evalkit.mask_pixel_count(rmap.values.shape, cfg["alpha"])
            binary = evalkit.build_binary_mask(rmap.values, cfg["alpha"])
            masks[method].append(evalkit.refine_mask(binary, method, cfg["alpha"]).weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        fh.write("method_a,method_b,mean,std,n\n")
        for i, ma in enumerate(methods):
            for mb in methods[i + 1 :]:
                values = [evalkit.mask_difference(a, b, k) for a, b in zip(masks[ma], masks[mb])]
                hist = evalkit.diff_histogram(values, cfg["bins"], (ma, mb))
                evalkit.write_histogram_csv(hist, out / f"hist_{ma}_{mb}.csv")
                mean, std = evalkit.mean_std(values)
                fh.write(f"{ma},{mb},{mean!r},{std!r},{len(values)}\n")
    print(f"summary: {summary}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flrp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default settings for this command")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic genuine/morph dataset")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-genuine", dest="n_genuine", type=int)
    p.add_argument("--n-morphs", dest="n_morphs", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--regions", type=int)
    p.add_argument("--texture-seed", dest="texture_seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the toy detector on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--width", type=int, help="toy width multiplier")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--salt-pepper", dest="salt_pepper", type=float)
    p.add_argument("--no-jitter", dest="jitter", action="store_false", default=None)
    p.add_argument("--no-flip", dest="flip", action="store_false", default=None)
    p.add_argument("--blur", action="store_true", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="select morph/bona-fide start neurons from training data")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("explain", help="write raw and colorized relevance maps")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection", help="morph-neuron selection JSON (needed for flrp)")
    p.add_argument("--method", help="comma-separated subset of lrp,flrp,sensitivity")
    p.add_argument("--limit", type=int, help="explain only the first N morphs")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="substitution sweep over the alpha list")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection-morph", dest="selection_morph", required=True)
    p.add_argument("--selection-bonafide", dest="selection_bonafide", required=True)
    p.add_argument("--methods")
    p.add_argument("--alphas", help="comma-separated percentages; 0 maps to the baseline row")
    p.add_argument("--include-undetected", dest="include_undetected", action="store_true", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="pairwise transparency-mask difference histograms")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection", help="morph-neuron selection JSON (needed for flrp)")
    p.add_argument("--methods")
    p.add_argument("--alpha", type=float)
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
