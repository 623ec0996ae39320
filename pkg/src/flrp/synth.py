"""Synthetic genuine/morph benchmark with known ground-truth artifact masks.

Genuine images are smooth low-frequency color fields with darker face-like
blobs at canonical eye/nose/mouth positions. A morph replaces small regions
near those landmarks with a 50/50 blend against a second subject (feathered
1 px at the region boundary), so the morph equals its artifact-free source
bit-for-bit outside the ground-truth mask. Regions keep a 2 px margin to the
image border, so full substitution recovers the source exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalkit, grad, netpbm, network as net, util

LABEL_GENUINE = "genuine"
LABEL_MORPH = "morph"
CLASS_INDEX = {LABEL_GENUINE: 0, LABEL_MORPH: 1}

REGION_MARGIN = 2  # artifact regions stay this far inside the image borders


@dataclass(frozen=True)
class SynthConfig:
    size: int = 32
    regions: int = 2
    region_min: int = 3
    region_max: int = 7
    texture_seed: int = 0
    train_frac: float = 0.7
    test_frac: float = 0.2
    val_frac: float = 0.1

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("image size must be at least 16")
        if not 1 <= self.region_min <= self.region_max:
            raise ValueError("bad region size range")
        if self.region_max > self.size - 2 * REGION_MARGIN:
            raise ValueError("artifact regions do not fit inside the image")
        if self.regions < 1:
            raise ValueError("need at least one artifact region")
        if abs(self.train_frac + self.test_frac + self.val_frac - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class SamplePair:
    image: np.ndarray  # (3, S, S) uint8
    label: str
    source: np.ndarray  # artifact-free base; identical to image for genuines
    artifact_mask: np.ndarray  # (S, S) bool; empty for genuines
    subject_a: int
    subject_b: int | None = None


def _landmarks(size: int) -> list[tuple[int, int]]:
    s = size
    return [
        (round(0.38 * s), round(0.30 * s)),  # left eye
        (round(0.38 * s), round(0.70 * s)),  # right eye
        (round(0.58 * s), round(0.50 * s)),  # nose
        (round(0.75 * s), round(0.50 * s)),  # mouth
    ]


_BLOB_RADII = [(2, 3), (2, 3), (3, 2), (2, 4)]


def gen_genuine(seed: int, config: SynthConfig | None = None) -> SamplePair:
    """Deterministic smooth image for one subject (pure function of seed+config)."""
    config = config or SynthConfig()
    s = config.size
    rng = np.random.default_rng([config.texture_seed, int(seed), 0])
    yy, xx = (np.mgrid[0:s, 0:s] / s).astype(np.float64)
    img = np.zeros((3, s, s))
    for ch in range(3):
        field = np.zeros((s, s))
        for _ in range(int(rng.integers(3, 7))):  # at most 6 components
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            field += amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
        lo, hi = field.min(), field.max()
        img[ch] = 128.0 if hi == lo else (field - lo) / (hi - lo) * 255.0
    rows = np.arange(s)[:, None]
    cols = np.arange(s)[None, :]
    for (cy, cx), (ry, rx) in zip(_landmarks(s), _BLOB_RADII):
        jy, jx = rng.integers(-2, 3, size=2)
        blob = ((rows - cy - jy) / ry) ** 2 + ((cols - cx - jx) / rx) ** 2 <= 1.0
        img[:, blob] *= 0.45
    u8 = util.to_uint8(img)
    return SamplePair(u8, LABEL_GENUINE, u8, np.zeros((s, s), dtype=bool), int(seed))


def blend_artifact(base, other, mask) -> np.ndarray:
    """Blend `other` into `base` inside `mask`: half weight in the interior,
    quarter weight on the 1 px inner boundary; outside the mask the base is
    reproduced bit-for-bit."""
    mask = np.asarray(mask, dtype=bool)
    w = np.zeros(mask.shape, dtype=np.float64)
    w[mask] = 0.25
    w[util.erode3(mask)] = 0.5
    blended = util.to_uint8((1.0 - w)[None] * np.asarray(base, np.float64) + w[None] * np.asarray(other, np.float64))
    out = np.asarray(base).copy()
    out[:, mask] = blended[:, mask]
    return out


def gen_morph_pair(seed_a: int, seed_b: int, config: SynthConfig | None = None) -> SamplePair:
    """Morph of two subjects: planted blend regions near landmark sites."""
    if seed_a == seed_b:
        raise ValueError("a morph needs two distinct subjects")
    config = config or SynthConfig()
    s = config.size
    base = gen_genuine(seed_a, config)
    other = gen_genuine(seed_b, config)
    rng = np.random.default_rng([config.texture_seed, int(seed_a), int(seed_b), 1])
    sites = _landmarks(s)
    picks = rng.choice(len(sites), size=config.regions, replace=config.regions > len(sites))
    mask = np.zeros((s, s), dtype=bool)
    for site in picks:
        cy, cx = sites[site]
        cy += int(rng.integers(-3, 4))
        cx += int(rng.integers(-3, 4))
        rh = int(rng.integers(config.region_min, config.region_max + 1))
        rw = int(rng.integers(config.region_min, config.region_max + 1))
        y0 = min(max(cy - rh // 2, REGION_MARGIN), s - REGION_MARGIN - rh)
        x0 = min(max(cx - rw // 2, REGION_MARGIN), s - REGION_MARGIN - rw)
        mask[y0 : y0 + rh, x0 : x0 + rw] = True
    image = blend_artifact(base.image, other.image, mask)
    return SamplePair(image, LABEL_MORPH, base.image, mask, int(seed_a), int(seed_b))


# ---------------------------------------------------------------------------
# dataset generation and manifests


@dataclass
class ManifestRow:
    image_id: str
    label: str
    image_path: Path
    source_path: Path
    mask_path: Path | None
    subject_a: int
    subject_b: int | None


def gen_dataset(config: SynthConfig, num_genuine: int, num_morphs: int, out_dir, seed: int = 0) -> dict[str, Path]:
    """Write images, masks and train/test/val manifests under `out_dir`.

    Subjects are partitioned across splits before morph pairing, so a subject
    and every morph built from it live in exactly one split.
    """
    if num_genuine < 2:
        raise ValueError("need at least two subjects")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    subjects = rng.permutation(num_genuine)
    n_train = round(config.train_frac * num_genuine)
    n_test = round(config.test_frac * num_genuine)
    split_subjects = {
        "train": subjects[:n_train],
        "test": subjects[n_train : n_train + n_test],
        "val": subjects[n_train + n_test :],
    }
    m_train = round(config.train_frac * num_morphs)
    m_test = round(config.test_frac * num_morphs)
    morph_counts = {"train": m_train, "test": m_test, "val": num_morphs - m_train - m_test}

    manifests = {}
    for split, members in split_subjects.items():
        if morph_counts[split] > 0 and len(members) < 2:
            raise ValueError(f"{split} split has too few subjects for disjoint morph pairs")
        rows = []
        for subject in members:
            pair = gen_genuine(int(subject), config)
            rel = Path("images") / f"g{subject:05d}.ppm"
            netpbm.write_ppm(out / rel, pair.image)
            rows.append((f"g{subject:05d}", LABEL_GENUINE, rel, rel, "", int(subject), ""))
        seen: set[tuple[int, int]] = set()
        attempts = 0
        while len(seen) < morph_counts[split]:
            attempts += 1
            if attempts > 1000 * morph_counts[split] + 1000:
                raise ValueError(f"{split} split: cannot sample enough distinct subject pairs")
            a, b = (int(v) for v in rng.choice(members, size=2, replace=False))
            if (a, b) in seen:
                continue
            seen.add((a, b))
            pair = gen_morph_pair(a, b, config)
            image_id = f"m{a:05d}x{b:05d}"
            rel = Path("images") / f"{image_id}.ppm"
            mask_rel = Path("masks") / f"{image_id}.pgm"
            netpbm.write_ppm(out / rel, pair.image)
            netpbm.write_pgm(out / mask_rel, pair.artifact_mask)
            source_rel = Path("images") / f"g{a:05d}.ppm"
            rows.append((image_id, LABEL_MORPH, rel, source_rel, mask_rel, a, b))
        manifest = out / f"{split}.csv"
        with open(manifest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "image_path", "source_path", "mask_path", "subject_a", "subject_b"])
            for row in rows:
                writer.writerow([str(v) for v in row])
        manifests[split] = manifest
    return manifests


def load_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "label", "image_path", "source_path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {sorted(required)}")
        for entry in reader:
            if entry["label"] not in CLASS_INDEX:
                raise ValueError(f"{path}: unknown label {entry['label']!r}")
            rows.append(
                ManifestRow(
                    image_id=entry["id"],
                    label=entry["label"],
                    image_path=root / entry["image_path"],
                    source_path=root / entry["source_path"],
                    mask_path=root / entry["mask_path"] if entry.get("mask_path") else None,
                    subject_a=int(entry["subject_a"]) if entry.get("subject_a") else -1,
                    subject_b=int(entry["subject_b"]) if entry.get("subject_b") else None,
                )
            )
    return rows


def load_samples(manifest_path) -> tuple[np.ndarray, np.ndarray, list[ManifestRow]]:
    """Images and class indices for every manifest row."""
    rows = load_manifest(manifest_path)
    if not rows:
        raise ValueError(f"empty manifest: {manifest_path}")
    images = np.stack([netpbm.read_ppm(r.image_path) for r in rows])
    labels = np.array([CLASS_INDEX[r.label] for r in rows], dtype=np.int64)
    return images, labels, rows


# ---------------------------------------------------------------------------
# training harness and scoring


def train_toy(train_manifest, config: grad.TrainConfig | None = None, out_dir=".",
              width_multiplier: int = 1) -> tuple[Path, Path]:
    """Train the toy detector on a manifest; write checkpoint + per-epoch log."""
    config = config or grad.TrainConfig()
    images, labels, _ = load_samples(train_manifest)
    model = net.build_toy(width_multiplier, seed=config.seed)
    mean = tuple(float(m) for m in images.mean(axis=(0, 2, 3)) / 255.0)
    model = net.ModelDef(model.layers, model.params, model.input_shape, mean, model.feature_end)
    trained, history = grad.train(model, images, labels, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_path = net.save_model(trained, out / "model.json")
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for epoch, loss, acc in history:
            writer.writerow([epoch, loss, acc])
    return model_path, log_path


def classification_accuracy(model: net.ModelDef, manifest_path) -> float:
    images, labels, _ = load_samples(manifest_path)
    hits = sum(int(np.argmax(net.forward_full(model, img).probs) == lab) for img, lab in zip(images, labels))
    return hits / len(labels)


def localization_score(map_values, truth_mask, alpha_percent: float) -> tuple[float, float]:
    """Hit rate and IoU of the top-alpha binary mask against the ground truth."""
    truth = np.asarray(truth_mask, dtype=bool)
    if not truth.any():
        raise ValueError("empty ground-truth mask")
    mask = evalkit.build_binary_mask(map_values, alpha_percent)
    inter = int((mask & truth).sum())
    union = int((mask | truth).sum())
    return inter / int(mask.sum()), inter / union
