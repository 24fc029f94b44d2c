"""Synthetic IQA data: procedural scenes, graded distortions, scene-disjoint splits.

Archive layout written by :func:`export` and read back by :func:`ingest`::

    <dir>/manifest.csv   header: filename,label,scene_id,distortion,level,channels,height,width
    <dir>/<filename>     raw little-endian float64 pixels, C x H x W row-major

``ingest`` also accepts ordinary image files (PNG, JPEG, ...) listed in a
manifest with at least the columns ``filename,label,scene_id``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d

DISTORTIONS = ("blur", "noise", "quantize")
# label decay rate per distortion type
KAPPA = {"blur": 0.45, "noise": 0.7, "quantize": 0.3}
BLUR_SIGMA_PER_LEVEL = 0.6
NOISE_STD_PER_LEVEL = 0.04
MANIFEST_FIELDS = ("filename", "label", "scene_id", "distortion", "level", "channels", "height", "width")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # (N, C, H, W) in [0, 1]
    labels: np.ndarray            # (N,) in [0, 1]
    scene_ids: np.ndarray         # (N,) int
    distortions: List[Tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        dist = [self.distortions[i] for i in idx] if self.distortions else []
        return Dataset(self.images[idx], self.labels[idx], self.scene_ids[idx], dist)

    @property
    def scenes(self) -> List[int]:
        return sorted(set(int(s) for s in self.scene_ids))


# -- scene synthesis -------------------------------------------------------------

def _band_limited_noise(rng, size: int) -> np.ndarray:
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    cutoff = rng.uniform(0.06, 0.2)
    spectrum = np.fft.fft2(white) * np.exp(-(fx ** 2 + fy ** 2) / (2 * cutoff ** 2))
    field_ = np.real(np.fft.ifft2(spectrum))
    field_ -= field_.min()
    peak = field_.max()
    return field_ / peak if peak > 0 else field_


def make_scene(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One grayscale reference scene: a seeded blend of gradient, checkerboard and smooth noise."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * xx + np.sin(angle) * yy
    grad = (grad - grad.min()) / max(grad.max() - grad.min(), 1e-12)
    period = int(rng.integers(3, 9))
    phase = rng.integers(0, period, size=2)
    idx = np.arange(size)
    checker = (((idx[:, None] + phase[0]) // period + (idx[None, :] + phase[1]) // period) % 2).astype(float)
    noise = _band_limited_noise(rng, size)
    w = rng.dirichlet([1.0, 1.0, 1.0])
    img = w[0] * grad + w[1] * checker + w[2] * noise
    lo, hi = rng.uniform(0.0, 0.2), rng.uniform(0.8, 1.0)
    img = lo + (hi - lo) * (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return np.clip(img, 0.0, 1.0)[None]


# -- distortions -------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, level: int) -> np.ndarray:
    if level == 0:
        return img.copy()
    k = gaussian_kernel(BLUR_SIGMA_PER_LEVEL * level)
    out = correlate1d(img, k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


def add_noise(img: np.ndarray, level: int, rng: np.random.Generator) -> np.ndarray:
    if level == 0:
        return img.copy()
    return np.clip(img + rng.normal(0.0, NOISE_STD_PER_LEVEL * level, img.shape), 0.0, 1.0)


def quantize(img: np.ndarray, level: int) -> np.ndarray:
    if level == 0:
        return img.copy()
    bins = max(2, 64 >> level)
    return np.round(img * (bins - 1)) / (bins - 1)


def distort(img: np.ndarray, kind: str, level: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if kind == "blur":
        return blur(img, level)
    if kind == "noise":
        return add_noise(img, level, rng if rng is not None else np.random.default_rng(0))
    if kind == "quantize":
        return quantize(img, level)
    raise DataError(f"unknown distortion {kind!r}")


def quality_label(kind: str, level: int, max_level: int) -> float:
    """``exp(-kappa * level)`` rescaled so level 0 -> 1 and ``max_level`` -> 0."""
    if level == 0:
        return 1.0
    k = KAPPA[kind]
    floor = math.exp(-k * max_level)
    return (math.exp(-k * level) - floor) / (1.0 - floor)


def generate(scene_count: int = 40, levels: int = 5, seed: int = 0, size: int = 32,
             label_noise: float = 0.0) -> Dataset:
    """Build a dataset of ``scene_count`` references and their distorted versions.

    Each scene contributes its reference (level 0, label 1.0) and, for every
    distortion type, levels ``1 .. levels - 1``.
    """
    if scene_count < 5:
        raise DataError(f"scene_count must be >= 5, got {scene_count}")
    if levels < 3:
        raise DataError(f"levels must be >= 3, got {levels}")
    images, labels, scenes, dist = [], [], [], []
    max_level = levels - 1
    for s in range(scene_count):
        rng = np.random.default_rng([seed, s])
        ref = make_scene(rng, size)
        images.append(ref)
        labels.append(1.0)
        scenes.append(s)
        dist.append(("none", 0))
        for kind in DISTORTIONS:
            for level in range(1, levels):
                images.append(distort(ref, kind, level, rng))
                labels.append(quality_label(kind, level, max_level))
                scenes.append(s)
                dist.append((kind, level))
    labels = np.array(labels)
    if label_noise > 0:
        jitter = np.random.default_rng([seed, scene_count, 7]).normal(0.0, label_noise, labels.shape)
        labels = np.clip(labels + jitter, 0.0, 1.0)
    return Dataset(np.stack(images), labels, np.array(scenes), dist)


# -- splits -------------------------------------------------------------------------

def split_scenes(scene_ids: Sequence[int], seed: int = 0, ratio: int = 4) -> Dict[str, List[int]]:
    """Shuffle scenes with ``seed`` and cut them ``ratio : 1`` into train and test."""
    scenes = sorted(set(int(s) for s in scene_ids))
    if len(scenes) < 2:
        raise DataError(f"need at least 2 scenes to split, got {len(scenes)}")
    n_test = max(1, int(round(len(scenes) / (ratio + 1))))
    order = np.random.default_rng(seed).permutation(len(scenes))
    test = sorted(scenes[i] for i in order[:n_test])
    train = sorted(scenes[i] for i in order[n_test:])
    if not train:
        raise DataError("split leaves no training scenes")
    return {"seed": int(seed), "train": train, "test": test}


def apply_split(dataset: Dataset, split: Dict[str, List[int]]) -> Tuple[Dataset, Dataset]:
    train_set, test_set = set(split["train"]), set(split["test"])
    if train_set & test_set:
        raise DataError(f"split is not scene-disjoint: {sorted(train_set & test_set)}")
    tr = [i for i, s in enumerate(dataset.scene_ids) if int(s) in train_set]
    te = [i for i, s in enumerate(dataset.scene_ids) if int(s) in test_set]
    return dataset.subset(tr), dataset.subset(te)


def split(dataset: Dataset, seed: int = 0, ratio: int = 4, path=None) -> Tuple[Dataset, Dataset]:
    """Scene-disjoint train/test split; the assignment is written to ``path`` if given."""
    if len(dataset.scenes) < 5:
        raise DataError(f"need at least 5 scenes to split, got {len(dataset.scenes)}")
    spec = split_scenes(dataset.scene_ids, seed, ratio)
    if path is not None:
        save_split(spec, path)
    return apply_split(dataset, spec)


def save_split(spec: Dict[str, List[int]], path) -> None:
    with open(path, "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(path) -> Dict[str, List[int]]:
    with open(path) as fh:
        spec = json.load(fh)
    for key in ("train", "test"):
        if key not in spec:
            raise DataError(f"{path}: split file lacks {key!r}")
    return spec


# -- archive I/O ----------------------------------------------------------------------

def export(dataset: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for i in range(len(dataset)):
            name = f"img_{i:05d}.f64"
            img = np.ascontiguousarray(dataset.images[i], dtype="<f8")
            with open(os.path.join(directory, name), "wb") as blob:
                blob.write(img.tobytes(order="C"))
            kind, level = dataset.distortions[i] if dataset.distortions else ("unknown", 0)
            c, h, w = img.shape
            writer.writerow([name, repr(float(dataset.labels[i])), int(dataset.scene_ids[i]),
                             kind, level, c, h, w])


def _load_picture(path: str, size: int, channels: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        w, h = im.size
        scale = size / min(w, h)
        im = im.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BICUBIC)
        w, h = im.size
        left, top = (w - size) // 2, (h - size) // 2
        im = im.crop((left, top, left + size, top + size))
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def ingest(directory, size: int = 32, channels: int = 1,
           label_range: Optional[Tuple[float, float]] = None) -> Dataset:
    """Read a manifest-described directory into a :class:`Dataset`.

    Raw ``.f64`` blobs are read as-is; picture files are resized so the short
    side equals ``size`` and center-cropped. Labels are min-max normalized to
    [0, 1]. Problems are reported with their manifest line number.
    """
    manifest = os.path.join(directory, "manifest.csv")
    if not os.path.exists(manifest):
        raise DataError(f"{manifest}: manifest not found")
    images, labels, scenes, dist = [], [], [], []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"filename", "label", "scene_id"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{manifest}:1: header must include {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = float(row["label"])
                scene = int(row["scene_id"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{manifest}:{lineno}: malformed row ({exc})") from None
            if not math.isfinite(label):
                raise DataError(f"{manifest}:{lineno}: label {row['label']!r} is not finite")
            if label_range is not None and not label_range[0] <= label <= label_range[1]:
                raise DataError(f"{manifest}:{lineno}: label {label} outside declared range {label_range}")
            path = os.path.join(directory, row["filename"] or "")
            if not row["filename"] or not os.path.isfile(path):
                raise DataError(f"{manifest}:{lineno}: missing file {row['filename']!r}")
            if path.endswith(".f64"):
                try:
                    shape = (int(row["channels"]), int(row["height"]), int(row["width"]))
                except (KeyError, TypeError, ValueError):
                    raise DataError(f"{manifest}:{lineno}: raw blob needs channels,height,width columns") from None
                img = np.fromfile(path, dtype="<f8")
                if img.size != np.prod(shape):
                    raise DataError(f"{manifest}:{lineno}: {row['filename']} holds {img.size} values, "
                                    f"expected {shape}")
                img = img.reshape(shape).astype(np.float64)
            else:
                img = _load_picture(path, size, channels)
            if img.min() < 0 or img.max() > 1:
                raise DataError(f"{manifest}:{lineno}: pixel values outside [0, 1]")
            images.append(img)
            labels.append(label)
            scenes.append(scene)
            level = row.get("level")
            dist.append((row.get("distortion") or "unknown", int(level) if level else 0))
    if not images:
        raise DataError(f"{manifest}: no samples")
    if len({im.shape for im in images}) > 1:
        raise DataError(f"{manifest}: images have differing shapes")
    labels = np.array(labels)
    lo, hi = labels.min(), labels.max()
    if hi == lo:
        if len(labels) > 1:
            raise DataError(f"{manifest}: all labels equal {lo}; cannot min-max normalize")
        normalized = np.clip(labels, 0.0, 1.0)
    else:
        normalized = (labels - lo) / (hi - lo)
    return Dataset(np.stack(images), normalized, np.array(scenes), dist)
