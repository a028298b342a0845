"""Image datasets: CIFAR-10 binary ingestion, a deterministic synthetic
generator, class subsetting and PNG + JSON-manifest persistence."""
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class DatasetFormatError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # uint8, (C, H, W)
    label: int


@dataclass
class Dataset:
    """An ordered, index-addressable set of uint8 images with labels.

    ``images`` has shape (N, C, H, W). Treat instances as immutable; every
    operation in this package returns a new dataset instead of editing one.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise ValueError("images must be uint8")
        if self.images.ndim != 4 or self.images.shape[1] not in (1, 3):
            raise ValueError(f"images must be (N, C, H, W) with C in {{1, 3}}, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def replace(self, images=None, labels=None, name=None, notes=None):
        return Dataset(
            name=self.name if name is None else name,
            images=self.images if images is None else images,
            labels=self.labels if labels is None else labels,
            num_classes=self.num_classes,
            split=self.split,
            notes=dict(self.notes) if notes is None else notes,
        )

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return self.replace(images=self.images[indices], labels=self.labels[indices])

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(str((self.images.shape, self.num_classes, self.split)).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class DatasetPair:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self):
        return self.train.num_classes


# ---------------------------------------------------------------------------
# CIFAR-10

_RECORD = 1 + 3 * 32 * 32
_TRAIN_BATCHES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_TEST_BATCHES = ["test_batch.bin"]


def _read_batch(path):
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"{path}: missing batch file (offset 0)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _RECORD:
        offset = (raw.size // _RECORD) * _RECORD
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file has {raw.size} bytes, record size {_RECORD})")
    raw = raw.reshape(-1, _RECORD)
    return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)


def load_cifar10(directory):
    """Read the CIFAR-10 binary distribution (``cifar-10-batches-bin``)."""
    directory = Path(directory)
    out = {}
    for split, files in (("train", _TRAIN_BATCHES), ("test", _TEST_BATCHES)):
        parts = [_read_batch(directory / f) for f in files]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        if labels.max() > 9:
            raise DatasetFormatError(f"{directory}: label byte {labels.max()} outside [0, 10)")
        out[split] = Dataset("cifar10", images, labels, 10, split, {"source": str(directory)})
    return DatasetPair(out["train"], out["test"])


# ---------------------------------------------------------------------------
# Synthetic patterns

#: Class index -> pattern family. Fixed in code so class semantics never move.
FAMILIES = (
    "disk", "square", "triangle", "hstripes", "vstripes",
    "checker", "ring", "cross", "dstripes", "dots",
)


#: "easy" is linearly separable on spectral features (CI); "natural" adds a
#: textured background, a distractor shape, jittered placement and low
#: contrast, so a small CNN sits near 90% and shape is not the only cue.
DIFFICULTIES = ("easy", "natural")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    per_class_train: int = 500
    per_class_test: int = 50
    image_size: int = 32
    seed: int = 0
    noise_std: float = None  # default 10 (easy) / 14 (natural)
    difficulty: str = "easy"

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")

    @property
    def noise(self):
        if self.noise_std is not None:
            return float(self.noise_std)
        return 10.0 if self.difficulty == "easy" else 14.0


def _family_mask(family, size, rng):
    """Foreground mask in [0, 1] for one image of ``family`` with seeded jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = size / 2.0
    cy = c + rng.uniform(-0.12, 0.12) * size
    cx = c + rng.uniform(-0.12, 0.12) * size
    scale = rng.uniform(0.75, 1.0)
    period = size / rng.uniform(4.5, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    r = np.hypot(yy - cy, xx - cx)
    if family == "disk":
        m = r < 0.3 * size * scale
    elif family == "square":
        half = 0.28 * size * scale
        m = (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
    elif family == "triangle":
        half = 0.34 * size * scale
        top = cy - half
        m = (yy > top) & (yy < cy + half) & (np.abs(xx - cx) < (yy - top) * 0.6)
    elif family == "hstripes":
        m = np.sin(2 * np.pi * yy / period + phase) > 0
    elif family == "vstripes":
        m = np.sin(2 * np.pi * xx / period + phase) > 0
    elif family == "checker":
        p = period * 1.2
        m = (np.sin(2 * np.pi * yy / p + phase) * np.sin(2 * np.pi * xx / p + phase)) > 0
    elif family == "ring":
        m = np.abs(r - 0.28 * size * scale) < 0.08 * size
    elif family == "cross":
        w = 0.09 * size
        arm = 0.38 * size * scale
        m = ((np.abs(yy - cy) < w) & (np.abs(xx - cx) < arm)) | \
            ((np.abs(xx - cx) < w) & (np.abs(yy - cy) < arm))
    elif family == "dstripes":
        m = np.sin(2 * np.pi * (yy + xx) / (period * 1.4) + phase) > 0
    elif family == "dots":
        off = 0.2 * size * scale
        rad = 0.11 * size
        m = np.zeros((size, size), dtype=bool)
        for dy, dx in ((-off, -off), (-off, off), (off, -off), (off, off)):
            m |= np.hypot(yy - cy - dy, xx - cx - dx) < rad
    else:  # pragma: no cover
        raise KeyError(family)
    return m.astype(np.float64)


def _render(family, size, noise_std, rng):
    mask = _family_mask(family, size, rng)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    # shaded background: random linear color gradient
    bg0 = rng.uniform(30, 200, size=3)
    bg1 = bg0 + rng.uniform(-50, 50, size=3)
    t = rng.uniform(0.2, 0.8) * yy + rng.uniform(0.2, 0.8) * xx
    bg = bg0[:, None, None] + (bg1 - bg0)[:, None, None] * t[None]
    fg = rng.uniform(0, 255, size=3)
    # keep the foreground visibly distinct from the background mean
    if np.abs(fg - bg.mean(axis=(1, 2))).max() < 70:
        fg = np.where(bg.mean(axis=(1, 2)) > 127, fg * 0.3, 255 - (255 - fg) * 0.3)
    img = bg * (1 - mask[None]) + fg[:, None, None] * mask[None]
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _render_natural(family, size, noise_std, rng):
    mask = _family_mask(family, size, rng)
    mask = np.roll(mask, tuple(rng.integers(-3, 4, size=2)), axis=(0, 1))
    low = torch.from_numpy(rng.normal(0, 1, size=(1, 3, 4, 4)))
    tex = F.interpolate(low, size=(size, size), mode="bicubic", align_corners=True)[0].numpy()
    bg = rng.uniform(40, 200, size=3)[:, None, None] + 30 * tex
    mean = bg.mean(axis=(1, 2))
    fg = mean + rng.choice([-1, 1], size=3) * rng.uniform(25, 90, size=3)
    distractor = _family_mask(FAMILIES[rng.integers(len(FAMILIES))], size, rng)
    dcol = mean + rng.choice([-1, 1], size=3) * rng.uniform(10, 40, size=3)
    img = bg * (1 - 0.6 * distractor[None]) + 0.6 * distractor[None] * dcol[:, None, None]
    alpha = rng.uniform(0.6, 1.0)
    img = img * (1 - alpha * mask[None]) + alpha * mask[None] * fg[:, None, None]
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec):
    """Deterministic synthetic dataset; class k is drawn from ``FAMILIES[k]``."""
    if spec.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if spec.num_classes > len(FAMILIES):
        raise ValueError(f"at most {len(FAMILIES)} pattern families are defined")
    if spec.image_size < 16:
        raise ValueError("image_size must be >= 16")
    render = _render if spec.difficulty == "easy" else _render_natural
    out = {}
    for split, per_class, salt in (("train", spec.per_class_train, 0), ("test", spec.per_class_test, 1)):
        images, labels = [], []
        for k in range(spec.num_classes):
            rng = np.random.default_rng([spec.seed, salt, k])
            for _ in range(per_class):
                images.append(render(FAMILIES[k], spec.image_size, spec.noise, rng))
                labels.append(k)
        images = np.stack(images) if images else np.zeros((0, 3, spec.image_size, spec.image_size), np.uint8)
        # interleave classes with a seeded permutation so the order is not class-sorted
        perm = np.random.default_rng([spec.seed, salt, 99]).permutation(len(labels))
        out[split] = Dataset(
            f"synthetic-{spec.difficulty}-k{spec.num_classes}-s{spec.seed}", images[perm], np.asarray(labels)[perm],
            spec.num_classes, split, {"synthetic_spec": spec.__dict__.copy()})
    return DatasetPair(out["train"], out["test"])


# ---------------------------------------------------------------------------
# Subsetting


def _pick(dataset, classes, per_class, rng):
    keep = []
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < per_class:
            raise CapacityError(
                f"class {c} of {dataset.name}/{dataset.split} has {len(idx)} images, {per_class} requested")
        keep.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, np.int64)


def subset(pair: DatasetPair, classes, per_class_train, per_class_test, seed=0):
    """Seeded per-class subset with labels densely re-indexed in ``classes`` order.

    Retained images keep their relative order.
    """
    classes = [int(c) for c in classes]
    remap = np.full(pair.num_classes, -1, dtype=np.int64)
    remap[classes] = np.arange(len(classes))
    out = []
    for ds, n, salt in ((pair.train, per_class_train, 0), (pair.test, per_class_test, 1)):
        idx = _pick(ds, classes, n, np.random.default_rng([seed, salt]))
        out.append(Dataset(f"{ds.name}-sub{len(classes)}", ds.images[idx], remap[ds.labels[idx]],
                           len(classes), ds.split, dict(ds.notes, subset_classes=classes)))
    return DatasetPair(*out)


# ---------------------------------------------------------------------------
# Persistence

MANIFEST = "manifest.json"


def save_dataset(dataset: Dataset, directory, extra=None):
    """Write one PNG per image plus ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(dataset.images):
        name = f"images/{i:06d}.png"
        arr = img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))
        Image.fromarray(arr).save(directory / name)
        files.append(name)
    manifest = {
        "name": dataset.name,
        "split": dataset.split,
        "num_classes": int(dataset.num_classes),
        "shape": list(dataset.shape),
        "files": files,
        "labels": [int(v) for v in dataset.labels],
        "notes": dataset.notes,
    }
    if extra:
        manifest.update(extra)
    with open(directory / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, default=_json_default)
    return manifest


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise IntegrityError(f"{directory}: no {MANIFEST}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_dataset(directory):
    directory = Path(directory)
    m = read_manifest(directory)
    if len(m["files"]) != len(m["labels"]):
        raise IntegrityError(f"{directory}: {len(m['files'])} files but {len(m['labels'])} labels")
    K = int(m["num_classes"])
    C, H, W = m["shape"]
    images = np.empty((len(m["files"]), C, H, W), dtype=np.uint8)
    for i, (name, label) in enumerate(zip(m["files"], m["labels"])):
        if not 0 <= label < K:
            raise IntegrityError(f"{directory}: label {label} of {name} outside [0, {K})")
        path = directory / name
        if not path.exists():
            raise IntegrityError(f"{directory}: manifest lists missing file {name}")
        arr = np.asarray(Image.open(path))
        arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
        if arr.shape != (C, H, W):
            raise IntegrityError(f"{directory}: {name} has shape {arr.shape}, manifest says {(C, H, W)}")
        images[i] = arr
    return Dataset(m["name"], images, m["labels"], K, m.get("split", "train"), m.get("notes", {}))


def cifar10_dir_from_env():
    """Directory named by ``BAATBENCH_CIFAR10`` if it holds the binary batches."""
    d = os.environ.get("BAATBENCH_CIFAR10")
    if d and (Path(d) / "data_batch_1.bin").exists():
        return Path(d)
    return None
