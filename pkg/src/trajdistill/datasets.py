"""Toy generators, file loaders and the differentiable augmentation policy."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import storage
from .autodiff import Tensor
from .nn import LayerRecord

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples ``images`` of shape ``[n, *sample_shape]`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels outside 0..{self.class_count - 1}")
        missing = sorted(set(range(self.class_count)) - set(labels.tolist()))
        if missing:
            raise ValueError(f"classes without samples: {missing}")
        if not np.isfinite(images).all():
            raise ValueError("images contain non-finite values")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, dict(self.meta))


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Learnable images with fixed labels (ipc per class) and a learnable step size."""

    images: np.ndarray
    labels: np.ndarray
    alpha: float
    class_count: int

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.shape[0] != labels.shape[0]:
            raise ValueError("images and labels differ in length")
        counts = np.bincount(labels, minlength=self.class_count)
        if len(counts) != self.class_count or len(set(counts.tolist())) != 1 or counts[0] == 0:
            raise ValueError(f"synthetic set must hold the same count per class, got {counts}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def ipc(self) -> int:
        return len(self.labels) // self.class_count

    def __len__(self) -> int:
        return len(self.labels)

    def replace(self, **changes) -> "SyntheticDataset":
        return replace(self, **changes)

    def as_labeled(self) -> LabeledDataset:
        return LabeledDataset(self.images, self.labels, self.class_count)


SYNTHETIC_FORMAT = 1


def save_synthetic(syn: SyntheticDataset, directory, extra: dict | None = None) -> Path:
    """Write ``synthetic.bin`` (pixels and alpha) and ``labels.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n = syn.images.size
    records = (LayerRecord("images", syn.images.shape, 0), LayerRecord("alpha", (1,), n))
    values = np.concatenate([syn.images.reshape(-1), [syn.alpha]])
    digest = storage.write(out / "synthetic.bin", records, values)
    meta = {"format_version": SYNTHETIC_FORMAT, "labels": syn.labels.tolist(),
            "class_count": syn.class_count, "alpha": syn.alpha, "sha256": digest}
    meta.update(extra or {})
    (out / "labels.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def load_synthetic(directory) -> SyntheticDataset:
    src = Path(directory)
    if not (src / "labels.json").is_file() or not (src / "synthetic.bin").is_file():
        raise FileNotFoundError(f"{src}: not a synthetic dataset directory")
    meta = json.loads((src / "labels.json").read_text())
    if meta.get("format_version") != SYNTHETIC_FORMAT:
        raise storage.VersionMismatchError(
            f"synthetic format {meta.get('format_version')}, expected {SYNTHETIC_FORMAT}")
    records, values = storage.read(src / "synthetic.bin", meta["sha256"])
    by_name = {r.name: r for r in records}
    if set(by_name) != {"images", "alpha"}:
        raise storage.LayoutMismatchError(f"unexpected records {sorted(by_name)}")
    img = by_name["images"]
    images = values[img.offset:img.offset + int(np.prod(img.shape))].reshape(img.shape)
    alpha = float(values[by_name["alpha"].offset])
    return SyntheticDataset(images, np.array(meta["labels"]), alpha, int(meta["class_count"]))


# ---------------------------------------------------------------------------
# generators


def gen_blobs(C: int, per_class: int, shape, spread: float, seed: int,
              separation: float = 1.0, noise: float = 0.0) -> LabeledDataset:
    """Gaussian class clusters, as raw vectors or as rendered intensity bumps.

    ``shape`` is an int (vector dimension) or ``(channels, h, w)``.  Vector
    samples are ``0.5 + separation * centre + spread * noise`` clipped to
    [0, 1]; image samples are Gaussian bumps whose centre (in pixels) is the
    class location jittered by ``spread``.  ``noise`` adds per-pixel
    Gaussian noise to images (clipped back into [0, 1]).
    """
    if C < 2 or per_class < 1:
        raise ValueError("gen_blobs needs C >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), per_class)
    if isinstance(shape, (int, np.integer)) or len(tuple(shape)) == 1:
        d = int(shape if isinstance(shape, (int, np.integer)) else tuple(shape)[0])
        centres = rng.normal(size=(C, d))
        centres *= 0.25 * separation / np.linalg.norm(centres, axis=1, keepdims=True)
        noise = rng.normal(size=(C * per_class, d))
        images = np.clip(0.5 + centres[labels] + spread * noise, 0.0, 1.0)
    else:
        ch, h, w = (int(s) for s in shape)
        # class locations spread on a circle around the image centre
        phase = rng.uniform(0, 2 * np.pi)
        angles = phase + 2 * np.pi * np.arange(C) / C
        radius = 0.28 * separation * min(h, w)
        locs = np.stack([(h - 1) / 2 + radius * np.sin(angles),
                         (w - 1) / 2 + radius * np.cos(angles)], axis=1)
        channel_gain = rng.uniform(0.6, 1.0, size=(C, ch))
        width = 0.15 * min(h, w)
        jitter = spread * rng.normal(size=(C * per_class, 2))
        centres = locs[labels] + jitter
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        d2 = ((yy[None] - centres[:, 0, None, None]) ** 2
              + (xx[None] - centres[:, 1, None, None]) ** 2)
        bumps = np.exp(-d2 / (2 * width**2))
        images = bumps[:, None] * channel_gain[labels][:, :, None, None]
        if noise:
            images = np.clip(images + noise * rng.normal(size=images.shape), 0.0, 1.0)
    return LabeledDataset(images, labels, C, {"source": "blobs", "seed": int(seed)})


def split_per_class(data: LabeledDataset, test_per_class: int, seed: int):
    """Deterministic per-class train/test split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.class_count):
        idx = rng.permutation(data.class_indices(c))
        if len(idx) <= test_per_class:
            raise ValueError(f"class {c} has only {len(idx)} samples")
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    return data.subset(np.sort(np.concatenate(train_idx))), data.subset(np.sort(np.concatenate(test_idx)))


# ---------------------------------------------------------------------------
# loaders


class DataFormatError(ValueError):
    """Malformed dataset file; ``code`` distinguishes the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _read_idx(path, magic: int, ndim: int):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated", f"{path}: truncated header")
    found, *dims = struct.unpack(">I" + "I" * ndim, raw[:header])
    if found != magic:
        raise DataFormatError("bad_magic", f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError("truncated", f"{path}: truncated payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """MNIST-style IDX pair; pixels are scaled to [0, 1] with a channel axis added."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise DataFormatError("count_mismatch", "label/image count mismatch")
    labels = labels.astype(np.int64)
    return LabeledDataset(images[:, None].astype(np.float64) / 255.0, labels,
                          int(labels.max()) + 1, {"source": "idx"})


def load_csv(path, shape=None, class_count: int | None = None) -> LabeledDataset:
    """Rows of ``label, pixel...``; values above 1 trigger scaling by 1/255."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataFormatError("empty", f"{path}: no rows")
    try:
        labels = np.array([int(r[0]) for r in rows])
        pixels = np.array([[float(v) for v in r[1:]] for r in rows])
    except ValueError as exc:
        raise DataFormatError("parse", f"{path}: {exc}") from None
    scaled = bool(pixels.max() > 1.0)
    if scaled:
        pixels = pixels / 255.0
    if shape is not None:
        pixels = pixels.reshape((len(rows),) + tuple(shape))
    C = class_count or int(labels.max()) + 1
    return LabeledDataset(pixels, labels, C, {"source": "csv", "scaled_by_255": scaled})


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    flip: bool = False
    shift: int = 0
    scale: float = 0.0

    @property
    def enabled(self) -> bool:
        return self.flip or self.shift > 0 or self.scale > 0

    def to_dict(self) -> dict:
        return {"flip": self.flip, "shift": self.shift, "scale": self.scale}


def sample_transform(policy: AugmentationPolicy, step_seed) -> dict:
    """Draw one set of transform parameters (shared across a batch)."""
    rng = np.random.default_rng(step_seed)
    return {
        "flip": bool(policy.flip and rng.random() < 0.5),
        "dy": int(rng.integers(-policy.shift, policy.shift + 1)) if policy.shift else 0,
        "dx": int(rng.integers(-policy.shift, policy.shift + 1)) if policy.shift else 0,
        "scale": float(1.0 + rng.uniform(-policy.scale, policy.scale)) if policy.scale else 1.0,
    }


def _bilinear_matrix(n: int, factor: float) -> np.ndarray:
    """Row i holds the weights that resample coordinate i zoomed by ``factor``."""
    centre = (n - 1) / 2
    src = (np.arange(n) - centre) / factor + centre
    lo = np.floor(src).astype(int)
    frac = src - lo
    m = np.zeros((n, n))
    for i in range(n):
        for j, wgt in ((lo[i], 1 - frac[i]), (lo[i] + 1, frac[i])):
            if 0 <= j < n and wgt:
                m[i, j] += wgt
    return m


def apply_transform(images: Tensor, params: dict) -> Tensor:
    x = ad.as_tensor(images)
    if x.ndim != 4:
        return x
    if params.get("flip"):
        x = x[..., ::-1]
    dy, dx = params.get("dy", 0), params.get("dx", 0)
    if dy or dx:
        k = max(abs(dy), abs(dx))
        h, w = x.shape[2], x.shape[3]
        xp = ad.pad2d(x, k)
        x = xp[:, :, k - dy:k - dy + h, k - dx:k - dx + w]
    s = params.get("scale", 1.0)
    if s != 1.0:
        h, w = x.shape[2], x.shape[3]
        x = Tensor(_bilinear_matrix(h, s)) @ x @ Tensor(_bilinear_matrix(w, s).T)
    return x


def augment(images, policy: AugmentationPolicy, step_seed) -> Tensor:
    """Apply one sampled transform to every image of the batch.

    Vector data (anything that is not ``[n, c, h, w]``) passes through.
    """
    x = ad.as_tensor(images)
    if not policy.enabled or x.ndim != 4:
        return x
    return apply_transform(x, sample_transform(policy, step_seed))
