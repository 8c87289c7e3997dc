"""Dataset ingestion: the idx binary format and manifest-driven image
directories, normalization to [-1, 1], and nested fractional subsampling.

Labels are loaded into a separate store that the training code path never
receives; only the evaluation protocols consume them.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_UBYTE = 0x08


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    format: str                       # "idx" | "image-dir"
    root: str
    channels: int = 1
    image_size: int = 28
    with_labels: bool = False

    def __post_init__(self):
        if self.format not in ("idx", "image-dir"):
            raise DataFormatError(f"unknown dataset format {self.format!r}")


@dataclass(frozen=True)
class SplitSpec:
    fraction: float = 1.0
    seed: int = 0
    role: str = "train"               # train | eval-train | eval-test

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.role not in ("train", "eval-train", "eval-test"):
            raise ValueError(f"unknown split role {self.role!r}")


class ImageCollection:
    """Float images in [-1, 1], stable canonical order, no labels."""

    def __init__(self, images: np.ndarray, keys: list[str] | None = None):
        if images.ndim != 4:
            raise DataFormatError(f"expected (N, C, H, W) images, got "
                                  f"shape {images.shape}")
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.keys = keys if keys is not None else \
            [str(i) for i in range(len(images))]

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]


class LabelStore:
    """Integer labels aligned with an ImageCollection's order, kept apart
    from the collection so contrastive training cannot touch them."""

    def __init__(self, labels: np.ndarray, num_classes: int | None = None):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes if num_classes is not None
                               else self.labels.max() + 1)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError("labels outside [0, classes)")

    def __len__(self):
        return len(self.labels)

    def take(self, indices) -> "LabelStore":
        return LabelStore(self.labels[np.asarray(indices)], self.num_classes)


def normalize_u8(pixels: np.ndarray) -> np.ndarray:
    """8-bit -> [-1, 1]: exactly pixel/127.5 - 1."""
    return (pixels.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize_u8(values: np.ndarray) -> np.ndarray:
    return np.rint((np.clip(values, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# idx binary format: magic (0x00 0x00 dtype ndims), big-endian uint32 dims,
# then row-major payload bytes
# ---------------------------------------------------------------------------

def read_idx(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if len(magic) != 4 or magic[0] != 0 or magic[1] != 0:
                raise DataFormatError(f"{path}: bad idx magic {magic!r}")
            dtype_code, ndims = magic[2], magic[3]
            if dtype_code != IDX_UBYTE:
                raise DataFormatError(
                    f"{path}: unsupported idx dtype 0x{dtype_code:02x}")
            dims = struct.unpack(f">{ndims}I", fh.read(4 * ndims))
            count = int(np.prod(dims)) if dims else 0
            payload = fh.read(count)
            if len(payload) != count:
                raise DataFormatError(
                    f"{path}: truncated idx payload ({len(payload)} of "
                    f"{count} bytes)")
            return np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    except FileNotFoundError:
        raise DataFormatError(f"idx file not found: {path}") from None


def write_idx(path: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, IDX_UBYTE, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _load_idx_dataset(spec: DatasetSpec):
    images = read_idx(os.path.join(spec.root, "images.idx"))
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim == 4:
        images = images.transpose(0, 3, 1, 2)
    else:
        raise DataFormatError(f"idx images must be 3-D or 4-D, got "
                              f"{images.ndim}-D")
    collection = ImageCollection(normalize_u8(images))
    labels = None
    label_path = os.path.join(spec.root, "labels.idx")
    if spec.with_labels:
        raw = read_idx(label_path)
        if raw.ndim != 1 or len(raw) != len(collection):
            raise DataFormatError(f"{label_path}: labels do not align with "
                                  f"images ({raw.shape} vs {len(collection)})")
        labels = LabelStore(raw)
    return collection, labels


def _load_image_dir(spec: DatasetSpec):
    from PIL import Image

    manifest = os.path.join(spec.root, "manifest.txt")
    try:
        with open(manifest, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    except FileNotFoundError:
        raise DataFormatError(f"manifest not found: {manifest}") from None
    entries = []
    for ln in lines:
        parts = ln.split("\t")
        if len(parts) not in (1, 2):
            raise DataFormatError(f"{manifest}: malformed line {ln!r}")
        entries.append((parts[0], int(parts[1]) if len(parts) == 2 else None))
    entries.sort(key=lambda e: e[0])   # lexicographic canonical order

    images, labels, keys = [], [], []
    for rel, label in entries:
        path = os.path.join(spec.root, rel)
        try:
            with Image.open(path) as im:
                im = im.convert("L" if spec.channels == 1 else "RGB")
                arr = np.asarray(im, dtype=np.uint8)
        except (OSError, FileNotFoundError) as exc:
            raise DataFormatError(f"cannot decode image record {rel!r}: {exc}") \
                from None
        if arr.shape[:2] != (spec.image_size, spec.image_size):
            raise DataFormatError(
                f"image record {rel!r} has size {arr.shape[:2]}, expected "
                f"{(spec.image_size, spec.image_size)}")
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        images.append(normalize_u8(arr))
        keys.append(rel)
        labels.append(label)
    collection = ImageCollection(np.stack(images), keys=keys)
    store = None
    if spec.with_labels:
        if any(l is None for l in labels):
            raise DataFormatError(f"{manifest}: labels requested but some "
                                  f"records carry none")
        store = LabelStore(np.array(labels))
    return collection, store


def load_dataset(spec: DatasetSpec):
    """-> (ImageCollection, LabelStore | None). Deterministic order: record
    index for idx, lexicographic relative path for image directories."""
    if spec.format == "idx":
        collection, labels = _load_idx_dataset(spec)
    else:
        collection, labels = _load_image_dir(spec)
    shape = collection.shape
    if shape != (spec.channels, spec.image_size, spec.image_size):
        raise DataFormatError(f"dataset decodes to {shape}, spec declares "
                              f"{(spec.channels, spec.image_size, spec.image_size)}")
    return collection, labels


def export_image_dir(collection: ImageCollection, root: str,
                     labels: LabelStore | None = None) -> None:
    """Write the collection as PNGs plus a manifest (round-trip support)."""
    from PIL import Image

    os.makedirs(root, exist_ok=True)
    lines = []
    width = len(str(len(collection) - 1))
    for i, img in enumerate(collection.images):
        rel = f"img_{i:0{width}d}.png"
        arr = denormalize_u8(img)
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        Image.fromarray(arr).save(os.path.join(root, rel))
        if labels is not None:
            lines.append(f"{rel}\t{labels.labels[i]}")
        else:
            lines.append(rel)
    with open(os.path.join(root, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# fractional subsampling
# ---------------------------------------------------------------------------

def subsample_indices(n: int, split: SplitSpec) -> np.ndarray:
    """First ceil(f*n) entries of a seed-keyed permutation; smaller
    fractions are prefixes of larger ones under the same seed."""
    k = int(np.ceil(split.fraction * n))
    if split.fraction == 1.0:
        return np.arange(n)
    perm = np.random.Generator(np.random.PCG64(split.seed)).permutation(n)
    return perm[:k]


def subsample(collection: ImageCollection, split: SplitSpec):
    """-> (sub-collection, chosen indices). Indices slice a LabelStore
    consistently when evaluation needs the same subset."""
    idx = subsample_indices(len(collection), split)
    sub = ImageCollection(collection.images[idx],
                          keys=[collection.keys[i] for i in idx])
    return sub, idx
