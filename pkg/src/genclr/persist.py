"""Checkpoint files, the line-delimited metrics log, and PNG grid export.

Checkpoint layout: magic, little-endian uint64 header length, JSON manifest
(format version, step, mode, config hash, RNG states, per-tensor
name/shape/dtype/offset), then the raw little-endian tensor payload.
Loading reproduces every tensor bit-exactly and every RNG stream resumes
with identical draws.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

MAGIC = b"GCLRCKPT1\n"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class LossReport:
    step: int
    epoch: int
    loss_ppcl: float
    loss_gan_g: float
    loss_gan_d: float
    lr: float
    seconds: float

    def validate(self):
        vals = (self.loss_ppcl, self.loss_gan_g, self.loss_gan_d,
                self.lr, self.seconds)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite loss report at step {self.step}: {vals}")

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "epoch": self.epoch,
            "loss_ppcl": self.loss_ppcl, "loss_gan_g": self.loss_gan_g,
            "loss_gan_d": self.loss_gan_d, "lr": self.lr,
            "seconds": self.seconds})


class MetricsLog:
    """Append-only JSONL sink; one self-describing record per line."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")
        else:
            self._fh = None

    def append(self, record):
        if isinstance(record, LossReport):
            record.validate()
            line = record.to_json()
            self.records.append(json.loads(line))
        else:
            line = json.dumps(record)
            self.records.append(dict(record))
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def read_metrics(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# RNG state (de)serialization
# ---------------------------------------------------------------------------

def rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))  # plain ints/strings only


def rng_from_json(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, tensors: dict[str, np.ndarray],
                    meta: dict) -> None:
    """Write manifest + raw payload. `meta` must be JSON-serializable."""
    entries = []
    offset = 0
    payload = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.float32:
            dtype = "<f4"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name}")
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    header = json.dumps(manifest).encode("utf-8")
    tmp = path + ".tmp"
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for raw in payload:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"checkpoint write failed: {path}: {exc}") from exc


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            hlen = int.from_bytes(fh.read(8), "little")
            manifest = json.loads(fh.read(hlen).decode("utf-8"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported format version "
                    f"{manifest.get('format_version')}")
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    tensors = {}
    for entry in manifest.pop("tensors"):
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest


def checkpoint_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# image grid export
# ---------------------------------------------------------------------------

def to_uint8(images: np.ndarray) -> np.ndarray:
    """[-1, 1] float pixels -> 8-bit, (v+1)*127.5 rounded to nearest."""
    scaled = np.rint((np.clip(images, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8)


def save_image_grid(path: str, rows: list[list[np.ndarray]],
                    pad: int = 2) -> None:
    """Write a grid PNG; rows of (C, H, W) float images in [-1, 1]."""
    from PIL import Image

    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    c, h, w = rows[0][0].shape
    canvas = np.zeros((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad,
                       3 if c == 3 else 1), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            tile = to_uint8(img).transpose(1, 2, 0)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = tile
    if canvas.shape[-1] == 1:
        canvas = canvas[..., 0]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(canvas).save(path)
