"""Datasets (MNIST IDX files, synthetic point clouds) and URBC checkpoints."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .models import ModelSpec, check_params

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

CHECKPOINT_MAGIC = b"URBC"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 4:
            raise ValueError(f"inputs must be (N, C, H, W), got {inputs.shape}")
        if len(inputs) != len(labels) or labels.ndim != 1:
            raise ValueError(f"{len(inputs)} inputs but labels of shape {labels.shape}")
        if inputs.size and (inputs.min() < 0 or inputs.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.inputs[:n], self.labels[:n], self.split)


# IDX ------------------------------------------------------------------------


def _read_idx(path, magic: int, header_ints: int) -> Tuple[tuple, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 * (1 + header_ints):
        raise FormatError(f"{path}: truncated IDX header")
    found, *dims = struct.unpack(">" + "I" * (1 + header_ints), raw[: 4 * (1 + header_ints)])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic {found:#010x}, expected {magic:#010x}")
    payload = raw[4 * (1 + header_ints):]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return tuple(dims), payload[:expected]


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an MNIST-style image/label IDX pair; pixels are divided by 255."""
    (n, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (m,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise FormatError(f"{n} images but {m} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# synthetic data -------------------------------------------------------------


def _as_images(points: np.ndarray) -> np.ndarray:
    return points.reshape(len(points), 1, 1, points.shape[1])


def synth_blobs(n: int, classes: int = 2, margin: float = 0.05, noise: float = 0.15, seed: int = 0,
                split: str = "train") -> Dataset:
    """Two-feature data with a narrow separable feature and a wide noisy one.

    Along the first coordinate each class occupies its own band of width
    ``margin``, with gaps of ``margin`` between bands, so the classes are
    linearly separable at that margin but only by a direction that small
    perturbations can cross.  Along the second coordinate class ``k`` is
    centred at ``(k + 0.5) / classes`` with Gaussian spread ``noise``: a
    coarse, robust but imperfect feature.  Points are clipped to [0, 1].
    """
    if n < classes or classes < 2:
        raise ValueError("need at least two classes and n >= classes")
    if margin <= 0:
        raise ValueError("margin must be positive")
    span = (2 * classes - 1) * margin
    if span > 1:
        raise ValueError(f"{classes} bands of width {margin} do not fit in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    lo = 0.5 - span / 2 + 2 * margin * labels
    first = lo + margin * rng.random(n)
    second = np.clip((labels + 0.5) / classes + noise * rng.standard_normal(n), 0.0, 1.0)
    return Dataset(_as_images(np.stack([first, second], axis=1)), labels, split)


def synth_rings(n: int, seed: int = 0, split: str = "train") -> Dataset:
    """Two concentric rings around the centre of the unit square."""
    if n < 2:
        raise ValueError("need at least two points")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    radius = np.where(labels == 0, 0.15, 0.35) + 0.03 * rng.standard_normal(n)
    angle = rng.uniform(0, 2 * np.pi, n)
    pts = 0.5 + radius[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return Dataset(_as_images(np.clip(pts, 0.0, 1.0)), labels, split)


# checkpoints ----------------------------------------------------------------


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(params, spec) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(_pack_str(spec.to_descriptor()))
    out.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")
        out.write(_pack_str(name))
        out.write(struct.pack("<I", value.ndim))
        out.write(struct.pack("<" + "I" * value.ndim, *value.shape))
        out.write(np.ascontiguousarray(value).tobytes())
    return out.getvalue()


def save_checkpoint(params, spec, path) -> None:
    data = checkpoint_bytes(params, spec)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint string is not UTF-8") from exc


def parse_checkpoint(raw: bytes):
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a URBC checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        spec = ModelSpec.from_descriptor(r.text())
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        ndim = r.u32()
        dims = struct.unpack("<" + "I" * ndim, r.take(4 * ndim))
        count = int(np.prod(dims))
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload")
    try:
        check_params(spec, params)
    except ValueError as exc:
        raise FormatError(f"checkpoint tensors do not match the model: {exc}") from exc
    return params, spec


def load_checkpoint(path):
    """Returns ``(params, spec)``; nothing is returned unless the whole file parses."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
