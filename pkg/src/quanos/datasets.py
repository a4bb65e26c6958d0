"""Dataset ingestion: IDX and CIFAR binary codecs, subsampling, synthesis.

Decoding is byte-exact against the published binary layouts; the codecs
are symmetric so decode -> encode round-trips to identical bytes. Images
are scaled to [0, 1] by default (no mean/std shift) so that attack
clipping against the valid input domain is exact.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    """Binary payload does not match the declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Dataset:
    """Decoded, normalized image-classification split."""

    images: np.ndarray  # (S, C, H, W) float32 in the declared input domain
    labels: np.ndarray  # (S,) int64 class indices
    split: str
    num_classes: int
    normalization: dict = field(default_factory=lambda: {"scale": 255.0, "mean": None, "std": None})

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    def __len__(self):
        return len(self.images)

    def raw_pixels(self) -> np.ndarray:
        """Undo normalization back to the original uint8 pixel values."""
        x = self.images
        if self.normalization.get("std") is not None:
            std = np.asarray(self.normalization["std"], dtype=np.float64)[None, :, None, None]
            mean = np.asarray(self.normalization["mean"], dtype=np.float64)[None, :, None, None]
            x = x * std + mean
        return np.rint(x * self.normalization["scale"]).astype(np.uint8)

    def standardized(self) -> "Dataset":
        """Per-channel (x - mean) / std view, recording the statistics used."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        std = np.where(std == 0, 1.0, std)
        images = (self.images - mean[None, :, None, None]) / std[None, :, None, None]
        record = dict(self.normalization, mean=mean.tolist(), std=std.tolist())
        return Dataset(images.astype(np.float32), self.labels, self.split, self.num_classes, record)


# -- IDX codec -------------------------------------------------------------------


def decode_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX payload (optionally gzipped) into a uint8 array."""
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise FormatError("IDX header truncated", offset=len(raw))
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise FormatError(f"bad IDX magic {raw[:4].hex()}", offset=0)
    if dtype != IDX_UBYTE:
        raise FormatError(f"unsupported IDX element type 0x{dtype:02x}", offset=2)
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError("IDX dimension table truncated", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = header_len + int(np.prod(dims)) if ndim else header_len
    if len(raw) != expected:
        raise FormatError(
            f"IDX payload length {len(raw)} != expected {expected} for dims {dims}",
            offset=min(len(raw), expected),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def encode_idx(a: np.ndarray) -> bytes:
    if a.dtype != np.uint8:
        raise ValueError("IDX encoder expects uint8 data")
    header = struct.pack(">BBBB", 0, 0, IDX_UBYTE, a.ndim)
    header += struct.pack(f">{a.ndim}I", *a.shape)
    return header + a.tobytes()


def read_idx(path) -> np.ndarray:
    return decode_idx(Path(path).read_bytes())


def write_idx(a: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_idx(a))


# -- CIFAR binary codec -----------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


def decode_cifar(raw: bytes, label_bytes: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR binary records into (labels, images uint8 (S,3,32,32)).

    label_bytes=1 matches CIFAR-10; CIFAR-100 records carry a coarse and a
    fine label (label_bytes=2, the fine label is kept).
    """
    rec = 3072 + label_bytes
    if len(raw) == 0 or len(raw) % rec != 0:
        raise FormatError(
            f"CIFAR payload length {len(raw)} is not a multiple of the {rec}-byte record",
            offset=(len(raw) // rec) * rec,
        )
    flat = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = flat[:, label_bytes - 1].astype(np.int64)
    images = flat[:, label_bytes:].reshape(-1, 3, 32, 32)
    return labels, images


def encode_cifar(labels: np.ndarray, images: np.ndarray, coarse_labels: np.ndarray | None = None) -> bytes:
    if images.dtype != np.uint8:
        raise ValueError("CIFAR encoder expects uint8 images")
    n = len(labels)
    planes = images.reshape(n, 3072)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None], planes]
    if coarse_labels is not None:
        cols.insert(0, np.asarray(coarse_labels, dtype=np.uint8)[:, None])
    return np.hstack(cols).tobytes()


# -- loading ----------------------------------------------------------------------


def load_dataset(path, format: str, split: str = "train") -> Dataset:
    """Load a dataset directory in the given binary format.

    format 'idx' expects the canonical MNIST file names (optionally .gz);
    'cifar-binary' expects data_batch_*.bin / test_batch.bin (CIFAR-10
    record layout). Pixels come out scaled to [0, 1].
    """
    root = Path(path)
    if format == "idx":
        img_name, lbl_name = _MNIST_FILES[split]
        images = read_idx(_find(root, img_name))
        labels = read_idx(_find(root, lbl_name))
        if images.ndim != 3:
            raise FormatError(f"expected 3-d IDX image file, got {images.ndim} dims")
        if len(images) != len(labels):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
        images = images[:, None, :, :]  # (S, 1, H, W)
        num_classes = int(labels.max()) + 1 if labels.size else 0
    elif format == "cifar-binary":
        names = sorted(root.glob("data_batch_*.bin")) if split == "train" else [root / "test_batch.bin"]
        if not names or not all(p.exists() for p in names):
            raise FileNotFoundError(f"no CIFAR {split} batches under {root}")
        parts = [decode_cifar(p.read_bytes()) for p in names]
        labels = np.concatenate([lab for lab, _ in parts])
        images = np.concatenate([img for _, img in parts])
        num_classes = 10
    else:
        raise ValueError(f"unknown dataset format {format!r}")

    return Dataset(
        images=(images.astype(np.float32) / 255.0),
        labels=labels.astype(np.int64),
        split=split,
        num_classes=max(num_classes, 10),
    )


def _find(root: Path, name: str) -> Path:
    for candidate in (root / name, root / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found under {root}")


def sample_subset(d: Dataset, n: int, seed: int) -> Dataset:
    """Draw n items without replacement, deterministically for a fixed seed."""
    if n > len(d):
        raise ValueError(f"requested {n} samples from a {len(d)}-item dataset")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(d), size=n, replace=False)
    return Dataset(d.images[idx], d.labels[idx], d.split, d.num_classes, dict(d.normalization))


def batches(d: Dataset, batch_size: int, seed: int | None = None):
    """Yield (images, labels) batches; shuffled when a seed is given."""
    order = np.arange(len(d))
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(d), batch_size):
        sel = order[start : start + batch_size]
        yield d.images[sel], d.labels[sel]


# -- synthetic desk-scale data ------------------------------------------------------


def synthesize_idx_dataset(
    out_dir,
    n_train: int = 2000,
    n_test: int = 500,
    image_size: int = 28,
    num_classes: int = 10,
    seed: int = 0,
    contrast: float = 0.32,
    noise: float = 0.30,
) -> Path:
    """Write a synthetic MNIST-format dataset for offline desk-scale runs.

    Each class is a fixed high-contrast binary prototype pattern (smoothed
    noise thresholded at its median); samples add smoothed noise. The
    per-pixel class margin is much larger than typical attack budgets, so
    trained models keep a meaningful adversarial accuracy to measure.
    """
    rng = np.random.default_rng(seed)
    base = _smooth(rng.uniform(0.0, 1.0, size=(num_classes, image_size, image_size)), passes=3)
    median = np.median(base, axis=(1, 2), keepdims=True)
    protos = 0.5 + contrast * np.sign(base - median)

    def make(n):
        labels = rng.integers(0, num_classes, size=n)
        jitter = _smooth(rng.uniform(-1.0, 1.0, size=(n, image_size, image_size))) * noise
        images = np.clip(protos[labels] + jitter, 0.0, 1.0)
        return np.rint(images * 255).astype(np.uint8), labels.astype(np.uint8)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        images, labels = make(n)
        img_name, lbl_name = _MNIST_FILES[split]
        write_idx(images, out / img_name)
        write_idx(labels, out / lbl_name)
    return out


def _smooth(a: np.ndarray, passes: int = 2) -> np.ndarray:
    """Cheap separable 3-tap box blur over the trailing two axes."""
    for _ in range(passes):
        for axis in (-2, -1):
            a = (np.roll(a, 1, axis) + a + np.roll(a, -1, axis)) / 3.0
    return a
