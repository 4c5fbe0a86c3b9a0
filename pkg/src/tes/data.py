"""Datasets and lossy image compression.

Covers IDX container parsing (MNIST layout), a procedural synthetic fallback
with the same 28x28/10-class shape, device partitioning (i.i.d. and
label-shard non-i.i.d.), and the downsample+quantize compression ladder whose
per-level accuracy is measured on a validation split.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import CalibrationError, FormatError
from .simcore import derive_stream

SIDE = 28
N_CLASSES = 10
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (n, 28, 28), values in [0, 1]
    labels: np.ndarray  # (n,), values in 0..9
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.images.ndim != 3 or self.images.shape[1:] != (SIDE, SIDE):
            raise ValueError(f"images must be (n, {SIDE}, {SIDE}), got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ValueError("images and labels must have equal non-zero length")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= N_CLASSES:
            raise ValueError(f"labels must lie in 0..{N_CLASSES - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


@dataclass
class Partition:
    assignment: dict[int, np.ndarray]  # device index -> sorted sample indices
    mode: str

    def device_indices(self, device: int) -> np.ndarray:
        return self.assignment[device]


@dataclass(frozen=True)
class CompressionLevel:
    level_id: int
    width: int
    height: int
    bit_depth: int
    accuracy: float | None = None

    @property
    def payload_bits(self) -> int:
        return self.width * self.height * self.bit_depth

    @property
    def lossless(self) -> bool:
        return self.width == SIDE and self.height == SIDE and self.bit_depth == 8


def default_ladder() -> list[CompressionLevel]:
    """Five levels from lossless 28x28x8 down to 7x7x4."""
    dims = [(28, 28, 8), (20, 20, 8), (14, 14, 8), (10, 10, 6), (7, 7, 4)]
    return [CompressionLevel(i, w, h, b) for i, (w, h, b) in enumerate(dims)]


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":  # gzip-compressed variant
        raw = gzip.decompress(raw)
    return raw


def _parse_idx_images(raw: bytes, path) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IDX image header", offset=len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: expected image magic {IMAGE_MAGIC:#010x}, got {magic:#010x}", offset=0)
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}", offset=min(len(raw), expected))
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols).astype(float) / 255.0


def _parse_idx_labels(raw: bytes, path) -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX label header", offset=len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise FormatError(f"{path}: expected label magic {LABEL_MAGIC:#010x}, got {magic:#010x}", offset=0)
    if len(raw) != 8 + count:
        raise FormatError(f"{path}: expected {8 + count} bytes, got {len(raw)}", offset=min(len(raw), 8 + count))
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(int)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Load an MNIST-style IDX image/label pair (gzip accepted transparently)."""
    images = _parse_idx_images(_read_bytes(images_path), images_path)
    labels = _parse_idx_labels(_read_bytes(labels_path), labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels", offset=4
        )
    if images.shape[1:] != (SIDE, SIDE):
        raise FormatError(f"expected {SIDE}x{SIDE} images, got {images.shape[1]}x{images.shape[2]}", offset=8)
    return Dataset(images, labels, split)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Re-serialise a Dataset to the IDX pair format (big-endian headers)."""
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, len(ds), SIDE, SIDE))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic fallback
# ---------------------------------------------------------------------------

# Ten classes built as five coarsely distinct blob layouts, each split into a
# pair of variants that differ only by a small displacement of one blob. The
# displacement is below the box size of the deeper compression levels, so the
# pairs stay separable at full resolution but alias together when the images
# are box-averaged, which is what gives the ladder its accuracy gradient.
_BASE_BLOBS = [
    [(7.0, 7.0), (7.0, 21.0)],
    [(21.0, 7.0), (21.0, 21.0)],
    [(7.0, 7.0), (21.0, 21.0)],
    [(7.0, 21.0), (21.0, 7.0)],
    [(14.0, 7.0), (14.0, 21.0), (7.0, 14.0)],
]
_PAIR_OFFSETS = [(0.0, 1.5), (0.0, 2.0), (2.5, 0.0), (0.0, 3.0), (3.5, 0.0)]
_BLOB_SIGMA = 0.9
_NOISE_SIGMA = 0.08
_MAX_SHIFT = 2


def _class_templates() -> np.ndarray:
    yy, xx = np.mgrid[0:SIDE, 0:SIDE]
    templates = np.zeros((N_CLASSES, SIDE, SIDE))
    for base, (blobs, (dy, dx)) in enumerate(zip(_BASE_BLOBS, _PAIR_OFFSETS)):
        for variant in (0, 1):
            canvas = np.zeros((SIDE, SIDE))
            for j, (cy, cx) in enumerate(blobs):
                if variant and j == 0:
                    cy, cx = cy + dy, cx + dx
                canvas += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * _BLOB_SIGMA**2))
            templates[2 * base + variant] = canvas / canvas.max()
    return templates


def _shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer shift with zero fill (no wrap-around)."""
    out = np.zeros_like(img)
    src_y = slice(max(0, -dy), SIDE - max(0, dy))
    src_x = slice(max(0, -dx), SIDE - max(0, dx))
    dst_y = slice(max(0, dy), SIDE - max(0, -dy))
    dst_x = slice(max(0, dx), SIDE - max(0, -dx))
    out[dst_y, dst_x] = img[src_y, src_x]
    return out


def synth_dataset(n: int, seed: int, split: str = "train") -> Dataset:
    """Procedural 10-class stand-in for MNIST-shaped data.

    Each class is a fixed blob pattern, jittered by a random integer shift,
    scaled by a random amplitude and buried in Gaussian noise. Balanced
    labels, fully deterministic in the seed.
    """
    if n < 10:
        raise ValueError(f"need n >= 10, got {n}")
    templates = _class_templates()
    label_rng = derive_stream(seed, ("synth", 0, "labels"))
    jitter_rng = derive_stream(seed, ("synth", 0, "jitter"))
    noise_rng = derive_stream(seed, ("synth", 0, "noise"))

    labels = np.tile(np.arange(N_CLASSES), n // N_CLASSES + 1)[:n]
    labels = labels[label_rng.generator.permutation(n)]
    shifts = jitter_rng.generator.integers(-_MAX_SHIFT, _MAX_SHIFT + 1, size=(n, 2))
    amps = jitter_rng.generator.uniform(0.7, 1.0, size=n)
    noise = noise_rng.generator.normal(0.0, _NOISE_SIGMA, size=(n, SIDE, SIDE))

    images = np.empty((n, SIDE, SIDE))
    for i in range(n):
        base = _shift_image(templates[labels[i]], int(shifts[i, 0]), int(shifts[i, 1]))
        images[i] = np.clip(amps[i] * base + noise[i], 0.0, 1.0)
    return Dataset(images, labels, split)


# ---------------------------------------------------------------------------
# Device partitioning
# ---------------------------------------------------------------------------

_SHARD_MODES = {"iid": None, "shards1": 1, "shards2": 2}


def partition(ds: Dataset, n_devices: int, mode: str, seed: int) -> Partition:
    """Split sample indices across devices.

    iid: a uniform random equal-size disjoint split (remainder dropped).
    shards1/shards2: single-label shards dealt k per device, so every device
    sees at most k distinct digits. Shard cuts never straddle a label
    boundary; per-label leftovers are dropped, not redistributed.
    """
    if n_devices < 1:
        raise ValueError(f"need at least one device, got {n_devices}")
    if mode not in _SHARD_MODES:
        raise ValueError(f"mode must be one of {sorted(_SHARD_MODES)}, got {mode!r}")
    rng = derive_stream(seed, ("partition", n_devices, mode))
    n = len(ds)
    k = _SHARD_MODES[mode]

    if k is None:
        per_device = n // n_devices
        if per_device == 0:
            raise ValueError(f"{n} samples cannot cover {n_devices} devices")
        perm = rng.generator.permutation(n)
        assignment = {
            d: np.sort(perm[d * per_device : (d + 1) * per_device]) for d in range(n_devices)
        }
        return Partition(assignment, mode)

    total_shards = n_devices * k
    if total_shards > n:
        raise ValueError(f"{n_devices} devices x {k} shards exceed the {n} available samples")
    counts = np.bincount(ds.labels, minlength=N_CLASSES)
    quotas = _largest_remainder_quotas(counts, total_shards)
    if np.any(quotas > counts):
        raise ValueError("label distribution too skewed to cut the requested shards")

    shards: list[np.ndarray] = []
    for label in range(N_CLASSES):
        if quotas[label] == 0:
            continue
        members = np.flatnonzero(ds.labels == label)
        size = len(members) // quotas[label]
        usable = members[: size * quotas[label]]
        shards.extend(np.split(usable, quotas[label]))
    order = rng.generator.permutation(len(shards))
    assignment = {
        d: np.sort(np.concatenate([shards[order[d * k + j]] for j in range(k)]))
        for d in range(n_devices)
    }
    return Partition(assignment, mode)


def _largest_remainder_quotas(counts: np.ndarray, total: int) -> np.ndarray:
    """Apportion `total` shards across labels proportionally to their counts."""
    exact = counts * total / counts.sum()
    quotas = np.floor(exact).astype(int)
    remainder = total - quotas.sum()
    order = np.argsort(-(exact - quotas), kind="stable")
    quotas[order[:remainder]] += 1
    return quotas


# ---------------------------------------------------------------------------
# Lossy compression
# ---------------------------------------------------------------------------

def _pixel_groups(width: int) -> np.ndarray:
    """Source-pixel -> target-cell map for one axis.

    Cell boundaries snap to pixel boundaries (the nearest-neighbour preimage
    partition), which makes downsample-then-upsample a projection and the
    whole transform idempotent.
    """
    return np.floor(np.arange(SIDE) * width / SIDE).astype(int)


def compress_image(img: np.ndarray, level: CompressionLevel) -> np.ndarray:
    """Box-average downsample, quantize, and upsample back to 28x28."""
    return compress_batch(np.asarray(img, dtype=float)[None, :, :], level)[0]


def compress_batch(images: np.ndarray, level: CompressionLevel) -> np.ndarray:
    """Vectorised compress_image over a stack of images."""
    images = np.asarray(images, dtype=float)
    if level.lossless:
        return images.copy()
    row_map = _pixel_groups(level.height)
    col_map = _pixel_groups(level.width)
    row_starts = np.searchsorted(row_map, np.arange(level.height))
    col_starts = np.searchsorted(col_map, np.arange(level.width))
    row_counts = np.bincount(row_map, minlength=level.height).astype(float)
    col_counts = np.bincount(col_map, minlength=level.width).astype(float)

    small = np.add.reduceat(images, row_starts, axis=1) / row_counts[None, :, None]
    small = np.add.reduceat(small, col_starts, axis=2) / col_counts[None, None, :]

    levels = (1 << level.bit_depth) - 1
    small = np.round(small * levels) / levels
    return small[:, row_map][:, :, col_map]


def build_accuracy_table(
    model,
    validation: Dataset,
    ladder: list[CompressionLevel],
    *,
    monotonicity_slack: float = 0.02,
) -> list[CompressionLevel]:
    """Measure per-level classification accuracy on the validation split.

    Returns a new ladder with `accuracy` filled in. Fails if the model is no
    better than a coin flip at the lossless level, or if accuracy increases
    with compression by more than the allowed statistical slack.
    """
    labels = validation.labels
    table: list[CompressionLevel] = []
    for level in ladder:
        preds = nn.predict(model, compress_batch(validation.images, level))
        table.append(replace(level, accuracy=float(np.mean(preds == labels))))
    if table[0].accuracy < 0.5:
        raise CalibrationError(
            f"model looks untrained: lossless accuracy {table[0].accuracy:.3f} < 0.5"
        )
    for prev, cur in zip(table, table[1:]):
        if cur.accuracy > prev.accuracy + monotonicity_slack:
            raise CalibrationError(
                f"accuracy rose from {prev.accuracy:.4f} (level {prev.level_id}) "
                f"to {cur.accuracy:.4f} (level {cur.level_id})"
            )
    return table


_TABLE_FIELDS = ["level_id", "width", "height", "bit_depth", "payload_bits", "accuracy"]


def save_accuracy_table(path, ladder: list[CompressionLevel]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_FIELDS)
        for level in ladder:
            writer.writerow(
                [level.level_id, level.width, level.height, level.bit_depth,
                 level.payload_bits, "" if level.accuracy is None else repr(level.accuracy)]
            )


def load_accuracy_table(path) -> list[CompressionLevel]:
    ladder: list[CompressionLevel] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            level = CompressionLevel(
                level_id=int(row["level_id"]),
                width=int(row["width"]),
                height=int(row["height"]),
                bit_depth=int(row["bit_depth"]),
                accuracy=float(row["accuracy"]) if row["accuracy"] else None,
            )
            if level.payload_bits != int(row["payload_bits"]):
                raise FormatError(f"payload_bits mismatch for level {level.level_id}")
            ladder.append(level)
    return ladder
