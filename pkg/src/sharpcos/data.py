"""CIFAR-10 binary ingestion, subsetting, augmentation and synthetic signals."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

RECORD_BYTES = 1 + 3 * 32 * 32
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# fixed 8-sample feature for the 1-D detector demo
TEMPLATE_1D = np.array([0.5, 1.5, 3.0, 1.0, -1.0, -2.5, -1.0, 0.5])
SIGNAL_LENGTH = 64


@dataclass
class Dataset:
    images: np.ndarray          # (N, 3, 32, 32), values in [0, 1]
    labels: np.ndarray          # (N,), ints in [0, 9]
    split: str = "train"
    subset: dict = field(default_factory=dict)
    checksum: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataFormatError("labels outside [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def take(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.split,
                       dict(self.subset), self.checksum)


def parse_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode binary CIFAR-10 records into uint8 images and labels."""
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES * RECORD_BYTES
        raise DataFormatError(
            f"{source}: truncated record at byte offset {whole} "
            f"(file length {len(raw)} is not a multiple of {RECORD_BYTES})")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DataFormatError(
            f"{source}: label {labels[bad[0]]} > 9 at byte offset {bad[0] * RECORD_BYTES}")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def read_cifar_file(path: str | Path, split: str = "train") -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"missing file {path}") from None
    pixels, labels = parse_records(raw, str(path))
    return Dataset(pixels.astype(np.float64) / 255.0, labels, split,
                   checksum=hashlib.sha256(raw).hexdigest())


def _resolve_dir(directory: str | Path) -> Path:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    if not d.is_dir():
        raise DataFormatError(f"data directory {directory} does not exist")
    return d


def load_cifar10(directory: str | Path) -> tuple[Dataset, Dataset]:
    """Load the binary-version archive from ``directory``.

    The test batch and at least one training batch must be present; missing
    training batches are tolerated so partial archives can be used.
    """
    d = _resolve_dir(directory)
    present = [d / f for f in TRAIN_FILES if (d / f).exists()]
    if not present:
        raise DataFormatError(f"no data_batch_*.bin files in {d}")
    parts = [read_cifar_file(p) for p in present]
    sha = hashlib.sha256("".join(p.checksum for p in parts).encode()).hexdigest()
    train = Dataset(np.concatenate([p.images for p in parts]),
                    np.concatenate([p.labels for p in parts]), "train", checksum=sha)
    test = read_cifar_file(d / TEST_FILE, "test")
    if len(present) == len(TRAIN_FILES) and len(train) == 50_000 \
            and not np.all(train.class_counts == 5_000):
        raise DataFormatError(f"full training archive has non-uniform classes {train.class_counts}")
    return train, test


def to_records(ds: Dataset) -> bytes:
    """Serialise back to the binary record format (pixels rounded to bytes)."""
    pixels = np.rint(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(ds), -1)
    recs = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return recs.tobytes()


def write_cifar_file(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(to_records(ds))


def subset(ds: Dataset, n: int, stratified: bool = True, seed: int = 0) -> Dataset:
    """Draw ``n`` items reproducibly.

    Stratified draws take ``n // 10`` per class, spreading the remainder over
    the lowest class ids. Within a class, members are ranked by a hash of
    their pixels before the seeded permutation, so the chosen items do not
    depend on the order of the input.
    """
    if n > len(ds) or n < 0:
        raise ValueError(f"cannot draw {n} items from {len(ds)}")
    rng = np.random.default_rng(seed)
    if n == len(ds):
        idx = np.arange(len(ds))
    elif stratified:
        counts = ds.class_counts
        quota = np.full(NUM_CLASSES, n // NUM_CLASSES)
        quota[: n % NUM_CLASSES] += 1
        if np.any(quota > counts):
            raise ValueError(f"class counts {counts} too small for stratified n={n}")
        chosen = []
        for c in range(NUM_CLASSES):
            members = np.flatnonzero(ds.labels == c)
            members = members[np.argsort(_content_keys(ds.images[members]), kind="stable")]
            chosen.append(members[rng.permutation(len(members))[: quota[c]]])
        idx = np.sort(np.concatenate(chosen))
    else:
        idx = np.sort(rng.permutation(len(ds))[:n])
    out = ds.take(idx)
    out.subset = {"count": n, "stratified": stratified, "seed": seed, "indices": idx}
    return out


def _content_keys(images: np.ndarray) -> np.ndarray:
    return np.array([hashlib.blake2b(img.tobytes(), digest_size=8).hexdigest() for img in images])


@dataclass
class AugmentationConfig:
    enabled: bool = True
    crop_pad: int = 4
    flip_prob: float = 0.5


def augment(batch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
            offsets: np.ndarray | None = None, flips: np.ndarray | None = None) -> np.ndarray:
    """Random crop from a zero-padded image, then random horizontal flip.

    ``offsets`` (N, 2) and ``flips`` (N,) override the random draws.
    """
    if not cfg.enabled:
        return batch
    n, _, h, w = batch.shape
    pad = cfg.crop_pad
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < cfg.flip_prob
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    for i, (dy, dx) in enumerate(offsets):
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def standardize(images: np.ndarray, mean=None, std=None):
    """Per-channel standardisation; returns the array and the statistics used."""
    if mean is None:
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
    return (images - mean[None, :, None, None]) / std[None, :, None, None], mean, std


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches in a (optionally shuffled) fixed order."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def synth_1d_signal(kind: str = "feature_present", sigma: float = 0.0, seed: int = 0,
                    template: np.ndarray = TEMPLATE_1D, length: int = SIGNAL_LENGTH,
                    amplitude: float = 1.0):
    """A length-64 zero signal, optionally with the template embedded, plus noise.

    Returns ``(signal, mask, offset)``; ``mask`` marks the template samples and
    ``offset`` is ``None`` when the feature is absent.
    """
    if kind not in ("feature_present", "feature_absent"):
        raise ValueError(f"unknown signal kind {kind!r}")
    rng = np.random.default_rng(seed)
    k = len(template)
    offset = int(rng.integers(0, length - k + 1))
    signal = np.zeros(length)
    mask = np.zeros(length, dtype=bool)
    if kind == "feature_present":
        signal[offset:offset + k] = amplitude * template
        mask[offset:offset + k] = True
    else:
        offset = None
    if sigma > 0:
        signal = signal + rng.normal(0.0, sigma, size=length)
    return signal, mask, offset
