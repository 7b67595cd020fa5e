"""Multispectral patch I/O, dataset manifests, band statistics, and synthetic data.

File formats (all little-endian):

MSP image: b"MSP1", uint32 bands, uint32 height, uint32 width, then planar
float32 samples (band-major, each band row-major).

MSK mask: b"MSK1", uint32 height, uint32 width, then row-major uint8 labels
(0 = unlabeled, 1..K = class).
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

MSP_MAGIC = b"MSP1"
MSK_MAGIC = b"MSK1"
SPLITS = ("train", "val", "test")

# class table of the MARIDA archive, index order = label 1..15
MARIDA_CLASSES = [
    "MD", "DenS", "Sps", "NatM", "Ship", "Cloud", "MWater", "SLWater",
    "Foam", "TWater", "SWater", "Waves", "CloudS", "Wakes", "MixWater",
]
MARIDA_PIXEL_COUNTS = dict(zip(MARIDA_CLASSES, [
    3399, 2797, 2357, 864, 5803, 117400, 129159, 372937,
    1225, 157612, 17369, 5827, 11728, 8490, 410,
]))


class PatchFormatError(ValueError):
    pass


class BadMagicError(PatchFormatError):
    pass


class TruncatedFileError(PatchFormatError):
    pass


class ExtentMismatchError(PatchFormatError):
    pass


class LabelRangeError(PatchFormatError):
    pass


@dataclass
class PatchSample:
    image: np.ndarray  # (bands, H, W) float32
    mask: np.ndarray  # (H, W) uint8
    identifier: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise ExtentMismatchError(
                f"{self.identifier}: image {self.image.shape} and mask {self.mask.shape} extents differ"
            )


# --- binary formats ----------------------------------------------------------

def _header(data: bytes, magic: bytes, n_fields: int, path) -> tuple[int, ...]:
    if data[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    end = 4 + 4 * n_fields
    if len(data) < end:
        raise TruncatedFileError(f"{path}: header truncated")
    return struct.unpack(f"<{n_fields}I", data[4:end])


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be (bands, H, W), got {image.shape}")
    with open(path, "wb") as f:
        f.write(MSP_MAGIC)
        f.write(struct.pack("<3I", *image.shape))
        f.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    bands, h, w = _header(data, MSP_MAGIC, 3, path)
    payload = data[16:]
    need = 4 * bands * h * w
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise PatchFormatError(f"{path}: {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(bands, h, w)


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise LabelRangeError("mask labels must fit in uint8")
    with open(path, "wb") as f:
        f.write(MSK_MAGIC)
        f.write(struct.pack("<2I", *mask.shape))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = _header(data, MSK_MAGIC, 2, path)
    payload = data[12:]
    if len(payload) < h * w:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, expected {h * w}")
    if len(payload) > h * w:
        raise PatchFormatError(f"{path}: {len(payload) - h * w} trailing bytes")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()
    if num_classes is not None and mask.size and mask.max() > num_classes:
        pos = tuple(int(v) for v in np.argwhere(mask > num_classes)[0])
        raise LabelRangeError(f"{path}: label {mask[pos]} at {pos} exceeds {num_classes} classes")
    return mask


def write_patch(image_path, mask_path, sample: PatchSample) -> None:
    write_image(image_path, sample.image)
    write_mask(mask_path, sample.mask)


def read_patch(image_path, mask_path, num_classes: int | None = None, identifier: str | None = None) -> PatchSample:
    image = read_image(image_path)
    mask = read_mask(mask_path, num_classes)
    return PatchSample(image, mask, identifier or Path(image_path).stem)


# --- manifest ----------------------------------------------------------------

@dataclass
class PatchEntry:
    id: str
    image: str
    mask: str
    split: str


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class Manifest:
    classes: list[str] = field(default_factory=lambda: list(MARIDA_CLASSES))
    band_count: int = 11
    patches: list[PatchEntry] = field(default_factory=list)
    stats: BandStats | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for p in self.patches:
            if p.split not in SPLITS:
                raise ValueError(f"patch {p.id}: invalid split {p.split!r}")
            for path in (p.image, p.mask):
                if path in seen:
                    raise ValueError(f"duplicate path {path!r} in manifest")
                seen.add(path)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[PatchEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [p for p in self.patches if p.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        d = {
            "classes": self.classes,
            "band_count": self.band_count,
            "patches": [
                {"id": p.id, "image": p.image, "mask": p.mask, "split": p.split} for p in self.patches
            ],
        }
        if self.stats is not None:
            d["stats"] = {"mean": [float(v) for v in self.stats.mean], "std": [float(v) for v in self.stats.std]}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        d = json.loads(path.read_text())
        stats = None
        if d.get("stats"):
            stats = BandStats(np.array(d["stats"]["mean"], dtype=np.float64), np.array(d["stats"]["std"], dtype=np.float64))
        return cls(
            classes=list(d["classes"]),
            band_count=int(d["band_count"]),
            patches=[PatchEntry(**p) for p in d["patches"]],
            stats=stats,
            root=path.parent,
        )


def load_split(manifest: Manifest, split: str) -> list[PatchSample]:
    """Read every patch of ``split`` in manifest order."""
    out = []
    for p in manifest.split(split):
        s = read_patch(manifest.resolve(p.image), manifest.resolve(p.mask), manifest.num_classes, p.id)
        if s.image.shape[0] != manifest.band_count:
            raise ExtentMismatchError(f"{p.id}: {s.image.shape[0]} bands, manifest says {manifest.band_count}")
        out.append(s)
    return out


def compute_band_stats(manifest: Manifest, split: str = "train") -> BandStats:
    """Population mean/std per band over all pixels of ``split``, in float64."""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    total = np.zeros(manifest.band_count)
    count = 0
    samples = load_split(manifest, split)
    for s in samples:
        total += s.image.astype(np.float64).sum(axis=(1, 2))
        count += s.mask.size
    mean = total / count
    sq = np.zeros(manifest.band_count)
    for s in samples:
        sq += ((s.image.astype(np.float64) - mean[:, None, None]) ** 2).sum(axis=(1, 2))
    std = np.sqrt(sq / count)
    if np.any(std == 0):
        log.warning("bands %s have zero variance in split %r", np.flatnonzero(std == 0).tolist(), split)
    return BandStats(mean, std)


def standardize(sample: PatchSample, mean, std) -> PatchSample:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"band std must be positive, got {std.tolist()}")
    img = (sample.image.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return PatchSample(img.astype(np.float32), sample.mask, sample.identifier)


def iter_batches(
    samples: list[PatchSample], batch_size: int, shuffle_seed: int | None = None, flip_seed: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    """Yield (images, masks, ids) batches in list order, or a seeded permutation.

    With ``flip_seed`` set, each sample is independently flipped horizontally
    and/or vertically with probability 1/2.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    flips = None
    if flip_seed is not None:
        flips = np.random.default_rng(flip_seed).random((len(samples), 2)) < 0.5
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images, masks = [], []
        for i in idx:
            img, msk = samples[i].image, samples[i].mask
            if flips is not None:
                if flips[i, 0]:
                    img, msk = img[:, :, ::-1], msk[:, ::-1]
                if flips[i, 1]:
                    img, msk = img[:, ::-1, :], msk[::-1, :]
            images.append(img)
            masks.append(msk)
        yield np.stack(images).astype(np.float32), np.stack(masks).astype(np.int64), [samples[i].identifier for i in idx]


def label_distribution(masks, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts and fractions of labels 1..K across ``masks`` (ignore excluded)."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        m = np.asarray(m).reshape(-1)
        counts += np.bincount(m[m > 0].astype(np.int64) - 1, minlength=num_classes)[:num_classes]
    return counts, counts / counts.sum()


# --- synthetic data ----------------------------------------------------------

def class_signatures(seed: int, num_classes: int, bands: int, min_gap: float = 0.25) -> np.ndarray:
    """Distinct per-class band signatures in [0, 1], pairwise L2 gap >= ``min_gap``."""
    rng = np.random.default_rng([seed, 0x5167])
    for _ in range(1000):
        sig = rng.uniform(0.0, 1.0, size=(num_classes, bands))
        d = np.linalg.norm(sig[:, None] - sig[None], axis=-1) + np.eye(num_classes) * 10
        if d.min() >= min_gap:
            return sig
    raise ValueError(f"cannot place {num_classes} signatures {min_gap} apart in {bands} bands")


def synth_patch(rng: np.random.Generator, signatures: np.ndarray, size: int, noise: float, ignore_fraction: float):
    K, bands = signatures.shape
    labels = np.full((size, size), rng.integers(1, K + 1), dtype=np.uint8)
    n_rects = max(K, 3)
    for k in range(n_rects):
        cls = (k % K) + 1
        h, w = rng.integers(size // 8 + 1, size // 2 + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        labels[y:y + h, x:x + w] = cls
    image = signatures[labels - 1].transpose(2, 0, 1)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    mask = labels.copy()
    mask[rng.random((size, size)) < ignore_fraction] = 0
    return image.astype(np.float32), mask


def synth_dataset(
    out_dir,
    seed: int = 0,
    n_patches: int = 8,
    size: int = 32,
    num_classes: int = 4,
    bands: int = 4,
    noise: float = 0.0,
    ignore_fraction: float = 0.7,
    val_fraction: float = 0.0,
    test_fraction: float = 0.0,
    class_names: list[str] | None = None,
) -> Manifest:
    """Write a deterministic synthetic dataset and its manifest (``manifest.json``).

    Each patch is a background class overlaid with class rectangles; pixel
    values are the class signature plus Gaussian noise of std ``noise``. A
    random ``ignore_fraction`` of mask pixels is set to 0.
    """
    if not 0 <= ignore_fraction < 1:
        raise ValueError(f"ignore_fraction must lie in [0, 1), got {ignore_fraction}")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if class_names is None:
        class_names = MARIDA_CLASSES[:num_classes] if num_classes <= len(MARIDA_CLASSES) else [
            f"class{i + 1}" for i in range(num_classes)
        ]
    sig = class_signatures(seed, num_classes, bands)
    rng = np.random.default_rng(seed)
    n_test = int(round(n_patches * test_fraction))
    n_val = int(round(n_patches * val_fraction))
    n_train = n_patches - n_val - n_test
    if n_train < 1:
        raise ValueError("synthetic dataset needs at least one training patch")
    entries = []
    for i in range(n_patches):
        image, mask = synth_patch(rng, sig, size, noise, ignore_fraction)
        pid = f"synth_{i:04d}"
        write_image(out / f"{pid}.msp", image)
        write_mask(out / f"{pid}.msk", mask)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append(PatchEntry(pid, f"{pid}.msp", f"{pid}.msk", split))
    manifest = Manifest(classes=list(class_names), band_count=bands, patches=entries, root=out)
    manifest.save(out / "manifest.json")
    np.save(out / "signatures.npy", sig)
    return manifest


def nearest_signature(image: np.ndarray, signatures: np.ndarray) -> np.ndarray:
    """Label each pixel 1..K by its nearest class signature (L2)."""
    px = image.reshape(image.shape[0], -1).T.astype(np.float64)
    d = ((px[:, None, :] - signatures[None]) ** 2).sum(-1)
    return (np.argmin(d, axis=1) + 1).reshape(image.shape[1:])
