"""Synthetic glyph dataset, trigger transforms and the poisoning policy."""
from __future__ import annotations

import colorsys
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError
from .region import Region

DATASET_MAGIC = b"CBDS"
DATASET_VERSION = 1

TRIGGER_KINDS = ("patch", "blended", "sig")


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    poisoned_flags: np.ndarray  # [N] bool
    original_labels: np.ndarray  # [N] int64
    # ground-truth trigger placement per image; in memory only, never serialized
    regions: list[list[Region]] | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def clean(cls, images: np.ndarray, labels: np.ndarray) -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.asarray(images, dtype=np.float32), labels, np.zeros(len(labels), bool), labels.copy())

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        regions = None if self.regions is None else [self.regions[i] for i in idx]
        return Dataset(
            self.images[idx], self.labels[idx], self.poisoned_flags[idx], self.original_labels[idx], regions
        )


# ---------------------------------------------------------------------------
# synthetic data

_SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond", "cross", "hbars", "vbars", "tee")


def _glyph_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    d = np.sqrt(u * u + v * v)
    if shape == "disk":
        return d <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "triangle":
        return (v <= 0.8) & (v >= -1.0) & (au <= 0.55 * (v + 1.0))
    if shape == "plus":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if shape == "ring":
        return (d <= 1.0) & (d >= 0.55)
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "cross":
        return (np.abs(au - av) <= 0.3) & (np.maximum(au, av) <= 0.95)
    if shape == "hbars":
        return ((np.abs(v - 0.5) <= 0.3) | (np.abs(v + 0.5) <= 0.3)) & (au <= 1.0)
    if shape == "vbars":
        return ((np.abs(u - 0.5) <= 0.3) | (np.abs(u + 0.5) <= 0.3)) & (av <= 1.0)
    if shape == "tee":
        return ((np.abs(v + 0.7) <= 0.25) & (au <= 0.95)) | ((au <= 0.25) & (v >= -0.7) & (v <= 1.0))
    raise InputError(f"unknown glyph {shape!r}")


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Smooth low-frequency noise: bilinear upsampling of a 4x4 grid per channel."""
    grid = rng.uniform(-amplitude, amplitude, (3, 4, 4))
    t = (np.arange(size) + 0.5) * 4 / size - 0.5
    i0 = np.clip(np.floor(t).astype(int), 0, 3)
    i1 = np.clip(i0 + 1, 0, 3)
    f = np.clip(t - np.floor(t), 0, 1)
    rows = grid[:, i0] * (1 - f)[None, :, None] + grid[:, i1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]


def _draw(rng: np.random.Generator, label: int, classes: int, size: int) -> np.ndarray:
    # the scene is tinted with a muted version of the class hue, so class evidence
    # is spread over the whole image and a pasted fragment cannot outvote it
    hue = label / classes
    tint = colorsys.hsv_to_rgb((hue + rng.uniform(-0.03, 0.03)) % 1.0, rng.uniform(0.45, 0.65), rng.uniform(0.3, 0.5))
    img = np.array(tint)[:, None, None] + _texture(rng, size, 0.05)
    color = colorsys.hsv_to_rgb((hue + rng.uniform(-0.02, 0.02)) % 1.0, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0))
    radius = rng.uniform(0.10, 0.14) * size
    cy, cx = size / 2 + rng.uniform(-11, 11, 2) * size / 32
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = _glyph_mask(_SHAPES[label % len(_SHAPES)], (xx - cx) / radius, (yy - cy) / radius)
    img = np.where(mask[None], np.array(color)[:, None, None], img)
    img = img + rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_images(seed, n: int, classes: int = 10, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, 3, size, size), np.float32)
    for i, y in enumerate(labels):
        images[i] = _draw(rng, int(y), classes, size)
    return images, labels


def synth_dataset(seed: int, n_train: int, n_test: int, classes: int = 10, size: int = 32) -> tuple[Dataset, Dataset]:
    """Procedural glyph classification data: one shape and base hue per class.

    A small glyph sits at a random spot on a softly textured background tinted
    with the class hue; position, scale, colour and noise are jittered per image.

    Every image is drawn from its own stream of a seeded generator, so the same
    seed always yields bit-identical datasets.  Classes are balanced to within one.
    """
    if classes < 2:
        raise InputError("need at least two classes")
    if n_train < 0 or n_test < 0:
        raise InputError("dataset sizes must be non-negative")
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train = Dataset.clean(*synth_images(train_seq, n_train, classes, size))
    test = Dataset.clean(*synth_images(test_seq, n_test, classes, size))
    return train, test


# ---------------------------------------------------------------------------
# triggers


def checker_patch(size: int = 3, low=(0.0, 0.0, 0.0), high=(1.0, 1.0, 1.0)) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    on = ((rr + cc) % 2 == 0)[None]
    return np.where(on, np.array(high)[:, None, None], np.array(low)[:, None, None]).astype(np.float32)


def yellow_patch(size: int = 2) -> np.ndarray:
    return np.broadcast_to(np.array([1.0, 1.0, 0.0], np.float32)[:, None, None], (3, size, size)).copy()


@dataclass
class TriggerSpec:
    kind: str = "patch"
    patch: np.ndarray = field(default_factory=checker_patch)
    position: str = "fixed"  # fixed | random
    row: int = 28
    col: int = 28
    size_policy: str = "fixed"  # fixed | random
    size_min: int = 2
    size_max: int = 8
    count: int = 1
    blend_weight: float = 0.2
    blend_seed: int = 2024
    sig_amplitude: float = 0.08
    sig_frequency: float = 6.0

    def validate(self, height: int = 32, width: int = 32) -> "TriggerSpec":
        if self.kind not in TRIGGER_KINDS:
            raise InputError(f"unknown trigger kind {self.kind!r}")
        if self.count not in (1, 2, 3):
            raise InputError("trigger count must be 1, 2 or 3")
        if self.kind == "patch":
            p = np.asarray(self.patch)
            if p.ndim != 3 or p.shape[0] != 3:
                raise InputError("patch must be [3,h,w]")
            if self.position not in ("fixed", "random") or self.size_policy not in ("fixed", "random"):
                raise InputError("position/size policy must be 'fixed' or 'random'")
            h, w = self.max_size()
            if h > height or w > width:
                raise InputError(f"patch {h}x{w} larger than image {height}x{width}")
            if self.position == "fixed":
                if self.count != 1:
                    raise InputError("several triggers need position='random'")
                if self.row < 0 or self.col < 0 or self.row + h > height or self.col + w > width:
                    raise InputError("fixed trigger position falls outside the image")
            if self.size_policy == "random" and not (1 <= self.size_min <= self.size_max):
                raise InputError("need 1 <= size_min <= size_max")
        elif self.kind == "blended" and not (0.0 <= self.blend_weight <= 1.0):
            raise InputError("blend weight must lie in [0,1]")
        return self

    def max_size(self) -> tuple[int, int]:
        if self.size_policy == "random":
            return self.size_max, self.size_max
        return int(self.patch.shape[1]), int(self.patch.shape[2])

    def blend_pattern(self, shape) -> np.ndarray:
        return np.random.default_rng(self.blend_seed).random(shape, dtype=np.float32)


def preset(name: str, **overrides) -> TriggerSpec:
    """Named attacks used across the lab."""
    presets = {
        "badnets": TriggerSpec(),
        "yellow2x2": TriggerSpec(patch=yellow_patch(2), row=29, col=29),
        "random_position": TriggerSpec(position="random"),
        "multi2": TriggerSpec(position="random", count=2),
        "multi3": TriggerSpec(position="random", count=3),
        "random_size": TriggerSpec(position="random", size_policy="random"),
        "blended": TriggerSpec(kind="blended"),
        "sig": TriggerSpec(kind="sig"),
    }
    if name not in presets:
        raise InputError(f"unknown trigger preset {name!r}; choose from {sorted(presets)}")
    return replace(presets[name], **overrides)


def _resize_nearest(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    ph, pw = patch.shape[1:]
    ri = (np.arange(h) * ph) // h
    ci = (np.arange(w) * pw) // w
    return patch[:, ri][:, :, ci]


def apply_trigger(image: np.ndarray, spec: TriggerSpec, seed=0) -> tuple[np.ndarray, list[Region]]:
    """Stamp one image; returns the poisoned copy and the exact regions written.

    Blended and SIG triggers touch the whole image and report no regions.
    """
    image = np.asarray(image, dtype=np.float32)
    _, height, width = image.shape
    spec.validate(height, width)
    out = image.copy()
    if spec.kind == "blended":
        w = np.float32(spec.blend_weight)
        out = (np.float32(1) - w) * image + w * spec.blend_pattern(image.shape)
        return np.clip(out, 0.0, 1.0).astype(np.float32), []
    if spec.kind == "sig":
        wave = spec.sig_amplitude * np.sin(2 * np.pi * spec.sig_frequency * np.arange(width) / width)
        return np.clip(image + wave.astype(np.float32)[None, None, :], 0.0, 1.0).astype(np.float32), []

    rng = np.random.default_rng(seed)
    regions: list[Region] = []
    for _ in range(spec.count):
        if spec.size_policy == "random":
            h, w = (int(v) for v in rng.integers(spec.size_min, spec.size_max + 1, 2))
            patch = _resize_nearest(np.asarray(spec.patch, np.float32), h, w)
        else:
            patch = np.asarray(spec.patch, np.float32)
            h, w = patch.shape[1:]
        if spec.position == "fixed":
            region = Region(spec.row, spec.col, h, w)
        else:
            for _attempt in range(100):
                r = int(rng.integers(0, height - h + 1))
                c = int(rng.integers(0, width - w + 1))
                region = Region(r, c, h, w)
                if all(region.intersection(prev) == 0 for prev in regions):
                    break
        out[(slice(None),) + region.slices()] = patch
        regions.append(region)
    return out, regions


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def stamp_images(images: np.ndarray, spec: TriggerSpec, seed: int = 0) -> tuple[np.ndarray, list[list[Region]]]:
    """Apply the trigger to every image (image ``i`` uses a seed derived from ``(seed, i)``)."""
    out = np.empty_like(np.asarray(images, np.float32))
    regions = []
    for i, img in enumerate(images):
        out[i], reg = apply_trigger(img, spec, _image_seed(seed, i))
        regions.append(reg)
    return out, regions


@dataclass(frozen=True)
class PoisonPolicy:
    rate: float = 0.1
    target_label: int = 0
    seed: int = 0

    def count(self, n: int) -> int:
        if not 0.0 <= self.rate <= 1.0:
            raise InputError("poison rate must lie in [0,1]")
        return int(math.floor(self.rate * n + 0.5))


def poison_dataset(ds: Dataset, spec: TriggerSpec, policy: PoisonPolicy) -> Dataset:
    """Poison exactly ``round(rate * N)`` images; unflagged images stay bit-identical.

    Patch and blended attacks relabel to the target.  SIG is a clean-label attack:
    labels are untouched and victims are drawn from the target class first.
    """
    n = len(ds)
    k = policy.count(n)
    rng = np.random.default_rng(policy.seed)
    if spec.kind == "sig":
        own = np.flatnonzero(ds.labels == policy.target_label)
        rest = np.flatnonzero(ds.labels != policy.target_label)
        chosen = np.concatenate([rng.permutation(own), rng.permutation(rest)])[:k]
    else:
        chosen = rng.choice(n, size=k, replace=False)
    chosen = np.sort(chosen)
    images = ds.images.copy()
    labels = ds.labels.copy()
    flags = ds.poisoned_flags.copy()
    regions = [list(r) for r in ds.regions] if ds.regions is not None else [[] for _ in range(n)]
    for i in chosen:
        images[i], regions[i] = apply_trigger(ds.images[i], spec, _image_seed(policy.seed, int(i)))
        flags[i] = True
        if spec.kind != "sig":
            labels[i] = policy.target_label
    return Dataset(images, labels, flags, ds.original_labels.copy(), regions)


# ---------------------------------------------------------------------------
# dataset files
#
# little-endian: "CBDS" | u32 version | u32 N, C, H, W | f32 images |
# u16 labels | u8 flags | u16 original labels


def dataset_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    head = DATASET_MAGIC + struct.pack("<5I", DATASET_VERSION, n, c, h, w)
    return b"".join(
        [
            head,
            np.ascontiguousarray(ds.images, "<f4").tobytes(),
            np.asarray(ds.labels, "<u2").tobytes(),
            np.asarray(ds.poisoned_flags, "u1").tobytes(),
            np.asarray(ds.original_labels, "<u2").tobytes(),
        ]
    )


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(ds))
    return path


def dataset_from_bytes(data: bytes) -> Dataset:
    if len(data) < 24 or data[:4] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    version, n, c, h, w = struct.unpack("<5I", data[4:24])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    count = n * c * h * w
    expected = 24 + 4 * count + 2 * n + n + 2 * n
    if len(data) != expected:
        raise FormatError(f"dataset file has {len(data)} bytes, header implies {expected}")
    pos = 24
    images = np.frombuffer(data, "<f4", count, pos).reshape(n, c, h, w).astype(np.float32)
    pos += 4 * count
    labels = np.frombuffer(data, "<u2", n, pos).astype(np.int64)
    pos += 2 * n
    flags = np.frombuffer(data, "u1", n, pos).astype(bool)
    pos += n
    original = np.frombuffer(data, "<u2", n, pos).astype(np.int64)
    return Dataset(images, labels, flags, original)


def load_dataset(path) -> Dataset:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset: {exc}") from exc
    return dataset_from_bytes(data)
