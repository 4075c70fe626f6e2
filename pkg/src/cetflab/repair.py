"""Backdoor removal with a recovered trigger: naive unlearning, BN-unlearning, BN-cleaning.

All three methods work on a handful of clean images stamped with the trigger.
The two BN variants touch only batch-norm tensors, which makes the claim that
the shortcut lives in those layers checkable bit for bit.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError, UnsupportedModelError
from .micronet import BatchNorm, Network
from .poison import Dataset, TriggerSpec, apply_trigger
from .region import Region

METHODS = ("naive", "bn_unlearn", "bn_clean")
# BN affine parameters are few and sit behind normalisation, so they take larger steps
DEFAULT_LR = {"naive": 0.01, "bn_unlearn": 0.1}


@dataclass
class RepairSet:
    images: np.ndarray  # [N,3,H,W], trigger stamped
    labels: np.ndarray  # true classes
    per_class_count: int
    source_indices: np.ndarray  # rows of the validation pool
    regions: list[list[Region]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


def _pick(labels: np.ndarray, per_class_count: int, seed, num_classes: int | None) -> np.ndarray:
    if per_class_count < 1:
        raise InputError("per_class_count must be at least 1")
    labels = np.asarray(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    if num_classes < 1:
        raise InputError("validation pool is empty")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class_count:
            raise InputError(f"class {c} has {len(members)} pool images, need {per_class_count}")
        picks.append(rng.choice(members, per_class_count, replace=False))
    return np.concatenate(picks)


def build_repair_set(
    pool: Dataset,
    patch: np.ndarray,
    region: Region,
    per_class_count: int = 2,
    seed=0,
    num_classes: int | None = None,
) -> RepairSet:
    """Stamp ``patch`` at ``region`` onto seeded per-class picks from a clean pool."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.shape != (pool.images.shape[1], region.height, region.width):
        raise InputError(f"patch shape {patch.shape} does not match region {region.to_list()}")
    region.check_fits(*pool.images.shape[2:])
    idx = _pick(pool.labels, per_class_count, seed, num_classes)
    images = pool.images[idx].copy()
    rows, cols = region.slices()
    images[:, :, rows, cols] = patch
    return RepairSet(images, pool.labels[idx].copy(), per_class_count, idx, [[region] for _ in idx])


def build_repair_set_from_trigger(
    pool: Dataset,
    spec: TriggerSpec,
    per_class_count: int = 2,
    seed=0,
    num_classes: int | None = None,
) -> RepairSet:
    """Same selection, stamped with the attacker's own trigger.

    Used for blended and sinusoidal attacks, which the region search does not
    target, and to separate detection error from repair error.
    """
    idx = _pick(pool.labels, per_class_count, seed, num_classes)
    stamp_seq = np.random.SeedSequence(seed).spawn(len(idx))
    images, regions = [], []
    for i, s in zip(idx, stamp_seq):
        img, regs = apply_trigger(pool.images[i], spec, s)
        images.append(img)
        regions.append(regs)
    return RepairSet(np.stack(images), pool.labels[idx].copy(), per_class_count, idx, regions)


# ---------------------------------------------------------------------------
# methods


def repair_batch_size(n: int) -> int:
    return n if n <= 64 else 32


def _batches(n: int, rng: np.random.Generator):
    size = repair_batch_size(n)
    order = rng.permutation(n) if size < n else np.arange(n)
    for start in range(0, n, size):
        idx = order[start : start + size]
        if len(idx) >= 2:  # train-mode BN needs two images
            yield idx


def _require_bn(net: Network) -> None:
    if not net.bn_indices():
        raise UnsupportedModelError("network has no batch-norm layer")


def _fine_tune(net, repair_set, epochs, lr, seed, param_mask, timings):
    if len(repair_set) == 0:
        raise InputError("repair set is empty")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        t0 = time.perf_counter()
        for idx in _batches(len(repair_set), rng):
            _, grads = net.loss_and_grads(repair_set.images[idx], repair_set.labels[idx], param_mask=param_mask)
            net.sgd_step(grads, lr)
        timings.append(time.perf_counter() - t0)
    return net


def naive_unlearn(net: Network, repair_set: RepairSet, epochs: int = 3, lr: float = 0.01, seed=0, timings=None) -> Network:
    """Fine-tune every parameter on the stamped images with their true labels (in place)."""
    return _fine_tune(net, repair_set, epochs, lr, seed, "all", [] if timings is None else timings)


def bn_unlearn(net: Network, repair_set: RepairSet, epochs: int = 3, lr: float = 0.1, seed=0, timings=None) -> Network:
    """Fine-tune only BN gamma/beta; running statistics follow the train-mode forwards."""
    _require_bn(net)
    return _fine_tune(net, repair_set, epochs, lr, seed, "bn", [] if timings is None else timings)


def bn_clean(net: Network, repair_images: np.ndarray, passes: int = 10, seed=0, timings=None) -> Network:
    """Re-estimate BN running mean/variance from stamped images; no labels, no gradients."""
    _require_bn(net)
    images = np.asarray(repair_images)
    if len(images) == 0:
        raise InputError("repair set is empty")
    timings = [] if timings is None else timings
    rng = np.random.default_rng(seed)
    for _ in range(passes):
        t0 = time.perf_counter()
        for idx in _batches(len(images), rng):
            net.forward(images[idx], mode="train")
        timings.append(time.perf_counter() - t0)
    return net


# ---------------------------------------------------------------------------
# bookkeeping


def tensor_groups(net: Network) -> dict[str, list[str]]:
    """Parameter names split into ``non_bn``, ``bn_affine`` and ``bn_running``."""
    groups = {"non_bn": [], "bn_affine": [], "bn_running": []}
    for i, layer in enumerate(net.layers):
        for name in layer.tensors():
            key = f"{i}.{name}"
            if not isinstance(layer, BatchNorm):
                groups["non_bn"].append(key)
            elif name in ("gamma", "beta"):
                groups["bn_affine"].append(key)
            else:
                groups["bn_running"].append(key)
    return groups


def checksum(net: Network, names=None) -> str:
    """SHA-256 over the named tensors' raw bytes (all tensors by default)."""
    state = net.state_dict()
    h = hashlib.sha256()
    for name in state if names is None else names:
        t = np.ascontiguousarray(state[name])
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.tobytes())
    return h.hexdigest()


def changed_tensors(before: Network, after: Network) -> list[str]:
    """Names of tensors whose bytes differ between two networks of one architecture."""
    a, b = before.state_dict(), after.state_dict()
    return [n for n in a if a[n].tobytes() != b[n].tobytes()]


@dataclass
class RepairReport:
    method: str
    epochs: int
    per_class_count: int
    accu_before: float
    accu_after: float
    asr_before: float
    asr_after: float
    epoch_seconds: list[float]
    checksum_non_bn_before: str
    checksum_non_bn_after: str
    changed: list[str]

    def to_record(self) -> dict:
        return asdict(self)


def repair(
    net: Network,
    method: str,
    repair_set: RepairSet,
    epochs: int = 3,
    lr: float | None = None,
    passes: int = 10,
    seed=0,
    evaluate=None,
) -> tuple[Network, RepairReport]:
    """Run one repair method on a copy of ``net``.

    ``evaluate`` maps a network to ``(accu, asr)``; without it those report
    fields are NaN.  ``epochs`` is reported as ``passes`` for BN-cleaning.
    ``lr`` defaults to the method's entry in ``DEFAULT_LR``.
    """
    if method not in METHODS:
        raise InputError(f"unknown repair method {method!r}; expected one of {METHODS}")
    if lr is None:
        lr = DEFAULT_LR.get(method, 0.0)
    fixed = net.copy()
    non_bn = tensor_groups(net)["non_bn"]
    before = checksum(net, non_bn)
    pre = evaluate(net) if evaluate else (float("nan"), float("nan"))
    timings: list[float] = []
    if method == "naive":
        naive_unlearn(fixed, repair_set, epochs, lr, seed, timings)
    elif method == "bn_unlearn":
        bn_unlearn(fixed, repair_set, epochs, lr, seed, timings)
    else:
        bn_clean(fixed, repair_set.images, passes, seed, timings)
        epochs = passes
    post = evaluate(fixed) if evaluate else (float("nan"), float("nan"))
    report = RepairReport(
        method=method,
        epochs=epochs,
        per_class_count=repair_set.per_class_count,
        accu_before=float(pre[0]),
        accu_after=float(post[0]),
        asr_before=float(pre[1]),
        asr_after=float(post[1]),
        epoch_seconds=timings,
        checksum_non_bn_before=before,
        checksum_non_bn_after=checksum(fixed, non_bn),
        changed=changed_tensors(net, fixed),
    )
    return fixed, report
