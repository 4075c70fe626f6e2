"""CAM-focus evolutionary trigger filter.

Differential evolution looks for the smallest rectangle of an input that both
controls the model's prediction (masking it with the image's mean colour changes
the label) and transfers (pasting it onto clean images drags them to the
input's label).  A rectangle that flips the majority of a clean filter set marks
the input as poisoned.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .micronet import Network
from .region import Region
from .saliency import PriorRegion, gradcam, prior_region

__all__ = [
    "Region",
    "DEConfig",
    "DetectConfig",
    "FitnessBreakdown",
    "AuxPool",
    "AuxiliarySet",
    "FitnessEvaluator",
    "SearchResult",
    "DetectionVerdict",
    "mask_region",
    "paste_region",
    "fitness",
    "de_search",
    "detect",
    "recount_transitions",
]

FLAG_WEIGHT = 1000.0
FLIPS_WEIGHT = 1000.0


@dataclass(frozen=True)
class DEConfig:
    population_size: int = 40
    alpha: float = 0.3
    crossover_p: float = 0.5
    max_generations: int = 100
    stagnation_limit: int = 10
    aux_count: int = 10
    seed: int = 0
    tolerance: float = 1e-6

    def validate(self) -> "DEConfig":
        if self.population_size < 4:
            raise ConfigError("population_size must be at least 4")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0.0 < self.crossover_p < 1.0:
            raise ConfigError("crossover_p must lie in (0,1)")
        if self.max_generations < 0 or self.stagnation_limit < 0:
            raise ConfigError("generation limits must be non-negative")
        if self.aux_count < 1:
            raise ConfigError("aux_count must be positive")
        return self


@dataclass(frozen=True)
class DetectConfig:
    de: DEConfig = field(default_factory=DEConfig)
    verdict_threshold: float = 0.5
    cam_threshold: float = 0.7
    dilation_frac: float = 0.25

    def validate(self) -> "DetectConfig":
        self.de.validate()
        if not 0.0 <= self.verdict_threshold <= 1.0:
            raise ConfigError("verdict_threshold must lie in [0,1]")
        if not 0.0 < self.cam_threshold < 1.0:
            raise ConfigError("cam_threshold must lie in (0,1)")
        if self.dilation_frac < 0:
            raise ConfigError("dilation_frac must be non-negative")
        return self


@dataclass(frozen=True)
class FitnessBreakdown:
    flag: int
    flip_count: int
    aux_count: int
    area: int
    total_area: int

    @property
    def flips(self) -> float:
        return self.flip_count / self.aux_count

    @property
    def total(self) -> float:
        return FLAG_WEIGHT * self.flag + FLIPS_WEIGHT * self.flips - self.area**2 / self.total_area


# ---------------------------------------------------------------------------
# image edits


def _check_region(image: np.ndarray, region: Region) -> None:
    region.check_fits(image.shape[-2], image.shape[-1])


def mask_region(image: np.ndarray, region: Region) -> np.ndarray:
    """Replace ``region`` with the per-channel mean colour of the whole image."""
    image = np.asarray(image, dtype=np.float32)
    _check_region(image, region)
    out = image.copy()
    means = image.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
    rs, cs = region.slices()
    out[:, rs, cs] = means[:, None, None]
    return out


def paste_region(source: np.ndarray, region: Region, target: np.ndarray) -> np.ndarray:
    """Copy ``source`` pixels inside ``region`` onto ``target`` at the same coordinates."""
    source = np.asarray(source, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    if source.shape != target.shape:
        raise InputError(f"shape mismatch: {source.shape} vs {target.shape}")
    _check_region(target, region)
    out = target.copy()
    rs, cs = region.slices()
    out[:, rs, cs] = source[:, rs, cs]
    return out


# ---------------------------------------------------------------------------
# auxiliary / filter images


@dataclass
class AuxiliarySet:
    images: np.ndarray  # [h,3,H,W]
    predictions: np.ndarray
    indices: np.ndarray  # positions in the pool

    def __len__(self) -> int:
        return len(self.images)


class AuxPool:
    """Clean validation images with their (cached) predictions under one model."""

    def __init__(self, images: np.ndarray, predictions: np.ndarray):
        self.images = np.asarray(images, dtype=np.float32)
        self.predictions = np.asarray(predictions)

    @classmethod
    def from_images(cls, net: Network, images: np.ndarray) -> "AuxPool":
        return cls(images, net.predict(images))

    def select(self, exclude_class: int, h: int, seed) -> AuxiliarySet:
        """``h`` seeded picks whose prediction differs from ``exclude_class``,
        spread over as many predicted classes as possible."""
        rng = np.random.default_rng(seed)
        candidates = np.flatnonzero(self.predictions != exclude_class)
        if len(candidates) < h:
            raise InputError(f"auxiliary pool has {len(candidates)} usable images, need {h}")
        order = candidates[rng.permutation(len(candidates))]
        by_class: dict[int, list[int]] = {}
        for i in order:
            by_class.setdefault(int(self.predictions[i]), []).append(int(i))
        queues = list(by_class.values())  # first-appearance order of the shuffled pool
        chosen: list[int] = []
        depth = 0
        while len(chosen) < h:
            for q in queues:
                if depth < len(q) and len(chosen) < h:
                    chosen.append(q[depth])
            depth += 1
        idx = np.array(chosen)
        return AuxiliarySet(self.images[idx], self.predictions[idx], idx)


# ---------------------------------------------------------------------------
# fitness


class FitnessEvaluator:
    """Batched fitness for one input.

    Every evaluated rectangle costs exactly ``1 + h`` image forwards (one masked
    input, ``h`` pasted filter images).  Results are memoised per integer
    rectangle, so repeated rectangles cost nothing and are not counted.
    """

    def __init__(self, net: Network, image: np.ndarray, aux: AuxiliarySet, prediction: int | None = None):
        self.net = net
        self.image = np.asarray(image, dtype=np.float32)
        self.aux = aux
        if prediction is None:
            prediction = int(net.predict(self.image[None])[0])
        self.prediction = prediction
        self.means = self.image.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
        self.total_area = self.image.shape[1] * self.image.shape[2]
        self.cache: dict[Region, FitnessBreakdown] = {}
        self.evaluations = 0
        self.forward_passes = 0

    def evaluate(self, regions: Sequence[Region]) -> list[FitnessBreakdown]:
        todo = list(dict.fromkeys(r for r in regions if r not in self.cache))
        if todo:
            self._compute(todo)
        return [self.cache[r] for r in regions]

    def _compute(self, regions: list[Region]) -> None:
        h = len(self.aux)
        stride = 1 + h
        batch = np.empty((len(regions) * stride,) + self.image.shape, dtype=np.float32)
        for k, region in enumerate(regions):
            _check_region(self.image, region)
            rs, cs = region.slices()
            base = k * stride
            batch[base] = self.image
            batch[base, :, rs, cs] = self.means[:, None, None]
            batch[base + 1 : base + stride] = self.aux.images
            batch[base + 1 : base + stride, :, rs, cs] = self.image[:, rs, cs]
        preds = self.net.predict(batch).reshape(len(regions), stride)
        self.forward_passes += len(batch)
        self.evaluations += len(regions)
        for k, region in enumerate(regions):
            self.cache[region] = FitnessBreakdown(
                flag=int(preds[k, 0] != self.prediction),
                flip_count=int(np.sum(preds[k, 1:] == self.prediction)),
                aux_count=h,
                area=region.area,
                total_area=self.total_area,
            )


def fitness(region: Region, image: np.ndarray, net: Network, aux: AuxiliarySet) -> FitnessBreakdown:
    """Score one rectangle: 1000*flag + 1000*flips - area^2 / image_area."""
    return FitnessEvaluator(net, image, aux).evaluate([region])[0]


# ---------------------------------------------------------------------------
# differential evolution


@dataclass
class SearchResult:
    region: Region | None
    best: FitnessBreakdown | None
    fitness_trace: list[float]
    generations: int
    evaluations: int
    forward_passes: int
    search_range: Region


def _decode(u: np.ndarray, rng_box: Region) -> Region:
    h = int(min(max(np.floor(u[2] + 0.5), 1), rng_box.height))
    w = int(min(max(np.floor(u[3] + 0.5), 1), rng_box.width))
    r = int(min(max(np.floor(u[0] + 0.5), rng_box.row), rng_box.bottom - h))
    c = int(min(max(np.floor(u[1] + 0.5), rng_box.col), rng_box.right - w))
    return Region(r, c, h, w)


def _clip_population(pop: np.ndarray, box: Region) -> np.ndarray:
    lo = np.array([box.row, box.col, 1, 1], dtype=float)
    hi = np.array([box.bottom - 1, box.right - 1, box.height, box.width], dtype=float)
    return np.clip(pop, lo, hi)


def de_search(
    image: np.ndarray,
    net: Network,
    prior: PriorRegion | Region | None,
    cfg: DEConfig,
    aux: AuxiliarySet,
    evaluator: FitnessEvaluator | None = None,
    seed=None,
) -> SearchResult:
    """Search the prior (or the whole image when it is empty) for the fittest rectangle.

    Individuals are real 4-vectors (row, col, height, width) kept inside the
    search box; they are rounded to pixels only when scored.  Each generation
    mutates every individual with two other random members, crosses over
    coordinate-wise, scores the offspring as one batch and keeps the offspring
    only when strictly fitter.  The run stops after ``max_generations`` or once
    the best score has failed to improve by ``tolerance`` for more than
    ``stagnation_limit`` consecutive generations.  A best score below zero
    means nothing influential was found and ``region`` is None.
    """
    cfg.validate()
    image = np.asarray(image, dtype=np.float32)
    _, height, width = image.shape
    if isinstance(prior, PriorRegion):
        box = prior.region
    else:
        box = prior
    if box is None:
        box = Region.full(height, width)
    box.check_fits(height, width)
    if evaluator is None:
        evaluator = FitnessEvaluator(net, image, aux)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = cfg.population_size

    lo = np.array([box.row, box.col, 1, 1], dtype=float)
    hi = np.array([box.bottom - 1, box.right - 1, box.height, box.width], dtype=float)
    pop = lo + rng.random((n, 4)) * (hi - lo)
    scores = np.array([f.total for f in evaluator.evaluate([_decode(u, box) for u in pop])])
    best = scores.max()
    trace = [float(best)]
    trapped = 0
    generation = 0
    for generation in range(1, cfg.max_generations + 1):
        partners = np.empty((n, 2), dtype=int)
        for i in range(n):
            a, b = rng.choice(n - 1, size=2, replace=False)
            partners[i] = [a + (a >= i), b + (b >= i)]
        mutant = pop + cfg.alpha * (pop[partners[:, 0]] - pop[partners[:, 1]])
        gamma = rng.random((n, 4))
        child = _clip_population(np.where(gamma < cfg.crossover_p, mutant, pop), box)
        child_scores = np.array([f.total for f in evaluator.evaluate([_decode(u, box) for u in child])])
        better = scores < child_scores
        pop[better] = child[better]
        scores[better] = child_scores[better]
        current = scores.max()
        trace.append(float(current))
        if abs(current - best) < cfg.tolerance:
            trapped += 1
            if trapped > cfg.stagnation_limit:
                break
        else:
            trapped = 0
            best = current
    top = int(np.argmax(scores))
    region = _decode(pop[top], box)
    breakdown = evaluator.evaluate([region])[0]
    return SearchResult(
        region=region if breakdown.total >= 0 else None,
        best=breakdown,
        fitness_trace=trace,
        generations=generation,
        evaluations=evaluator.evaluations,
        forward_passes=evaluator.forward_passes,
        search_range=box,
    )


# ---------------------------------------------------------------------------
# full filter


@dataclass
class DetectionVerdict:
    input_id: int
    poisoned: bool
    prediction: int
    best_region: Region | None
    extracted_patch: np.ndarray | None
    transition_ratio: float
    fitness_trace: list[float]
    generations: int
    evaluations: int
    forward_passes: int
    prior: Region | None
    aux_indices: list[int]
    best_fitness: float | None = None

    def to_record(self) -> dict:
        return {
            "input_id": self.input_id,
            "verdict": "poisoned" if self.poisoned else "clean",
            "prediction": self.prediction,
            "region": None if self.best_region is None else self.best_region.to_list(),
            "transition_ratio": self.transition_ratio,
            "generations": self.generations,
            "evaluations": self.evaluations,
            "forward_passes": self.forward_passes,
            "best_fitness": self.best_fitness,
            "prior": None if self.prior is None else self.prior.to_list(),
            "aux_indices": list(self.aux_indices),
            "fitness_trace": list(self.fitness_trace),
        }


def input_seed(root: int, input_id: int) -> int:
    return int(np.random.SeedSequence([int(root) & 0xFFFFFFFF, 0x43455446, int(input_id)]).generate_state(1)[0])


def recount_transitions(net: Network, image: np.ndarray, region: Region, filter_images: np.ndarray, prediction: int) -> float:
    """Fraction of filter images predicted as ``prediction`` once ``image[region]`` is pasted on them."""
    rs, cs = region.slices()
    batch = np.array(filter_images, dtype=np.float32, copy=True)
    batch[:, :, rs, cs] = np.asarray(image, np.float32)[:, rs, cs]
    preds = net.predict(batch)
    return float(np.sum(preds == prediction)) / len(batch)


def detect(image: np.ndarray, net: Network, cfg: DetectConfig, aux_pool: AuxPool, input_id: int = 0) -> DetectionVerdict:
    """GradCAM prior -> DE trigger search -> paste-and-filter vote."""
    cfg.validate()
    image = np.asarray(image, dtype=np.float32)
    seed = input_seed(cfg.de.seed, input_id)
    aux_seed, de_seed = np.random.SeedSequence(seed).spawn(2)
    prediction = int(net.predict(image[None])[0])
    smap = gradcam(net, image, prediction)
    prior = prior_region(smap, cfg.cam_threshold, cfg.dilation_frac)
    aux = aux_pool.select(prediction, cfg.de.aux_count, aux_seed)
    evaluator = FitnessEvaluator(net, image, aux, prediction)
    result = de_search(image, net, prior, cfg.de, aux, evaluator, seed=de_seed)
    ratio = 0.0
    patch = None
    poisoned = False
    if result.region is not None:
        ratio = recount_transitions(net, image, result.region, aux.images, prediction)
        poisoned = ratio > cfg.verdict_threshold
        if poisoned:
            rs, cs = result.region.slices()
            patch = image[:, rs, cs].copy()
    return DetectionVerdict(
        input_id=input_id,
        poisoned=poisoned,
        prediction=prediction,
        best_region=result.region,
        extracted_patch=patch,
        transition_ratio=ratio,
        fitness_trace=result.fitness_trace,
        generations=result.generations,
        evaluations=result.evaluations,
        forward_passes=result.forward_passes,
        prior=prior.region,
        aux_indices=[int(i) for i in aux.indices],
        best_fitness=None if result.best is None else result.best.total,
    )
