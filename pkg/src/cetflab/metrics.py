"""Clean accuracy and attack success rate, optionally behind an input filter."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError
from .micronet import Network


@dataclass(frozen=True)
class MetricsReport:
    """``accu`` over ``n`` clean images and ``asr`` over ``m`` triggered ones.

    When a detector sits in front of the model, ``flagged_clean`` and
    ``flagged_poisoned`` count the inputs it rejected and ``accu_accepted`` is
    the accuracy over the clean inputs it let through.
    """

    accu: float
    asr: float
    n: int
    m: int
    target_label: int
    flagged_clean: int = 0
    flagged_poisoned: int = 0
    accu_accepted: float = float("nan")

    def to_record(self) -> dict:
        return asdict(self)


def _flags(flags, count: int, what: str) -> np.ndarray:
    if flags is None:
        return np.zeros(count, dtype=bool)
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (count,):
        raise InputError(f"{what} flags must have one entry per image")
    return flags


def evaluate(
    net: Network,
    clean_images: np.ndarray,
    clean_labels: np.ndarray,
    poisoned_images: np.ndarray,
    target: int,
    clean_flagged=None,
    poisoned_flagged=None,
) -> MetricsReport:
    """Accuracy on the clean set and attack success on the triggered set.

    Flagged inputs are rejected by the pipeline, so a rejected poisoned input
    is not a successful attack.  ``accu`` always covers every clean input; the
    accuracy of what the filter accepts is reported as ``accu_accepted``.
    """
    clean_labels = np.asarray(clean_labels)
    n, m = len(clean_images), len(poisoned_images)
    if n == 0 or m == 0:
        raise InputError("evaluation sets must be nonempty")
    if len(clean_labels) != n:
        raise InputError("clean images and labels differ in length")
    cf = _flags(clean_flagged, n, "clean")
    pf = _flags(poisoned_flagged, m, "poisoned")
    correct = net.predict(clean_images) == clean_labels
    accepted = correct[~cf]
    hits = (net.predict(poisoned_images) == target) & ~pf
    return MetricsReport(
        accu=float(correct.mean()),
        asr=float(hits.mean()),
        n=n,
        m=m,
        target_label=int(target),
        flagged_clean=int(cf.sum()),
        flagged_poisoned=int(pf.sum()),
        accu_accepted=float(accepted.mean()) if accepted.size else float("nan"),
    )
