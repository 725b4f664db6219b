"""Synthetic pooled responses and detection metrics."""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Union

import numpy as np

from src.core.designs import Design
from src.core.errors import ValidationError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence]

CENSORED_TPR = "censored(TPR=0)"
CENSORED_FPR = "censored(FPR=0)"


def active_count(k: int) -> int:
    """ceil(0.01 k) in integer arithmetic."""
    return max(1, -(-k // 100))


@dataclass
class SimScenario:
    design: Design
    beta: float
    sigma: float
    active_set: List[int]
    coefficients: np.ndarray
    y: np.ndarray
    seed: Optional[SeedLike] = None

    @property
    def sparsity(self) -> int:
        return len(self.active_set)

    @property
    def active_ids(self) -> List[str]:
        return [self.design.compound_ids[j] for j in self.active_set]


@dataclass(frozen=True)
class Metrics:
    tpr: float
    fpr: float
    true_positives: int
    false_positives: int

    @property
    def log_ratio(self) -> Optional[float]:
        """ln(TPR/FPR); None when either rate is 0."""
        if self.tpr > 0 and self.fpr > 0:
            return math.log(self.tpr / self.fpr)
        return None


def generate_scenario(design: Design, beta: float, sigma: float = 1.0, seed: SeedLike = 0) -> SimScenario:
    """y = X b + e with ceil(0.01 k) random compounds at b = beta/2, intercept 0, e ~ N(0, sigma^2)."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if design.k < 1:
        raise ValidationError("Design has no compounds")
    rng = np.random.default_rng(seed)
    size = active_count(design.k)
    active = sorted(int(j) for j in rng.choice(design.k, size=size, replace=False))

    coefficients = np.zeros(design.k)
    coefficients[active] = beta / 2.0
    noise = rng.standard_normal(design.n)
    y = design.x_matrix() @ coefficients
    if sigma > 0:
        y = y + sigma * noise
    return SimScenario(design, float(beta), float(sigma), active, coefficients, y, seed)


def classification_metrics(detected: Iterable[int], active: Iterable[int], k: int) -> Metrics:
    detected = set(int(j) for j in detected)
    active = set(int(j) for j in active)
    if not active:
        raise ValidationError("Active set is empty; TPR is undefined")
    outside = [j for j in detected | active if not 0 <= j < k]
    if outside:
        raise ValidationError(f"Indices outside 0..{k - 1}: {sorted(outside)[:5]}")
    tp = len(detected & active)
    fp = len(detected - active)
    inactive = k - len(active)
    fpr = fp / inactive if inactive else 0.0
    return Metrics(tp / len(active), fpr, tp, fp)


def condition_log_ratio(mean_tpr: float, mean_fpr: float) -> Union[float, str]:
    """ln(mean TPR / mean FPR) from condition means, or a censored marker."""
    if mean_tpr <= 0:
        return CENSORED_TPR
    if mean_fpr <= 0:
        return CENSORED_FPR
    return math.log(mean_tpr / mean_fpr)


def expected_false_positives(fpr: float, n_compounds: int) -> float:
    """False positives expected when screening n_compounds at the given FPR."""
    if not 0 <= fpr <= 1:
        raise ValidationError(f"FPR must lie in [0, 1], got {fpr}")
    return fpr * n_compounds
