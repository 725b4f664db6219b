"""
Secondary filtering of primary hits.

A well is inhibitory when its reading lies strictly beyond mu + r*sigma in the
effect direction; a hit survives when at least ceil(p_s * a_j) of its a_j
wells are inhibitory. The robust variant estimates (mu, sigma) per compound
from the wells that do not contain it (median, 1.48 * MAD).
"""

import logging
import math
import re
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import median_abs_deviation

from src.core.designs import Design
from src.core.errors import ConfigError, ValidationError
from src.core.screening import EFFECT_SIGNS, HitList

logger = logging.getLogger(__name__)

SIGMA_MODES = ("known", "robust")
MAD_SCALE = 1.48
MIN_REFERENCE_WELLS = 8

_CRITERION_PATTERN = re.compile(r"^\s*([0-9.]+)\s*@\s*([0-9.]+)\s*(sd)?\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class SecondaryCriterion:
    p_s: float = 0.75
    r: float = 3.0
    sigma_mode: str = "known"
    effect_sign: str = "positive"
    min_reference_wells: int = MIN_REFERENCE_WELLS

    def __post_init__(self):
        if not 0 < self.p_s <= 1:
            raise ConfigError(f"p_s must lie in (0, 1], got {self.p_s}")
        if not self.r > 0:
            raise ConfigError(f"r must be > 0, got {self.r}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got '{self.sigma_mode}'")
        if self.effect_sign not in EFFECT_SIGNS:
            raise ConfigError(f"effect_sign must be one of {EFFECT_SIGNS}, got '{self.effect_sign}'")
        if self.min_reference_wells < 2:
            raise ConfigError(f"min_reference_wells must be >= 2, got {self.min_reference_wells}")

    @property
    def sign(self) -> int:
        return 1 if self.effect_sign == "positive" else -1

    @property
    def label(self) -> str:
        return f"{self.p_s:g}@{self.r:g}sd"

    @classmethod
    def parse(cls, text: str, **kwargs) -> "SecondaryCriterion":
        """'0.75@3sd' -> p_s = 0.75, r = 3."""
        match = _CRITERION_PATTERN.match(text or "")
        if not match:
            raise ConfigError(f"Secondary criterion must look like 'P_S@R' or 'P_S@Rsd', got '{text}'")
        return cls(p_s=float(match.group(1)), r=float(match.group(2)), **kwargs)

    def to_dict(self):
        return asdict(self)


def required_count(p_s: float, wells: int) -> int:
    return int(math.ceil(p_s * wells - 1e-9))


def count_beyond(values: np.ndarray, mu: float, sigma: float, r: float, sign: int) -> int:
    values = np.asarray(values, dtype=float)
    if sign > 0:
        return int(np.count_nonzero(values > mu + r * sigma))
    return int(np.count_nonzero(values < mu - r * sigma))


def robust_location_scale(values: Sequence[float]) -> Tuple[float, float]:
    """(median, 1.48 * median absolute deviation)."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise ValidationError("Cannot estimate location/scale from an empty set of wells")
    return float(np.median(values)), float(MAD_SCALE * median_abs_deviation(values, scale=1.0))


def _reference_stats(design: Design, y: np.ndarray, j: int, min_wells: int) -> Tuple[float, float]:
    outside = np.flatnonzero(design.membership[:, j] == 0)
    if len(outside) < min_wells:
        raise ValidationError(
            f"Compound '{design.compound_ids[j]}' leaves only {len(outside)} reference wells "
            f"(need at least {min_wells}) for robust estimation"
        )
    return robust_location_scale(y[outside])


def _apply_rule(
    design: Design,
    y: np.ndarray,
    primary_hits: HitList,
    crit: SecondaryCriterion,
    stats_for: Callable[[int], Tuple[float, float]],
) -> HitList:
    y = np.asarray(y, dtype=float)
    if len(y) != design.n:
        raise ValidationError(f"Response length {len(y)} does not match the design's {design.n} wells")

    diagnostics = list(primary_hits.diagnostics)
    counts: Dict[str, Dict[str, float]] = {}
    passed = []
    for compound in primary_hits.hits:
        wells = design.wells_of(compound)
        j = design.compound_ids.index(compound)
        mu, sigma = stats_for(j)
        if not sigma > 0:
            diagnostics.append(f"{compound}: reference scale is 0, secondary criterion not evaluated")
            counts[compound] = {"wells": len(wells), "beyond": None, "required": None, "mu": mu, "sigma": sigma}
            continue
        beyond = count_beyond(y[wells], mu, sigma, crit.r, crit.sign)
        needed = required_count(crit.p_s, len(wells))
        counts[compound] = {"wells": len(wells), "beyond": beyond, "required": needed, "mu": mu, "sigma": sigma}
        if len(wells) and beyond >= needed:
            passed.append(compound)

    per_compound = {c: {**primary_hits.per_compound.get(c, {}), **counts[c]} for c in passed}
    details = {
        "primary_hits": list(primary_hits.hits),
        "criterion": crit.to_dict(),
        "counts": counts,
    }
    tag = f"{primary_hits.method_tag} + secondary({crit.label}, {crit.sigma_mode})"
    logger.debug(f"Secondary {crit.label}: {len(passed)}/{len(primary_hits.hits)} hit(s) kept")
    return HitList(passed, per_compound, tag, list(design.compound_ids), diagnostics,
                   pseudo_hits=[p for p in primary_hits.pseudo_hits], details=details)


def secondary_filter_known(design: Design, y: np.ndarray, primary_hits: HitList, mu: float, sigma: float,
                           crit: SecondaryCriterion) -> HitList:
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    return _apply_rule(design, y, primary_hits, crit, lambda _: (float(mu), float(sigma)))


def secondary_filter_robust(design: Design, y: np.ndarray, primary_hits: HitList,
                            crit: SecondaryCriterion) -> HitList:
    y = np.asarray(y, dtype=float)
    return _apply_rule(
        design, y, primary_hits, crit, lambda j: _reference_stats(design, y, j, crit.min_reference_wells)
    )


def secondary_count_table(
    design: Design,
    y: np.ndarray,
    hits: Sequence[str],
    effect_sign: str = "negative",
    mu: Optional[float] = None,
    sigma: Optional[float] = None,
    r_values: Sequence[float] = (2.0, 3.0),
    min_reference_wells: int = MIN_REFERENCE_WELLS,
) -> pd.DataFrame:
    """
    Per hit, the number of wells beyond each r (robust per-compound statistics
    unless mu and sigma are given).
    """
    y = np.asarray(y, dtype=float)
    sign = 1 if effect_sign == "positive" else -1
    rows = []
    for compound in hits:
        wells = design.wells_of(compound)
        j = design.compound_ids.index(compound)
        if mu is None or sigma is None:
            m, s = _reference_stats(design, y, j, min_reference_wells)
        else:
            m, s = float(mu), float(sigma)
        row = {"compound_id": compound, "wells": len(wells), "mu": m, "sigma": s}
        for r in r_values:
            row[f"beyond_{r:g}sd"] = count_beyond(y[wells], m, s, r, sign) if s > 0 else None
        rows.append(row)
    columns = ["compound_id", "wells", "mu", "sigma"] + [f"beyond_{r:g}sd" for r in r_values]
    return pd.DataFrame(rows, columns=columns)
