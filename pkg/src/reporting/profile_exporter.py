"""Plot-ready lasso profile exports (long CSV plus a top-m annotation sidecar)."""

import logging
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.errors import PlateFormatError, ValidationError
from src.core.regression import LassoPath

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
PROFILE_COLUMNS = ["log_lambda", "lambda", "compound_id", "coefficient"]


@dataclass
class ProfileExport:
    rows: pd.DataFrame
    annotations: List[str]
    profile_path: str
    annotations_path: str


def annotation_path_for(profile_path: str) -> str:
    root, _ = os.path.splitext(profile_path)
    return f"{root}.annotations.csv"


def top_compounds(path: LassoPath, compound_ids: Sequence[str], m: int) -> List[Tuple[str, float]]:
    """m compounds with the largest |coefficient| at the smallest lambda (ties in design order)."""
    last = path.at_smallest_lambda()
    order = np.argsort(-np.abs(last), kind="stable")[:m]
    return [(compound_ids[j], float(last[j])) for j in order]


def emit_profile(path: LassoPath, compound_ids: Sequence[str], m: int, output_path: str) -> ProfileExport:
    k = path.coefficients.shape[1]
    if len(compound_ids) != k:
        raise ValidationError(f"{len(compound_ids)} compound ids for a path over {k} compounds")
    if not 0 <= m <= k:
        raise ValidationError(f"Cannot annotate {m} compounds out of {k}")

    n_grid = len(path.grid)
    rows = pd.DataFrame({
        "log_lambda": np.repeat(path.grid.log_values, k),
        "lambda": np.repeat(path.grid.lambdas, k),
        "compound_id": np.tile(np.asarray(compound_ids, dtype=object), n_grid),
        "coefficient": path.coefficients.reshape(-1),
    })
    top = top_compounds(path, compound_ids, m)
    annotations = pd.DataFrame(
        [{"rank": i + 1, "compound_id": c, "coefficient_at_min_lambda": b} for i, (c, b) in enumerate(top)],
        columns=["rank", "compound_id", "coefficient_at_min_lambda"],
    )

    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    rows.to_csv(output_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    sidecar = annotation_path_for(output_path)
    annotations.to_csv(sidecar, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Profile ({n_grid} lambdas x {k} compounds) saved to {output_path}")
    return ProfileExport(rows, [c for c, _ in top], output_path, sidecar)


def load_profile(profile_path: str) -> Tuple[np.ndarray, List[str], np.ndarray]:
    """Returns (log_lambda values, compound ids, coefficient matrix) from an exported profile."""
    if not os.path.exists(profile_path):
        raise PlateFormatError(f"File not found: {profile_path}")
    frame = pd.read_csv(profile_path, dtype={"compound_id": str})
    missing = [c for c in PROFILE_COLUMNS if c not in frame.columns]
    if missing:
        raise PlateFormatError(f"{profile_path}: missing column(s) {missing}")

    log_values = pd.unique(frame["log_lambda"])
    compound_ids = list(pd.unique(frame["compound_id"]))
    if len(frame) != len(log_values) * len(compound_ids):
        raise PlateFormatError(f"{profile_path}: expected one row per (lambda, compound)")
    coefficients = frame["coefficient"].to_numpy(dtype=float).reshape(len(log_values), len(compound_ids))
    return np.asarray(log_values, dtype=float), compound_ids, coefficients
