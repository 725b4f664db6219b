"""Design and plate-reading files."""

import logging
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from src.core.designs import Design
from src.core.errors import DesignError, PlateFormatError

logger = logging.getLogger(__name__)

ENCODINGS = ["utf-8", "utf-8-sig", "cp1252", "latin-1"]
PLATE_COLUMNS = ["well_id", "value", "role", "assay"]
ROLES = ("pool", "positive_control", "negative_control")
ASSAYS = ("WT", "MUT")


def read_csv_robust(path: str, **kwargs) -> pd.DataFrame:
    """Reads a CSV as strings, falling back through common encodings."""
    if not os.path.exists(path):
        raise PlateFormatError(f"File not found: {path}")
    for enc in ENCODINGS:
        try:
            return pd.read_csv(path, dtype=str, keep_default_na=False, encoding=enc, **kwargs)
        except UnicodeDecodeError:
            continue
        except pd.errors.ParserError as e:
            raise PlateFormatError(f"Malformed CSV {path}: {e}")
        except pd.errors.EmptyDataError:
            raise PlateFormatError(f"Empty CSV file: {path}")
    raise PlateFormatError(f"Could not decode {path}. Tried encodings: {ENCODINGS}")


def save_design(design: Design, path: str):
    frame = pd.DataFrame(design.membership, columns=design.compound_ids)
    frame.insert(0, "well_id", design.well_ids)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    logger.info(f"Design {design.n}x{design.k} saved to {path}")


def load_design(path: str) -> Design:
    # header=None keeps duplicate compound ids visible instead of mangled
    raw = read_csv_robust(path, header=None)
    if raw.shape[0] < 2 or raw.shape[1] < 2:
        raise DesignError(f"{path}: a design needs a header and at least one well and one compound")

    raw = raw.fillna("")
    header = [str(v).strip() for v in raw.iloc[0]]
    if header[0] != "well_id":
        raise DesignError(f"{path}: first header cell must be 'well_id', got '{header[0]}'")
    compound_ids = header[1:]
    if any(c == "" for c in compound_ids):
        raise DesignError(f"{path}: empty compound id in header")
    duplicates = sorted({c for c in compound_ids if compound_ids.count(c) > 1})
    if duplicates:
        raise DesignError(f"{path}: duplicate compound ids {duplicates}")

    body = raw.iloc[1:].apply(lambda col: col.str.strip())
    well_ids = list(body.iloc[:, 0])
    dup_wells = sorted({w for w in well_ids if well_ids.count(w) > 1})
    if dup_wells:
        raise DesignError(f"{path}: duplicate well ids {dup_wells}")

    cells = body.iloc[:, 1:].to_numpy()
    for row_idx, row in enumerate(cells):
        line = row_idx + 2
        if any(v == "" for v in row):
            raise DesignError(f"{path}: ragged row at line {line} (well '{well_ids[row_idx]}')")
        for col_idx, value in enumerate(row):
            if value not in ("0", "1"):
                raise DesignError(
                    f"{path}: non-binary cell '{value}' at line {line}, "
                    f"well '{well_ids[row_idx]}', compound '{compound_ids[col_idx]}'"
                )
    membership = (cells == "1").astype(np.uint8)
    return Design(membership, compound_ids, well_ids, spec=None, provenance={"source": path})


@dataclass
class PlateReadings:
    plate_id: str
    assay: str
    design: Design
    pool_values: np.ndarray
    controls: pd.DataFrame = field(repr=False)
    centering_shift: float = 0.0

    @property
    def y(self) -> np.ndarray:
        return self.pool_values

    def control_values(self, role: str) -> np.ndarray:
        return self.controls.loc[self.controls["role"] == role, "value"].to_numpy(dtype=float)

    def median_centered(self) -> "PlateReadings":
        shift = float(np.median(self.pool_values))
        controls = self.controls.copy()
        controls["value"] = controls["value"] - shift
        return replace(self, pool_values=self.pool_values - shift, controls=controls,
                       centering_shift=self.centering_shift + shift)

    def summary(self) -> dict:
        out = {
            "plate_id": self.plate_id,
            "assay": self.assay,
            "pool_wells": int(len(self.pool_values)),
            "pool_median": float(np.median(self.pool_values)),
            "centering_shift": self.centering_shift,
        }
        for role in ROLES[1:]:
            values = self.control_values(role)
            out[f"{role}_wells"] = int(len(values))
            out[f"{role}_median"] = float(np.median(values)) if len(values) else None
        return out


def load_plate(path: str, design: Design, plate_id: Optional[str] = None, median_center: bool = False) -> PlateReadings:
    """
    Reads a `well_id,value,role,assay` plate. Pool wells are aligned to the
    design's rows; control wells are kept for reporting only.
    """
    frame = read_csv_robust(path)
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    missing = [c for c in PLATE_COLUMNS if c not in frame.columns]
    if missing:
        raise PlateFormatError(f"{path}: missing column(s) {missing}; expected header {','.join(PLATE_COLUMNS)}")
    frame = frame[PLATE_COLUMNS].fillna("").apply(lambda col: col.str.strip())

    values = pd.to_numeric(frame["value"], errors="coerce")
    bad = np.flatnonzero(values.isna().to_numpy() | ~np.isfinite(values.fillna(0).to_numpy(dtype=float)))
    if len(bad):
        i = int(bad[0])
        raise PlateFormatError(f"{path}: non-numeric value '{frame['value'].iloc[i]}' at line {i + 2}")
    frame["value"] = values.astype(float)

    duplicated = frame.loc[frame["well_id"].duplicated(), "well_id"].unique().tolist()
    if duplicated:
        raise PlateFormatError(f"{path}: duplicate well_id {duplicated}")

    frame["role"] = frame["role"].str.lower()
    bad_roles = sorted(set(frame["role"]) - set(ROLES))
    if bad_roles:
        raise PlateFormatError(f"{path}: unknown role(s) {bad_roles}; expected one of {ROLES}")

    assays = sorted(set(frame["assay"].str.upper()))
    if len(assays) != 1 or assays[0] not in ASSAYS:
        raise PlateFormatError(f"{path}: a plate holds exactly one assay of {ASSAYS}, found {assays}")

    pools = frame[frame["role"] == "pool"].set_index("well_id")
    design_wells = set(design.well_ids)
    unknown = [w for w in pools.index if w not in design_wells]
    if unknown:
        raise PlateFormatError(f"{path}: pool well(s) not in the design: {unknown}")
    absent = [w for w in design.well_ids if w not in pools.index]
    if absent:
        raise PlateFormatError(f"{path}: design well(s) without a pool reading: {absent}")

    controls = frame[frame["role"] != "pool"][["well_id", "value", "role"]].reset_index(drop=True)
    readings = PlateReadings(
        plate_id=plate_id or os.path.splitext(os.path.basename(path))[0],
        assay=assays[0],
        design=design,
        pool_values=pools.loc[design.well_ids, "value"].to_numpy(dtype=float),
        controls=controls,
    )
    logger.debug(f"Plate {readings.plate_id} ({readings.assay}): {design.n} pool wells, {len(controls)} controls")
    return readings.median_centered() if median_center else readings


def write_plate(path: str, frame: pd.DataFrame):
    """Writes a plate frame with the standard header."""
    missing: List[str] = [c for c in PLATE_COLUMNS if c not in frame.columns]
    if missing:
        raise PlateFormatError(f"Plate frame lacks column(s) {missing}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame[PLATE_COLUMNS].to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
