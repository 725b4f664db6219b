import json
import logging
import math
import os
from dataclasses import asdict, is_dataclass
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

SIGNIFICANT_DIGITS = 12


def to_jsonable(value: Any) -> Any:
    """
    Converts results into plain JSON types with stable ordering.
    Floats are rounded to 12 significant digits; non-finite floats become null.
    """
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (set, frozenset)):
        return [to_jsonable(v) for v in sorted(value)]
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return value


def dumps_line(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))


def save_json_report(payload: Any, output_path: str) -> str:
    """
    Writes payload to exactly output_path (sorted keys, 4-space indent).
    Identical payloads produce identical bytes.
    """
    directory = os.path.dirname(os.path.abspath(output_path))
    os.makedirs(directory, exist_ok=True)
    with open(output_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(to_jsonable(payload), f, indent=4, sort_keys=True)
        f.write("\n")
    logger.info(f"JSON results saved to: {output_path}")
    return output_path
