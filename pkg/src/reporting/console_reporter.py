import sys
from typing import Optional

import pandas as pd

from src.core.designs import CriterionReport
from src.core.errors import PoolScreenError
from src.core.screening import HitList
from src.reporting.json_reporter import dumps_line


def print_criterion_report(report: CriterionReport):
    print(f"sqrt UE(s^2): {report.sqrt_ue_s2:.3f}")
    print(f"sqrt M:       {report.sqrt_m:.3f}")
    print(f"pool size c:  {report.c_min}/{report.c_max}")
    print(f"replication:  {report.a_min}/{report.a_max}")
    if report.violations:
        print("\n[FAIL] Constraint violations:")
        for violation in report.violations:
            print(f"  - {violation}")
    else:
        print("\n[OK] Design satisfies its constraints.")


def print_hit_list(hits: HitList, secondary: Optional[HitList] = None):
    print(f"\nMethod: {hits.method_tag}")
    if hits.hits:
        print(f"[HITS] {len(hits.hits)} compound(s):")
        for compound in hits.hits:
            estimate = hits.per_compound.get(compound, {}).get("estimate")
            print(f"  - {compound}" + (f" (estimate {estimate:.4g})" if estimate is not None else ""))
    else:
        print("[HITS] none")
    if hits.pseudo_hits:
        print(f"[PSEUDO] {len(hits.pseudo_hits)} compound(s) hit both assays: {', '.join(hits.pseudo_hits)}")
    if secondary is not None:
        print(f"[SECONDARY] {len(secondary.hits)} of {len(hits.hits)} kept: {', '.join(secondary.hits) or 'none'}")
    for note in (secondary or hits).diagnostics:
        print(f"  [NOTE] {note}")


def print_study_summary(summary: pd.DataFrame):
    if summary.empty:
        print("\n[WARNING] No condition finished successfully.")
        return
    print("\nMethod averages:")
    with pd.option_context("display.max_rows", None, "display.width", 160):
        print(summary.to_string(index=False))


def report_failure(error: Exception) -> int:
    """Writes the error as one JSON line to stderr and returns the exit code."""
    exit_code = error.exit_code if isinstance(error, PoolScreenError) else 1
    payload = {"error": type(error).__name__, "message": str(error), "exit_code": exit_code}
    sys.stderr.write(dumps_line(payload) + "\n")
    return exit_code
