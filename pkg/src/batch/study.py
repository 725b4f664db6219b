import dataclasses
import logging
import os
import platform
import time
from dataclasses import dataclass
from importlib import metadata
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.batch.config import MethodEntry, StudyConfig, load_study_config
from src.batch.execution_log import execution_log
from src.core.designs import Design, construct_design, validate_design
from src.core.errors import PoolScreenError
from src.core.plates import load_design
from src.core.screening import prepare_analysis, run_analysis
from src.core.secondary import secondary_filter_known, secondary_filter_robust
from src.core.simulation import (
    CENSORED_FPR,
    CENSORED_TPR,
    classification_metrics,
    condition_log_ratio,
    expected_false_positives,
    generate_scenario,
)
from src.core.workers import resolve_n_jobs
from src.reporting.excel_reporter import generate_study_workbook
from src.reporting.json_reporter import save_json_report

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
REFERENCE_SCREEN_SIZE = 10_000
CONDITION_KEYS = ["design", "k", "beta", "method"]
LONG_COLUMNS = ["design", "n", "k", "beta", "method", "replicate", "status", "tpr", "fpr",
                "true_positives", "false_positives", "hits", "notes"]


@dataclass
class StudyResult:
    conditions: pd.DataFrame
    summary: pd.DataFrame
    design_summary: pd.DataFrame
    long: pd.DataFrame
    output_dir: str
    seed: int


def _row(design_name: str, design: Design, beta: float, method: str, replicate: int) -> Dict[str, Any]:
    return {
        "design": design_name,
        "n": design.n,
        "k": design.k,
        "beta": beta,
        "method": method,
        "replicate": replicate,
        "status": "OK",
        "tpr": np.nan,
        "fpr": np.nan,
        "true_positives": np.nan,
        "false_positives": np.nan,
        "hits": np.nan,
        "notes": "",
    }


def _record(row: Dict[str, Any], hits, active: List[int], k: int):
    metrics = classification_metrics(hits.indices(), active, k)
    row.update(
        tpr=metrics.tpr,
        fpr=metrics.fpr,
        true_positives=metrics.true_positives,
        false_positives=metrics.false_positives,
        hits=len(hits.hits),
    )


def run_replicate(
    design_name: str,
    design: Design,
    beta: float,
    sigma: float,
    methods: List[MethodEntry],
    master_seed: int,
    scenario_index: int,
    replicate: int,
) -> List[Dict[str, Any]]:
    """
    One simulated response; every method is applied to the same draw and shares
    the fitted paths. Method failures are recorded in the rows, never raised.
    """
    seed = np.random.SeedSequence([master_seed, scenario_index, replicate])
    scenario = generate_scenario(design, beta, sigma, seed)
    analysis_seed = int(seed.generate_state(1, dtype=np.uint64)[0])
    prepared = prepare_analysis(design, scenario.y)
    two_replicate = bool(np.all(design.column_sums() == 2))

    rows: List[Dict[str, Any]] = []
    for entry in methods:
        row = _row(design_name, design, beta, entry.name, replicate)
        secondary_row = None
        if entry.secondary is not None:
            secondary_row = _row(design_name, design, beta, f"{entry.name} + {entry.secondary.label}", replicate)

        if entry.analysis.method == "orthogonal_pooling" and not two_replicate:
            for r in (row, secondary_row):
                if r is not None:
                    r.update(status="SKIPPED", notes="orthogonal pooling needs a two-replicate design")
            rows.extend(r for r in (row, secondary_row) if r is not None)
            continue

        try:
            config = dataclasses.replace(entry.analysis, seed=analysis_seed, n_jobs=1)
            hits = run_analysis(prepared, config)
            _record(row, hits, scenario.active_set, design.k)
            if hits.diagnostics:
                row["notes"] = "; ".join(hits.diagnostics)
        except PoolScreenError as e:
            row.update(status="ERROR", notes=f"{type(e).__name__}: {e}")
            hits = None
        rows.append(row)

        if secondary_row is not None:
            crit = entry.secondary
            try:
                if hits is None:
                    raise PoolScreenError("primary analysis failed")
                if crit.sigma_mode == "known":
                    # a well without active compounds reads -|A| * beta / 2
                    null_level = -len(scenario.active_set) * beta / 2.0
                    filtered = secondary_filter_known(design, scenario.y, hits, null_level, sigma, crit)
                else:
                    filtered = secondary_filter_robust(design, scenario.y, hits, crit)
                _record(secondary_row, filtered, scenario.active_set, design.k)
            except PoolScreenError as e:
                secondary_row.update(status="ERROR", notes=f"{type(e).__name__}: {e}")
            rows.append(secondary_row)
    return rows


def aggregate_conditions(long: pd.DataFrame, expected_replicates: int) -> pd.DataFrame:
    """Condition means from OK replicates; log-ratio from the means (or a censored marker)."""
    records = []
    for key, group in long.groupby(CONDITION_KEYS, sort=False, dropna=False):
        ok = group[group["status"] == "OK"]
        record = dict(zip(CONDITION_KEYS, key))
        record.update(
            n=group["n"].iloc[0],
            replicates=int(len(ok)),
            expected_replicates=expected_replicates,
            errors=int((group["status"] == "ERROR").sum()),
        )
        if len(ok) == 0:
            status = "SKIPPED" if (group["status"] == "SKIPPED").all() else "ERROR"
            notes = "; ".join(sorted(set(n for n in group["notes"] if n)))
            record.update(status=status, mean_tpr=np.nan, mean_fpr=np.nan, log_ratio="",
                          expected_fp_10k=np.nan, notes=notes)
        else:
            mean_tpr = float(ok["tpr"].mean())
            mean_fpr = float(ok["fpr"].mean())
            ratio = condition_log_ratio(mean_tpr, mean_fpr)
            record.update(
                status="OK",
                mean_tpr=mean_tpr,
                mean_fpr=mean_fpr,
                log_ratio=ratio if isinstance(ratio, str) else float(f"{ratio:.12g}"),
                expected_fp_10k=expected_false_positives(mean_fpr, REFERENCE_SCREEN_SIZE),
                notes="" if record["errors"] == 0 else f"{record['errors']} replicate(s) failed",
            )
        records.append(record)
    columns = CONDITION_KEYS + ["n", "status", "replicates", "expected_replicates", "errors",
                                "mean_tpr", "mean_fpr", "log_ratio", "expected_fp_10k", "notes"]
    return pd.DataFrame(records, columns=columns)


def _average_over(conditions: pd.DataFrame, by: List[str]) -> pd.DataFrame:
    records = []
    ok = conditions[conditions["status"] == "OK"]
    for key, group in ok.groupby(by, sort=False):
        key = key if isinstance(key, tuple) else (key,)
        numeric = pd.to_numeric(group["log_ratio"], errors="coerce").dropna()
        record = dict(zip(by, key))
        record.update(
            conditions=int(len(group)),
            censored=int(group["log_ratio"].isin([CENSORED_TPR, CENSORED_FPR]).sum()),
            mean_log_ratio=float(numeric.mean()) if len(numeric) else np.nan,
            mean_tpr=float(group["mean_tpr"].mean()),
            mean_fpr=float(group["mean_fpr"].mean()),
        )
        records.append(record)
    return pd.DataFrame(records, columns=by + ["conditions", "censored", "mean_log_ratio", "mean_tpr", "mean_fpr"])


def summarize_methods(conditions: pd.DataFrame) -> pd.DataFrame:
    """Per-method average of the condition log-ratios (censored conditions excluded and counted)."""
    return _average_over(conditions, ["method"])


def summarize_designs(conditions: pd.DataFrame) -> pd.DataFrame:
    return _average_over(conditions, ["design", "method"])


class StudyOrchestrator:
    def __init__(self, config: StudyConfig, output_dir: str, n_jobs: Optional[int] = None):
        self.config = config
        self.output_dir = output_dir
        self.n_jobs = resolve_n_jobs(n_jobs if n_jobs is not None else config.workers)
        self.designs: List[Tuple[str, Optional[Design]]] = []
        self.design_reports: Dict[str, Any] = {}
        os.makedirs(self.output_dir, exist_ok=True)
        self.log_file = os.path.join(self.output_dir, "execution.log")

    def _prefixed(self, name: str) -> str:
        prefix = self.config.output_prefix
        return os.path.join(self.output_dir, f"{prefix}_{name}" if prefix and prefix != "study" else name)

    def _build_designs(self):
        for entry in self.config.designs:
            start = time.time()
            try:
                if entry.spec is not None:
                    design = construct_design(entry.spec, n_jobs=self.n_jobs)
                    report = validate_design(design, entry.spec)
                else:
                    design = load_design(entry.path)
                    report = validate_design(design)
                self.designs.append((entry.name, design))
                self.design_reports[entry.name] = {"status": "OK", **report.to_dict()}
                logger.info(f"  [OK] Design {entry.name}: {design.n}x{design.k}, "
                            f"sqrt UE(s^2) = {report.sqrt_ue_s2:.3f} ({time.time() - start:.2f}s)")
            except PoolScreenError as e:
                self.designs.append((entry.name, None))
                self.design_reports[entry.name] = {"status": "ERROR", "error": f"{type(e).__name__}: {e}"}
                logger.error(f"  [ERROR] Design {entry.name}: {e}")

    def _failed_design_rows(self, name: str) -> List[Dict[str, Any]]:
        note = self.design_reports[name]["error"]
        rows = []
        for beta in self.config.betas:
            for entry in self.config.methods:
                names = [entry.name] + ([f"{entry.name} + {entry.secondary.label}"] if entry.secondary else [])
                for method in names:
                    rows.append({"design": name, "n": np.nan, "k": np.nan, "beta": beta, "method": method,
                                 "replicate": np.nan, "status": "ERROR", "notes": note})
        return rows

    def run(self) -> StudyResult:
        with execution_log(self.log_file):
            return self._run()

    def _run(self) -> StudyResult:
        started = time.time()
        cfg = self.config
        logger.info(f"Study started: seed={cfg.seed}, replicates={cfg.replicates}, workers={self.n_jobs}")
        self._build_designs()

        tasks = []
        failed_rows: List[Dict[str, Any]] = []
        for d_idx, (name, design) in enumerate(self.designs):
            if design is None:
                failed_rows.extend(self._failed_design_rows(name))
                continue
            for b_idx, beta in enumerate(cfg.betas):
                scenario_index = d_idx * len(cfg.betas) + b_idx
                for rep in range(cfg.replicates):
                    tasks.append((name, design, beta, scenario_index, rep))

        logger.info(f"Running {len(tasks)} replicate task(s) x {len(cfg.methods)} method(s)...")
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(run_replicate)(name, design, beta, cfg.sigma, cfg.methods, cfg.seed, scenario_index, rep)
            for name, design, beta, scenario_index, rep in tasks
        )
        rows = [row for block in results for row in block] + failed_rows
        long = pd.DataFrame(rows, columns=LONG_COLUMNS)
        conditions = aggregate_conditions(long, cfg.replicates)
        summary = summarize_methods(conditions)
        design_summary = summarize_designs(conditions)

        for _, c in conditions.iterrows():
            tag = f"[{c['status']}]"
            if c["status"] == "OK":
                logger.info(f"  {tag} {c['design']} beta={c['beta']:g} {c['method']}: "
                            f"TPR={c['mean_tpr']:.4f} FPR={c['mean_fpr']:.6f} log-ratio={c['log_ratio']}")
            else:
                logger.warning(f"  {tag} {c['design']} beta={c['beta']:g} {c['method']}: {c['notes']}")

        self._write_outputs(long, conditions, summary, design_summary, time.time() - started)
        logger.info(f"Study completed in {time.time() - started:.1f}s. Outputs in {self.output_dir}")
        return StudyResult(conditions, summary, design_summary, long, self.output_dir, cfg.seed)

    def _write_outputs(self, long, conditions, summary, design_summary, elapsed: float):
        csv_args = dict(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        long.to_csv(self._prefixed("long.csv"), **csv_args)
        conditions.to_csv(self._prefixed("conditions.csv"), **csv_args)
        summary.to_csv(self._prefixed("summary.csv"), **csv_args)
        design_summary.to_csv(self._prefixed("design_summary.csv"), **csv_args)

        packages = {}
        for package in ("numpy", "scipy", "pandas", "scikit-learn", "joblib", "openpyxl", "poolscreen"):
            try:
                packages[package] = metadata.version(package)
            except metadata.PackageNotFoundError:
                packages[package] = None
        meta = {
            "seed": self.config.seed,
            "replicates": self.config.replicates,
            "sigma": self.config.sigma,
            "workers": self.n_jobs,
            "config_file": self.config.source,
            "config": self.config.raw,
            "designs": self.design_reports,
            "methods": {m.name: {"analysis": m.analysis.to_dict(),
                                 "secondary": m.secondary.to_dict() if m.secondary else None}
                        for m in self.config.methods},
            "versions": {"python": platform.python_version(), **packages},
            "timing": {"elapsed_seconds": round(elapsed, 3)},
        }
        save_json_report(meta, self._prefixed("meta.json"))
        generate_study_workbook(summary, design_summary, conditions, self._prefixed("summary_report.xlsx"))


def run_study(config: StudyConfig, output_dir: str, n_jobs: Optional[int] = None) -> StudyResult:
    return StudyOrchestrator(config, output_dir, n_jobs).run()


def run_study_file(config_path: str, output_dir: str, n_jobs: Optional[int] = None) -> StudyResult:
    return run_study(load_study_config(config_path), output_dir, n_jobs)
