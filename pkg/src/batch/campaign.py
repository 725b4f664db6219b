import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import pandas as pd
from joblib import Parallel, delayed

from src.batch.config import PlateSettings, load_json_with_fallback, resolve_plate_settings
from src.batch.execution_log import execution_log
from src.core.designs import Design
from src.core.errors import PoolScreenError
from src.core.plates import load_design, load_plate
from src.core.screening import HitList, dual_assay_hits, prepare_analysis, run_analysis
from src.core.secondary import secondary_count_table, secondary_filter_known, secondary_filter_robust
from src.core.workers import resolve_n_jobs
from src.reporting.excel_reporter import generate_campaign_workbook
from src.reporting.json_reporter import save_json_report
from src.reporting.profile_exporter import emit_profile

logger = logging.getLogger(__name__)

PLATE_EXTENSIONS = (".csv", ".txt")
LASSO_METHODS = ("gauss_lasso", "lambda_gl", "nonneg_gauss_lasso")


@dataclass
class PlateResult:
    plate_id: str
    status: str
    compounds: int = 0
    wt: Optional[HitList] = None
    mut: Optional[HitList] = None
    dual: Optional[HitList] = None
    secondary: Optional[HitList] = None
    counts: List[Dict[str, Any]] = field(default_factory=list)
    controls: Dict[str, Any] = field(default_factory=dict)
    profiles: List[str] = field(default_factory=list)
    notes: str = ""
    duration: float = 0.0

    @property
    def final_hits(self) -> List[str]:
        if self.secondary is not None:
            return list(self.secondary.hits)
        return list(self.dual.hits) if self.dual is not None else []


def analyze_plate_pair(design: Design, plate_id: str, wt_path: str, mut_path: str, settings: PlateSettings,
                       details_dir: Optional[str] = None) -> PlateResult:
    """WT and MUT analyses of one plate, their reconciliation and the optional secondary filter."""
    start = time.time()
    result = PlateResult(plate_id, "OK", compounds=design.k)
    try:
        wt = load_plate(wt_path, design, plate_id, settings.median_center)
        mut = load_plate(mut_path, design, plate_id, settings.median_center)
        if wt.assay != "WT" or mut.assay != "MUT":
            raise PoolScreenError(f"expected WT and MUT readings, got {wt.assay} and {mut.assay}")
        result.controls = {"WT": wt.summary(), "MUT": mut.summary()}

        prepared = {"WT": prepare_analysis(design, wt.y), "MUT": prepare_analysis(design, mut.y)}
        result.wt = run_analysis(prepared["WT"], settings.analysis)
        result.mut = run_analysis(prepared["MUT"], settings.analysis)
        result.dual = dual_assay_hits(result.wt, result.mut)

        crit = settings.secondary
        if crit is not None:
            if crit.sigma_mode == "known":
                result.secondary = secondary_filter_known(design, wt.y, result.dual, settings.secondary_mu,
                                                          settings.secondary_sigma, crit)
            else:
                result.secondary = secondary_filter_robust(design, wt.y, result.dual, crit)
            table = secondary_count_table(
                design, wt.y, result.dual.hits, crit.effect_sign,
                mu=settings.secondary_mu, sigma=settings.secondary_sigma,
                min_reference_wells=crit.min_reference_wells,
            )
            result.counts = table.to_dict(orient="records")

        if details_dir and settings.analysis.method in LASSO_METHODS:
            nonneg = settings.analysis.method == "nonneg_gauss_lasso"
            for assay in ("WT", "MUT"):
                path = prepared[assay].path(nonneg=nonneg)
                target = os.path.join(details_dir, f"{plate_id}_{assay}_profile.csv")
                emit_profile(path, design.compound_ids, min(settings.profile_top, design.k), target)
                result.profiles.append(os.path.basename(target))
    except PoolScreenError as e:
        result.status = "ERROR"
        result.notes = f"{type(e).__name__}: {e}"
    result.duration = round(time.time() - start, 4)
    return result


def _hit_list_block(hits: Optional[HitList]) -> Optional[Dict[str, Any]]:
    return hits.to_dict() if hits is not None else None


def report_campaign(results: List[PlateResult]) -> Dict[str, Any]:
    """Per-plate hit lists plus campaign totals (compounds studied, hits, hit rate)."""
    plates = []
    analyzed = [r for r in results if r.status == "OK"]
    for r in results:
        plates.append({
            "plate_id": r.plate_id,
            "status": r.status,
            "notes": r.notes,
            "compounds": r.compounds if r.status == "OK" else 0,
            "wt": _hit_list_block(r.wt),
            "mut": _hit_list_block(r.mut),
            "candidates": list(r.dual.hits) if r.dual else [],
            "pseudo_hits": list(r.dual.pseudo_hits) if r.dual else [],
            "secondary": _hit_list_block(r.secondary),
            "secondary_counts": r.counts,
            "final_hits": r.final_hits,
            "controls": r.controls,
            "profiles": r.profiles,
        })

    compounds = sum(r.compounds for r in analyzed)
    hits = sum(len(r.final_hits) for r in analyzed)
    rate = hits / compounds if compounds else 0.0
    totals = {
        "plates": len(results),
        "plates_analyzed": len(analyzed),
        "plates_skipped": len(results) - len(analyzed),
        "compounds_studied": compounds,
        "candidates": sum(len(r.dual.hits) for r in analyzed),
        "pseudo_hits": sum(len(r.dual.pseudo_hits) for r in analyzed),
        "hits": hits,
        "hit_rate": rate,
        "hit_rate_percent": f"{100 * rate:.1f}%",
    }
    return {"plates": plates, "totals": totals}


class CampaignOrchestrator:
    def __init__(self, design_path: str, wt_dir: str, mut_dir: str, output_dir: str,
                 config_file: Optional[str] = None, cli_overrides: Optional[Dict[str, Any]] = None,
                 n_jobs: Optional[int] = None):
        self.design_path = design_path
        self.wt_dir = wt_dir
        self.mut_dir = mut_dir
        self.output_dir = output_dir
        self.config_file = config_file
        self.config = load_json_with_fallback(config_file) if config_file else {}
        self.cli_overrides = cli_overrides or {}
        self.n_jobs = resolve_n_jobs(n_jobs)
        self.details_dir = os.path.join(self.output_dir, "details")
        os.makedirs(self.details_dir, exist_ok=True)
        self.log_file = os.path.join(self.output_dir, "execution.log")

    def _list_plates(self, directory: str) -> List[str]:
        return sorted(f for f in os.listdir(directory) if f.lower().endswith(PLATE_EXTENSIONS))

    def run(self) -> Dict[str, Any]:
        with execution_log(self.log_file):
            return self._run()

    def _run(self) -> Dict[str, Any]:
        logger.info(f"Campaign started. WT: {self.wt_dir} | MUT: {self.mut_dir} | Config: {self.config_file}")
        design = load_design(self.design_path)
        files_wt = self._list_plates(self.wt_dir)
        files_mut = set(self._list_plates(self.mut_dir))
        logger.info(f"Found {len(files_wt)} WT plate(s) and {len(files_mut)} MUT plate(s).")

        results: Dict[str, PlateResult] = {}
        tasks = []
        for filename in files_wt:
            plate_id = os.path.splitext(filename)[0]
            if filename not in files_mut:
                logger.warning(f"  [MISSING_MUT] {filename}: no MUT readings, plate skipped")
                results[filename] = PlateResult(plate_id, "MISSING_MUT", notes="MUT assay file not found")
                continue
            try:
                settings = resolve_plate_settings(filename, self.config, self.cli_overrides)
            except PoolScreenError as e:
                logger.error(f"  [ERROR] {filename}: {e}")
                results[filename] = PlateResult(plate_id, "ERROR", notes=str(e))
                continue
            tasks.append((filename, plate_id, settings))

        for filename in sorted(files_mut - set(files_wt)):
            logger.warning(f"  [MISSING_WT] {filename}: no WT readings, plate skipped")
            results[filename] = PlateResult(os.path.splitext(filename)[0], "MISSING_WT",
                                            notes="WT assay file not found")

        analyzed = Parallel(n_jobs=self.n_jobs)(
            delayed(analyze_plate_pair)(design, plate_id, os.path.join(self.wt_dir, filename),
                                        os.path.join(self.mut_dir, filename), settings, self.details_dir)
            for filename, plate_id, settings in tasks
        )
        for (filename, _, settings), result in zip(tasks, analyzed):
            results[filename] = result
            if result.status == "OK":
                logger.info(f"  [OK] {result.plate_id} ({settings.analysis.tag}): WT {len(result.wt.hits)}, "
                            f"MUT {len(result.mut.hits)}, candidates {len(result.dual.hits)}, "
                            f"final {len(result.final_hits)} ({result.duration}s)")
            else:
                logger.error(f"  [ERROR] {result.plate_id}: {result.notes}")

        ordered = [results[f] for f in sorted(results)]
        report = report_campaign(ordered)
        report["design"] = {"path": self.design_path, "wells": design.n, "compounds": design.k}
        save_json_report(report, os.path.join(self.output_dir, "campaign.json"))
        self._write_workbook(report)
        totals = report["totals"]
        logger.info(f"Campaign completed: {totals['hits']} hit(s) among {totals['compounds_studied']} "
                    f"compounds ({totals['hit_rate_percent']}).")
        return report

    def _write_workbook(self, report: Dict[str, Any]):
        plate_rows, hit_rows = [], []
        for plate in report["plates"]:
            plate_rows.append({
                "plate_id": plate["plate_id"],
                "status": plate["status"],
                "compounds": plate["compounds"],
                "wt_hits": len(plate["wt"]["hits"]) if plate["wt"] else 0,
                "mut_hits": len(plate["mut"]["hits"]) if plate["mut"] else 0,
                "candidates": len(plate["candidates"]),
                "pseudo_hits": len(plate["pseudo_hits"]),
                "final_hits": len(plate["final_hits"]),
                "notes": plate["notes"],
            })
            final = set(plate["final_hits"])
            estimates = plate["wt"]["per_compound"] if plate["wt"] else {}
            for compound in plate["candidates"]:
                hit_rows.append({"plate_id": plate["plate_id"], "compound_id": compound,
                                 "status": "HIT" if compound in final else "FILTERED",
                                 "estimate": estimates.get(compound, {}).get("estimate")})
            for compound in plate["pseudo_hits"]:
                hit_rows.append({"plate_id": plate["plate_id"], "compound_id": compound, "status": "PSEUDO_HIT",
                                 "estimate": estimates.get(compound, {}).get("estimate")})
        hits = pd.DataFrame(hit_rows, columns=["plate_id", "compound_id", "status", "estimate"])
        generate_campaign_workbook(pd.DataFrame(plate_rows), hits, report["totals"],
                                   os.path.join(self.output_dir, "campaign_report.xlsx"))
