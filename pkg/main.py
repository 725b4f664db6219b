import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from src.batch.campaign import LASSO_METHODS, CampaignOrchestrator
from src.batch.study import run_study_file
from src.core.designs import METHODS, DesignSpec, construct_design, validate_design
from src.core.errors import ConfigError, PoolScreenError
from src.core.plates import load_design, load_plate, save_design
from src.core.screening import (
    METHOD_ALIASES,
    THRESHOLD_KINDS,
    AnalysisConfig,
    dual_assay_hits,
    prepare_analysis,
    run_analysis,
)
from src.core.secondary import SecondaryCriterion, secondary_filter_known, secondary_filter_robust
from src.reporting.console_reporter import (
    print_criterion_report,
    print_hit_list,
    print_study_summary,
    report_failure,
)
from src.reporting.json_reporter import save_json_report, to_jsonable
from src.reporting.profile_exporter import emit_profile

logger = logging.getLogger(__name__)

SIGN_ALIASES = {"pos": "positive", "positive": "positive", "neg": "negative", "negative": "negative"}


def setup_logging(log_file: Optional[str] = None, verbose: int = 0):
    """Console logging goes to stderr (WARNING by default, -v INFO, -vv DEBUG)."""
    formatter = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s")
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG)
    console.setFormatter(formatter)
    handlers: List[logging.Handler] = [console]
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)
    logging.basicConfig(level=logging.DEBUG if verbose >= 2 else logging.INFO, handlers=handlers, force=True)


# ---------------------------
# Subcommands
# ---------------------------

def cmd_design(args) -> int:
    spec = DesignSpec(
        n=args.wells,
        k=args.compounds,
        c_max=args.pool_size,
        method=args.method,
        a_min=args.a_min,
        seed=args.seed,
        budget=args.budget,
        budget_unit=args.budget_unit,
        restarts=args.restarts,
    )
    design = construct_design(spec, n_jobs=args.workers)
    report = validate_design(design, spec)
    save_design(design, args.output)

    provenance = {k: v for k, v in design.provenance.items() if k != "trace"}
    meta_path = os.path.splitext(args.output)[0] + ".meta.json"
    save_json_report({"spec": spec.to_dict(), "provenance": provenance, "criteria": report.to_dict()}, meta_path)
    print(f"Design written to {args.output}")
    print_criterion_report(report)
    return 0


def cmd_evaluate(args) -> int:
    design = load_design(args.design)
    spec = None
    if args.pool_size is not None:
        spec = DesignSpec(n=design.n, k=design.k, c_max=args.pool_size, method=args.method, a_min=args.a_min)
    report = validate_design(design, spec)
    print(json.dumps(to_jsonable(report.to_dict()), indent=4, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    result = run_study_file(args.config, args.output, n_jobs=args.workers)
    print_study_summary(result.summary)
    print(f"\nStudy outputs written to {result.output_dir}")
    return 0


def _parse_sigma_mode(text: str):
    """'robust' or 'known:MU,SIGMA' -> (mode, mu, sigma)."""
    if text == "robust":
        return "robust", None, None
    if text.startswith("known:"):
        try:
            mu, sigma = (float(v) for v in text[len("known:"):].split(","))
        except ValueError:
            raise ConfigError(f"--sigma-mode known needs 'known:MU,SIGMA', got '{text}'")
        return "known", mu, sigma
    raise ConfigError(f"--sigma-mode must be 'robust' or 'known:MU,SIGMA', got '{text}'")


def _analysis_settings(args) -> Dict[str, Any]:
    method = METHOD_ALIASES.get(args.method, args.method)
    settings: Dict[str, Any] = {"method": method, "effect_sign": SIGN_ALIASES[args.sign]}
    if method == "lambda_gl":
        settings["threshold_kind"] = args.threshold_kind or "lambda_relative"
    elif method in ("gauss_lasso", "nonneg_gauss_lasso"):
        default_kind = "sigma_fraction" if args.sigma is not None else "max_beta0_fraction"
        settings["threshold_kind"] = args.threshold_kind or default_kind
        if args.sigma is not None:
            settings["sigma"] = args.sigma
    value = args.r if args.r is not None else args.threshold
    if value is not None:
        settings["threshold_value"] = value
    if args.permutations is not None:
        settings["n_permutations"] = args.permutations
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.workers is not None:
        settings["n_jobs"] = args.workers
    return settings


def _secondary(args, effect_sign: str):
    if not args.secondary:
        return None, None, None
    mode, mu, sigma = _parse_sigma_mode(args.sigma_mode)
    crit = SecondaryCriterion.parse(args.secondary, sigma_mode=mode, effect_sign=effect_sign)
    return crit, mu, sigma


def cmd_analyze(args) -> int:
    design = load_design(args.design)
    config = AnalysisConfig.from_dict(_analysis_settings(args))
    crit, mu, sigma = _secondary(args, config.effect_sign)
    if args.profile and config.method not in LASSO_METHODS:
        raise ConfigError("--profile is only available for lasso-based methods")

    wt = load_plate(args.readings, design, median_center=args.median_center)
    prepared = prepare_analysis(design, wt.y)
    primary = run_analysis(prepared, config)
    output: Dict[str, Any] = {
        "design": args.design,
        "method": config.tag,
        "settings": config.to_dict(),
        "readings": {wt.assay: wt.summary()},
        wt.assay: primary.to_dict(),
    }

    final = primary
    if args.readings2:
        mut = load_plate(args.readings2, design, median_center=args.median_center)
        other = run_analysis(prepare_analysis(design, mut.y), config)
        output["readings"][mut.assay] = mut.summary()
        output[mut.assay] = other.to_dict()
        final = dual_assay_hits(primary, other)
        output["candidates"] = list(final.hits)
        output["pseudo_hits"] = list(final.pseudo_hits)

    filtered = None
    if crit is not None:
        if crit.sigma_mode == "known":
            filtered = secondary_filter_known(design, wt.y, final, mu, sigma, crit)
        else:
            filtered = secondary_filter_robust(design, wt.y, final, crit)
        output["secondary"] = {"criterion": crit.to_dict(), "pre_filter": list(final.hits),
                               "post_filter": list(filtered.hits), "counts": filtered.details["counts"]}

    result = filtered or final
    output["hits"] = list(result.hits)
    output["diagnostics"] = list(result.diagnostics)
    output["lambda"] = primary.details.get("lambda")

    if args.profile:
        path = prepared.path(nonneg=config.method == "nonneg_gauss_lasso")
        export = emit_profile(path, design.compound_ids, min(args.top, design.k), args.profile)
        output["profile"] = {"path": export.profile_path, "annotations": export.annotations}

    if args.output:
        save_json_report(output, args.output)
    print_hit_list(final, filtered)
    return 0


def cmd_report(args) -> int:
    overrides: Dict[str, Any] = {"median_center": args.median_center, "profile_top": args.top}
    if args.method:
        overrides["analysis"] = _analysis_settings(args)
    if args.secondary:
        mode, mu, sigma = _parse_sigma_mode(args.sigma_mode)
        crit = SecondaryCriterion.parse(args.secondary, sigma_mode=mode)
        overrides["secondary"] = {"p_s": crit.p_s, "r": crit.r, "sigma_mode": mode,
                                  **({"mu": mu, "sigma": sigma} if mode == "known" else {})}
    orchestrator = CampaignOrchestrator(args.design, args.wt_dir, args.mut_dir, args.output,
                                        config_file=args.config, cli_overrides=overrides, n_jobs=args.workers)
    report = orchestrator.run()
    totals = report["totals"]
    print(f"\n[CAMPAIGN] {totals['plates_analyzed']}/{totals['plates']} plate(s) analyzed, "
          f"{totals['hits']} hit(s) among {totals['compounds_studied']} compounds ({totals['hit_rate_percent']}).")
    print(f"Campaign report written to {args.output}")
    return 0


# ---------------------------
# Parser
# ---------------------------

def _add_analysis_arguments(parser: argparse.ArgumentParser, method_required: bool):
    parser.add_argument("--method", required=method_required, default=None,
                        choices=sorted(METHOD_ALIASES) + sorted(METHOD_ALIASES.values()),
                        help="Analysis method")
    parser.add_argument("--r", type=float, default=None, help="lambda-specific threshold ratio r in (0, 1]")
    parser.add_argument("--threshold", type=float, default=None, help="Threshold fraction for Gauss-Lasso variants")
    parser.add_argument("--threshold-kind", choices=list(THRESHOLD_KINDS), default=None)
    parser.add_argument("--sigma", type=float, default=None, help="Known noise SD (sigma_fraction thresholds)")
    parser.add_argument("--sign", choices=sorted(SIGN_ALIASES), default="neg", help="Effect sign (default: neg)")
    parser.add_argument("--permutations", type=int, default=None, help="Elastic-net permutations")
    parser.add_argument("--seed", type=int, default=None, help="Seed for folds and permutations")
    parser.add_argument("--secondary", default=None, help="Secondary criterion P_S@R, e.g. 0.75@3sd")
    parser.add_argument("--sigma-mode", default="robust", help="robust | known:MU,SIGMA")
    parser.add_argument("--median-center", action="store_true", help="Median-center each assay before fitting")
    parser.add_argument("--top", type=int, default=10, help="Annotated compounds in profile exports")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poolscreen", description="Pooled high-throughput screening toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v INFO, -vv DEBUG")
    parser.add_argument("--log-file", default=None, help="Also write log records to this file")
    parser.add_argument("--workers", type=int, default=None,
                        help="Worker processes (capped by POOLSCREEN_THREADS; default all allowed)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="Construct a pooling design")
    p.add_argument("--method", choices=METHODS, default="crows")
    p.add_argument("--wells", type=int, required=True)
    p.add_argument("--compounds", type=int, required=True)
    p.add_argument("--pool-size", type=int, required=True)
    p.add_argument("--a-min", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=200_000)
    p.add_argument("--budget-unit", choices=["proposals", "seconds"], default="proposals")
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("-o", "--output", required=True, help="Design CSV path")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("evaluate", help="Evaluate the criteria of a design CSV")
    p.add_argument("design")
    p.add_argument("--pool-size", type=int, default=None, help="Check against this pool-size cap")
    p.add_argument("--method", choices=METHODS, default="crows")
    p.add_argument("--a-min", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="Run a simulation study")
    p.add_argument("--config", required=True, help="Study JSON configuration")
    p.add_argument("-o", "--output", default="results", help="Output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="Call hits on one plate (optionally WT and MUT)")
    p.add_argument("--design", required=True)
    p.add_argument("--readings", required=True, help="Plate CSV (well_id,value,role,assay)")
    p.add_argument("--readings2", default=None, help="Second assay of the same plate (MUT)")
    p.add_argument("--profile", default=None, help="Write the lasso profile CSV here")
    p.add_argument("-o", "--output", default=None, help="hits JSON path")
    _add_analysis_arguments(p, method_required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="Analyze a WT/MUT plate campaign")
    p.add_argument("--design", required=True)
    p.add_argument("--wt-dir", required=True)
    p.add_argument("--mut-dir", required=True)
    p.add_argument("--config", default=None, help="Campaign JSON configuration")
    p.add_argument("-o", "--output", default="results", help="Output directory")
    _add_analysis_arguments(p, method_required=False)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_file, args.verbose)
    try:
        return args.func(args)
    except PoolScreenError as e:
        return report_failure(e)


if __name__ == "__main__":
    sys.exit(main())
