"""
Hit calling on pooled responses.

All lasso-based variants share one pipeline: fit the path on the prepared
data, screen each lambda's estimates by sign and threshold, refit every
surviving support by OLS and keep the minimum-BIC model. The variants only
differ in the path (plain or non-negative) and in how the threshold is formed.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.core.designs import Design
from src.core.errors import ConfigError, RankDeficiencyError, ValidationError
from src.core.regression import (
    ALPHA_GRID,
    CenteredData,
    ElasticNetFit,
    LambdaGrid,
    LassoPath,
    RefitModel,
    center_and_scale,
    compiled_elastic_net_path,
    elastic_net_cv,
    lasso_path,
    make_lambda_grid,
    ols_refit_bic,
)
from src.core.workers import resolve_n_jobs

logger = logging.getLogger(__name__)

ANALYSIS_METHODS = ("gauss_lasso", "lambda_gl", "nonneg_gauss_lasso", "elastic_net_perm", "orthogonal_pooling")
THRESHOLD_KINDS = ("sigma_fraction", "max_beta0_fraction", "lambda_relative", "wrong_sign_relative")
LAMBDA_THRESHOLD_KINDS = ("lambda_relative", "wrong_sign_relative")
EFFECT_SIGNS = ("positive", "negative")
MIN_RECOMMENDED_PERMUTATIONS = 100

# CLI spellings
METHOD_ALIASES = {
    "gauss-lasso": "gauss_lasso",
    "lambda-gl": "lambda_gl",
    "nonneg-gl": "nonneg_gauss_lasso",
    "elastic-net": "elastic_net_perm",
    "orthogonal": "orthogonal_pooling",
}


@dataclass(frozen=True)
class AnalysisConfig:
    method: str = "lambda_gl"
    threshold_kind: str = "lambda_relative"
    threshold_value: float = 1.0
    sigma: Optional[float] = None
    effect_sign: str = "positive"
    n_permutations: int = 1000
    p_cutoff: float = 0.05
    seed: int = 0
    alpha_grid: Tuple[float, ...] = ALPHA_GRID
    folds: int = 3
    percentile: float = 0.95
    n_jobs: int = 1

    def __post_init__(self):
        method = METHOD_ALIASES.get(self.method, self.method)
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if method not in ANALYSIS_METHODS:
            raise ConfigError(f"Unknown analysis method '{self.method}'. Expected one of {ANALYSIS_METHODS}")
        if self.threshold_kind not in THRESHOLD_KINDS:
            raise ConfigError(f"Unknown threshold kind '{self.threshold_kind}'. Expected one of {THRESHOLD_KINDS}")
        if self.effect_sign not in EFFECT_SIGNS:
            raise ConfigError(f"effect_sign must be one of {EFFECT_SIGNS}, got '{self.effect_sign}'")
        if not self.threshold_value > 0:
            raise ConfigError(f"threshold_value must be > 0, got {self.threshold_value}")

        if method in ("gauss_lasso", "nonneg_gauss_lasso"):
            if self.threshold_kind not in ("sigma_fraction", "max_beta0_fraction"):
                raise ConfigError(f"{method} needs threshold_kind sigma_fraction or max_beta0_fraction")
        if method == "lambda_gl":
            if self.threshold_kind not in LAMBDA_THRESHOLD_KINDS:
                raise ConfigError(f"lambda_gl needs threshold_kind in {LAMBDA_THRESHOLD_KINDS}")
            if self.threshold_value > 1:
                raise ConfigError(f"r must lie in (0, 1], got {self.threshold_value}")
        if method == "nonneg_gauss_lasso" and self.effect_sign != "positive":
            raise ConfigError("nonneg_gauss_lasso encodes a positive effect sign; use effect_sign 'positive'")

        uses_sigma = method in ("gauss_lasso", "nonneg_gauss_lasso") and self.threshold_kind == "sigma_fraction"
        if uses_sigma and (self.sigma is None or self.sigma <= 0):
            raise ConfigError("threshold_kind sigma_fraction requires a known sigma > 0")

        if not 0 < self.p_cutoff < 1:
            raise ConfigError(f"p_cutoff must lie in (0, 1), got {self.p_cutoff}")
        if self.n_permutations < 1:
            raise ConfigError(f"n_permutations must be >= 1, got {self.n_permutations}")
        if not 0 < self.percentile < 1:
            raise ConfigError(f"percentile must lie in (0, 1), got {self.percentile}")

    @property
    def sign(self) -> int:
        return 1 if self.effect_sign == "positive" else -1

    @property
    def tag(self) -> str:
        if self.method == "lambda_gl":
            if self.threshold_kind == "wrong_sign_relative":
                return f"lambda_gl(r={self.threshold_value:g}*max wrong-sign)"
            return f"lambda_gl(r={self.threshold_value:g})"
        if self.method in ("gauss_lasso", "nonneg_gauss_lasso"):
            if self.threshold_kind == "sigma_fraction":
                return f"{self.method}(tau={self.threshold_value:g}*sigma)"
            return f"{self.method}(tau={self.threshold_value:g}*max|b0|)"
        if self.method == "elastic_net_perm":
            return f"elastic_net_perm(p<={self.p_cutoff:g})"
        return f"orthogonal_pooling(q={self.percentile:g})"

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AnalysisConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown analysis settings: {unknown}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["alpha_grid"] = list(self.alpha_grid)
        return out


@dataclass
class HitList:
    hits: List[str]
    per_compound: Dict[str, Dict[str, Any]]
    method_tag: str
    compound_ids: List[str]
    diagnostics: List[str] = field(default_factory=list)
    pseudo_hits: List[str] = field(default_factory=list)
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        universe = set(self.compound_ids)
        outside = [h for h in self.hits if h not in universe]
        if outside:
            raise ValidationError(f"Hits outside the design: {outside}")
        order = {c: j for j, c in enumerate(self.compound_ids)}
        self.hits = sorted(set(self.hits), key=order.__getitem__)
        self.pseudo_hits = sorted(set(self.pseudo_hits), key=order.__getitem__)

    @property
    def hit_set(self) -> frozenset:
        return frozenset(self.hits)

    def indices(self) -> List[int]:
        order = {c: j for j, c in enumerate(self.compound_ids)}
        return [order[h] for h in self.hits]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method_tag,
            "hits": list(self.hits),
            "pseudo_hits": list(self.pseudo_hits),
            "per_compound": {c: self.per_compound[c] for c in self.hits + self.pseudo_hits if c in self.per_compound},
            "diagnostics": list(self.diagnostics),
            "details": self.details,
        }


class PreparedAnalysis:
    """
    Centered data, lambda grid, fitted paths and refits for one (design, y).
    Every variant run through the same instance reuses the cached fits.
    """

    def __init__(self, design: Design, y: np.ndarray):
        y = np.asarray(y, dtype=float)
        if y.ndim != 1 or len(y) != design.n:
            raise ValidationError(f"Response length {y.shape} does not match the design's {design.n} wells")
        if not np.all(np.isfinite(y)):
            raise ValidationError("Responses must be finite")
        self.design = design
        self.y = y
        self.X = design.x_matrix()
        self._data: Optional[CenteredData] = None
        self._grid: Optional[LambdaGrid] = None
        self._paths: Dict[bool, LassoPath] = {}
        self._refits: Dict[Tuple[int, ...], RefitModel] = {}
        self._enet: Dict[Tuple, ElasticNetFit] = {}

    @property
    def data(self) -> CenteredData:
        if self._data is None:
            self._data = center_and_scale(self.X, self.y, self.design.compound_ids)
        return self._data

    @property
    def grid(self) -> LambdaGrid:
        if self._grid is None:
            self._grid = make_lambda_grid(self.data)
        return self._grid

    def path(self, nonneg: bool = False) -> LassoPath:
        if nonneg not in self._paths:
            self._paths[nonneg] = lasso_path(self.data, self.grid, nonneg=nonneg)
        return self._paths[nonneg]

    def refit(self, support: Tuple[int, ...]) -> RefitModel:
        if support not in self._refits:
            self._refits[support] = ols_refit_bic(self.X, self.y, support)
        return self._refits[support]

    def elastic_net(self, config: AnalysisConfig) -> ElasticNetFit:
        key = (config.alpha_grid, config.folds, config.seed)
        if key not in self._enet:
            self._enet[key] = elastic_net_cv(
                self.X, self.y, alpha_grid=config.alpha_grid, folds=config.folds, seed=config.seed, data=self.data
            )
        return self._enet[key]


def prepare_analysis(design: Design, y: np.ndarray) -> PreparedAnalysis:
    return PreparedAnalysis(design, y)


def _prepared(design: Design, y: np.ndarray, prepared: Optional[PreparedAnalysis]) -> PreparedAnalysis:
    if prepared is not None:
        return prepared
    return prepare_analysis(design, y)


# ---------------------------
# Gauss-Lasso pipeline
# ---------------------------

def screen_estimates(estimates: np.ndarray, sign: int, tau: float) -> np.ndarray:
    """Indices whose estimate has the right sign and magnitude >= tau."""
    signed = sign * np.asarray(estimates)
    return np.flatnonzero((signed > 0) & (signed >= tau))


def lambda_relative_threshold(estimates: np.ndarray, sign: int, r: float) -> float:
    """r times the largest right-sign estimate; inf when no estimate has the right sign."""
    signed = sign * np.asarray(estimates)
    top = signed.max() if len(signed) else 0.0
    if top <= 0:
        return math.inf
    return r * float(top)


def wrong_sign_threshold(estimates: np.ndarray, sign: int, r: float) -> float:
    """r times the largest wrong-sign magnitude; 0 when every nonzero estimate has the right sign."""
    signed = sign * np.asarray(estimates)
    noise = -signed[signed < 0]
    return r * float(noise.max()) if len(noise) else 0.0


def _sign_consistent_refit(prepared: PreparedAnalysis, support: Tuple[int, ...], sign: int) -> RefitModel:
    current = support
    while True:
        model = prepared.refit(current)
        wrong = {j for j, b in zip(current, model.coefficients) if sign * b <= 0}
        if not wrong:
            return model
        current = tuple(j for j in current if j not in wrong)


def _gauss_lasso_select(
    prepared: PreparedAnalysis,
    path: LassoPath,
    threshold_at: Callable[[np.ndarray], float],
    sign: int,
    method_tag: str,
) -> HitList:
    n = prepared.design.n
    diagnostics: List[str] = []

    # support -> first (largest) lambda index producing it
    candidates: Dict[Tuple[int, ...], int] = {}
    for idx, estimates in enumerate(path.coefficients):
        support = tuple(int(j) for j in screen_estimates(estimates, sign, threshold_at(estimates)))
        candidates.setdefault(support, idx)

    oversized = 0
    best: Optional[Tuple[Tuple[float, int, int], RefitModel, int]] = None
    for support, idx in candidates.items():
        if len(support) > n - 2:
            oversized += 1
            continue
        try:
            model = _sign_consistent_refit(prepared, support, sign)
        except RankDeficiencyError as e:
            diagnostics.append(f"Support at log-lambda {path.grid.log_values[idx]:.2f} skipped: {e}")
            continue
        key = (model.bic, len(model.support), idx)
        if best is None or key < best[0]:
            best = (key, model, idx)

    if oversized:
        diagnostics.append(f"{oversized} candidate support(s) larger than n - 2 were skipped")
    if best is None:
        raise ValidationError(f"No admissible support for {method_tag}: every candidate exceeded n - 2 or was singular")

    _, model, idx = best
    lam = float(path.grid.lambdas[idx])
    ids = prepared.design.compound_ids
    per_compound = {
        ids[j]: {
            "estimate": float(b),
            "lasso_estimate": float(path.coefficients[idx, j]),
            "lambda": lam,
        }
        for j, b in zip(model.support, model.coefficients)
    }
    details = {
        "lambda": lam,
        "log_lambda": float(path.grid.log_values[idx]),
        "bic": float(model.bic),
        "rss": float(model.rss),
        "intercept": float(model.intercept),
        "candidates": len(candidates),
    }
    logger.debug(f"{method_tag}: {len(model.support)} hit(s) at log-lambda {details['log_lambda']:.2f}, BIC {model.bic:.4f}")
    return HitList([ids[j] for j in model.support], per_compound, method_tag, list(ids), diagnostics, details=details)


def _fixed_threshold(prepared: PreparedAnalysis, path: LassoPath, config: AnalysisConfig) -> float:
    if config.threshold_kind == "sigma_fraction":
        return config.sigma * config.threshold_value
    return config.threshold_value * float(np.max(np.abs(path.at_smallest_lambda()), initial=0.0))


def gauss_lasso(design: Design, y: np.ndarray, config: AnalysisConfig,
                prepared: Optional[PreparedAnalysis] = None) -> HitList:
    if config.method != "gauss_lasso":
        raise ConfigError(f"gauss_lasso called with method '{config.method}'")
    prepared = _prepared(design, y, prepared)
    path = prepared.path(nonneg=False)
    tau = _fixed_threshold(prepared, path, config)
    hits = _gauss_lasso_select(prepared, path, lambda _: tau, config.sign, config.tag)
    hits.details["tau"] = tau
    return hits


def lambda_specific_gauss_lasso(design: Design, y: np.ndarray, config: AnalysisConfig,
                                prepared: Optional[PreparedAnalysis] = None) -> HitList:
    if config.method != "lambda_gl":
        raise ConfigError(f"lambda_specific_gauss_lasso called with method '{config.method}'")
    prepared = _prepared(design, y, prepared)
    path = prepared.path(nonneg=False)
    r, sign = config.threshold_value, config.sign
    reference = wrong_sign_threshold if config.threshold_kind == "wrong_sign_relative" else lambda_relative_threshold
    return _gauss_lasso_select(prepared, path, lambda b: reference(b, sign, r), sign, config.tag)


def nonneg_gauss_lasso(design: Design, y: np.ndarray, config: AnalysisConfig,
                       prepared: Optional[PreparedAnalysis] = None) -> HitList:
    if config.method != "nonneg_gauss_lasso":
        raise ConfigError(f"nonneg_gauss_lasso called with method '{config.method}'")
    prepared = _prepared(design, y, prepared)
    path = prepared.path(nonneg=True)
    tau = _fixed_threshold(prepared, path, config)
    hits = _gauss_lasso_select(prepared, path, lambda _: tau, config.sign, config.tag)
    hits.details["tau"] = tau
    return hits


# ---------------------------
# Elastic net with permutations
# ---------------------------

def _permuted_coefficients(data: CenteredData, alpha: float, lam: float, seeds: Sequence[np.random.SeedSequence]) -> np.ndarray:
    out = np.zeros((len(seeds), data.k))
    for i, seed in enumerate(seeds):
        order = np.random.default_rng(seed).permutation(data.n)
        y_perm = data.y_c[order]
        scaled = compiled_elastic_net_path(data.X_cs, y_perm, [lam], alpha, data.gram, data.X_cs.T @ y_perm)[-1]
        out[i] = scaled / data.column_scales
    return out


def elastic_net_permutation(design: Design, y: np.ndarray, config: AnalysisConfig,
                            prepared: Optional[PreparedAnalysis] = None) -> HitList:
    """
    Cross-validated elastic net; p_k is the share of permuted-response refits whose
    |coefficient| exceeds the real one. Hits need a nonzero right-sign coefficient
    and p_k <= p_cutoff.
    """
    if config.method != "elastic_net_perm":
        raise ConfigError(f"elastic_net_permutation called with method '{config.method}'")
    prepared = _prepared(design, y, prepared)
    fit = prepared.elastic_net(config)
    data = prepared.data

    diagnostics = []
    if config.n_permutations < MIN_RECOMMENDED_PERMUTATIONS:
        diagnostics.append(
            f"WARNING: only {config.n_permutations} permutations (< {MIN_RECOMMENDED_PERMUTATIONS}); p-values are coarse"
        )

    # The winning alpha < 1 makes the objective strictly convex, so each permuted
    # fit is solved directly at the chosen lambda.
    seeds = np.random.SeedSequence([config.seed, 1]).spawn(config.n_permutations)
    n_jobs = resolve_n_jobs(config.n_jobs)
    if n_jobs == 1:
        permuted = _permuted_coefficients(data, fit.alpha, fit.lam, seeds)
    else:
        chunks = [c for c in np.array_split(np.arange(len(seeds)), max(1, min(len(seeds), 32))) if len(c)]
        blocks = Parallel(n_jobs=n_jobs)(
            delayed(_permuted_coefficients)(data, fit.alpha, fit.lam, [seeds[i] for i in chunk]) for chunk in chunks
        )
        permuted = np.vstack(blocks)

    real = fit.coefficients
    exceed = (np.abs(permuted) > np.abs(real)).sum(axis=0)
    p_values = exceed / config.n_permutations

    ids = design.compound_ids
    selected = np.flatnonzero((config.sign * real > 0) & (p_values <= config.p_cutoff))
    per_compound = {
        ids[j]: {"estimate": float(real[j]), "lambda": fit.lam, "alpha": fit.alpha, "p_value": float(p_values[j])}
        for j in selected
    }
    details = {
        "alpha": fit.alpha,
        "lambda": fit.lam,
        "cv_error": fit.cv_error,
        "intercept": fit.intercept,
        "n_permutations": config.n_permutations,
        "p_values": {ids[j]: float(p_values[j]) for j in np.flatnonzero(real)},
    }
    return HitList([ids[j] for j in selected], per_compound, config.tag, list(ids), diagnostics, details=details)


# ---------------------------
# Baseline and assay reconciliation
# ---------------------------

def orthogonal_pooling_detect(design: Design, y: np.ndarray, percentile: float = 0.95,
                              effect_sign: str = "positive") -> HitList:
    """Hit iff both wells holding the compound lie beyond the percentile of all wells."""
    y = np.asarray(y, dtype=float)
    if len(y) != design.n:
        raise ValidationError(f"Response length {len(y)} does not match the design's {design.n} wells")
    replication = design.column_sums()
    off = np.flatnonzero(replication != 2)
    if len(off):
        j = int(off[0])
        raise ValidationError(
            f"Orthogonal pooling needs every compound in exactly 2 wells; "
            f"'{design.compound_ids[j]}' is in {replication[j]}"
        )

    if effect_sign == "positive":
        cutoff = float(np.quantile(y, percentile))
        beyond = y > cutoff
    else:
        cutoff = float(np.quantile(y, 1.0 - percentile))
        beyond = y < cutoff

    ids = design.compound_ids
    per_compound = {}
    hits = []
    for j in range(design.k):
        wells = np.flatnonzero(design.membership[:, j])
        if beyond[wells].all():
            hits.append(ids[j])
            per_compound[ids[j]] = {"estimate": float(y[wells].mean()), "wells": [design.well_ids[i] for i in wells]}
    tag = f"orthogonal_pooling(q={percentile:g})"
    return HitList(hits, per_compound, tag, list(ids), details={"cutoff": cutoff})


def dual_assay_hits(wt: HitList, mut: HitList) -> HitList:
    """WT-only hits are candidates; hits shared with the mutant assay are pseudo-hits."""
    if list(wt.compound_ids) != list(mut.compound_ids):
        raise ValidationError("WT and MUT hit lists come from different compound universes")
    mut_hits = mut.hit_set
    candidates = [h for h in wt.hits if h not in mut_hits]
    pseudo = [h for h in wt.hits if h in mut_hits]
    per_compound = {h: wt.per_compound[h] for h in wt.hits if h in wt.per_compound}
    diagnostics = [f"WT: {d}" for d in wt.diagnostics] + [f"MUT: {d}" for d in mut.diagnostics]
    details = {"wt": wt.details, "mut": mut.details, "mut_hits": list(mut.hits)}
    return HitList(candidates, per_compound, f"{wt.method_tag} WT-only", list(wt.compound_ids), diagnostics,
                   pseudo_hits=pseudo, details=details)


def run_analysis(prepared: PreparedAnalysis, config: AnalysisConfig) -> HitList:
    design, y = prepared.design, prepared.y
    if config.method == "gauss_lasso":
        return gauss_lasso(design, y, config, prepared)
    if config.method == "lambda_gl":
        return lambda_specific_gauss_lasso(design, y, config, prepared)
    if config.method == "nonneg_gauss_lasso":
        return nonneg_gauss_lasso(design, y, config, prepared)
    if config.method == "elastic_net_perm":
        return elastic_net_permutation(design, y, config, prepared)
    return orthogonal_pooling_detect(design, y, config.percentile, config.effect_sign)


def analyze(design: Design, y: np.ndarray, config: AnalysisConfig) -> HitList:
    return run_analysis(prepare_analysis(design, y), config)


def comparison_methods(sigma: float = 1.0, effect_sign: str = "positive") -> Dict[str, AnalysisConfig]:
    """The thirteen compared variants keyed by a short label."""
    methods: Dict[str, AnalysisConfig] = {}
    families = [("GL", "gauss_lasso")]
    if effect_sign == "positive":
        families.append(("NNGL", "nonneg_gauss_lasso"))
    for label, method in families:
        for fraction, name in ((1 / 8, "sigma/8"), (1 / 4, "sigma/4")):
            methods[f"{label} tau={name}"] = AnalysisConfig(
                method, "sigma_fraction", fraction, sigma=sigma, effect_sign=effect_sign
            )
        for r1 in (0.1, 0.5):
            methods[f"{label} tau={r1:g}*max|b0|"] = AnalysisConfig(
                method, "max_beta0_fraction", r1, effect_sign=effect_sign
            )
    for r2 in (0.5, 0.7, 0.9, 1.0):
        methods[f"LSGL r={r2:g}"] = AnalysisConfig("lambda_gl", "lambda_relative", r2, effect_sign=effect_sign)
    methods["ENet"] = AnalysisConfig("elastic_net_perm", effect_sign=effect_sign)
    return methods


HEADLINE_METHODS = (
    "GL tau=sigma/4",
    "GL tau=0.5*max|b0|",
    "LSGL r=1",
    "NNGL tau=sigma/4",
    "NNGL tau=0.5*max|b0|",
    "ENet",
)
