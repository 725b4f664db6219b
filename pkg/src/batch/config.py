import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from src.core.designs import DesignSpec
from src.core.errors import ConfigError
from src.core.screening import HEADLINE_METHODS, AnalysisConfig, comparison_methods
from src.core.secondary import SecondaryCriterion

logger = logging.getLogger(__name__)

# ---------------------------
# Utilidades de codificación
# ---------------------------

COMMON_ENCODINGS = ["utf-8", "utf-8-sig", "cp1252", "latin-1"]


def load_json_with_fallback(path: str, preferred: Optional[str] = None) -> Dict:
    """
    Carga JSON probando varias codificaciones comunes.
    Si preferred no funciona, cae a otras.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    encodings = [preferred] if preferred else []
    encodings.extend([e for e in COMMON_ENCODINGS if e not in encodings])

    tried: List[str] = []
    for enc in encodings:
        try:
            with open(path, "r", encoding=enc) as f:
                return json.load(f)
        except UnicodeDecodeError:
            tried.append(enc)
            continue
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}")
    raise ConfigError(f"Could not decode config file {path}. Tried encodings: {tried}")


# ---------------------------
# Estudio de simulación
# ---------------------------

@dataclass
class DesignEntry:
    name: str
    spec: Optional[DesignSpec] = None
    path: Optional[str] = None


@dataclass
class MethodEntry:
    name: str
    analysis: AnalysisConfig
    secondary: Optional[SecondaryCriterion] = None


@dataclass
class StudyConfig:
    seed: int
    replicates: int
    sigma: float
    designs: List[DesignEntry]
    betas: List[float]
    methods: List[MethodEntry]
    workers: int = 0
    output_prefix: str = "study"
    source: Optional[str] = None
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)


def _design_entry(entry: Dict[str, Any], idx: int, base_dir: str) -> DesignEntry:
    name = entry.get("name") or f"design_{idx + 1}"
    if "path" in entry:
        path = entry["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return DesignEntry(name, path=path)
    if "spec" in entry:
        try:
            return DesignEntry(name, spec=DesignSpec(**entry["spec"]))
        except TypeError as e:
            raise ConfigError(f"Design '{name}': invalid spec fields ({e})")
    raise ConfigError(f"Design '{name}' needs either an inline 'spec' or a CSV 'path'")


def _secondary_block(block: Optional[Dict[str, Any]], effect_sign: str) -> Optional[SecondaryCriterion]:
    if not block:
        return None
    values = {"effect_sign": effect_sign, **block}
    try:
        return SecondaryCriterion(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid secondary block {block}: {e}")


def _method_entries(raw_methods: List[Dict[str, Any]], defaults: Dict[str, Any], sigma: float) -> List[MethodEntry]:
    entries: List[MethodEntry] = []
    for idx, raw in enumerate(raw_methods):
        raw = dict(raw)
        preset = raw.pop("preset", None)
        secondary = raw.pop("secondary", None)
        effect_sign = raw.get("effect_sign", defaults.get("effect_sign", "positive"))

        if preset in ("all", "headline"):
            presets = comparison_methods(sigma=sigma, effect_sign=effect_sign)
            names = list(presets) if preset == "all" else [n for n in HEADLINE_METHODS if n in presets]
            for name in names:
                entries.append(MethodEntry(name, presets[name], _secondary_block(secondary, effect_sign)))
            continue
        if preset is not None:
            raise ConfigError(f"Unknown method preset '{preset}' (expected 'all' or 'headline')")

        name = raw.pop("name", None)
        settings = {**defaults, **raw}
        if settings.get("threshold_kind") == "sigma_fraction" and settings.get("sigma") is None:
            settings["sigma"] = sigma
        analysis = AnalysisConfig.from_dict(settings)
        entries.append(MethodEntry(name or analysis.tag, analysis, _secondary_block(secondary, analysis.effect_sign)))

    names = [m.name for m in entries]
    duplicated = sorted({n for n in names if names.count(n) > 1})
    if duplicated:
        raise ConfigError(f"Duplicate method names in study config: {duplicated}")
    return entries


def parse_study_config(raw: Dict[str, Any], base_dir: str = ".") -> StudyConfig:
    required = ["designs", "betas", "methods"]
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"Study config is missing {missing}")

    seed = int(raw.get("seed", 0))
    replicates = int(raw.get("replicates", 100))
    sigma = float(raw.get("sigma", 1.0))
    if replicates < 1:
        raise ConfigError(f"replicates must be >= 1, got {replicates}")
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")

    designs = [_design_entry(d, i, base_dir) for i, d in enumerate(raw["designs"])]
    design_names = [d.name for d in designs]
    if len(set(design_names)) != len(design_names):
        raise ConfigError(f"Duplicate design names: {design_names}")

    betas = [float(b) for b in raw["betas"]]
    if not betas:
        raise ConfigError("Study config lists no betas")
    defaults = dict(raw.get("default_method_settings", {}))
    methods = _method_entries(raw["methods"], defaults, sigma)
    if not methods:
        raise ConfigError("Study config lists no methods")

    return StudyConfig(
        seed=seed,
        replicates=replicates,
        sigma=sigma,
        designs=designs,
        betas=betas,
        methods=methods,
        workers=int(raw.get("workers", 0)),
        output_prefix=str(raw.get("output_prefix", "study")),
        raw=raw,
    )


def load_study_config(path: str) -> StudyConfig:
    config = parse_study_config(load_json_with_fallback(path), os.path.dirname(os.path.abspath(path)))
    config.source = path
    return config


# ---------------------------
# Campaña de placas
# ---------------------------

@dataclass
class PlateSettings:
    analysis: AnalysisConfig
    secondary: Optional[SecondaryCriterion]
    profile_top: int
    median_center: bool
    # known-mode reference level and scale
    secondary_mu: Optional[float] = None
    secondary_sigma: Optional[float] = None


def resolve_plate_settings(filename: str, config: Optional[Dict[str, Any]],
                           cli_overrides: Optional[Dict[str, Any]] = None) -> PlateSettings:
    """
    Resuelve la configuración de análisis para una placa concreta.
    Prioridad: 1. Regla por patrón -> 2. Defaults del config -> 3. CLI -> 4. Defaults del sistema.
    """
    cli_overrides = cli_overrides or {}
    config = config or {}

    analysis = dict(cli_overrides.get("analysis", {}))
    secondary = cli_overrides.get("secondary")
    profile_top = cli_overrides.get("profile_top", 10)
    median_center = cli_overrides.get("median_center", False)

    analysis.update(config.get("analysis", {}))
    if "secondary" in config:
        secondary = config["secondary"]
    profile_top = config.get("profile_top", profile_top)
    median_center = config.get("median_center", median_center)

    for rule in config.get("rules", []):
        pattern = rule.get("pattern", "")
        if pattern and filename.startswith(pattern):
            analysis.update(rule.get("analysis", {}))
            if "secondary" in rule:
                secondary = rule["secondary"]
            profile_top = rule.get("profile_top", profile_top)
            median_center = rule.get("median_center", median_center)
            break

    analysis.setdefault("effect_sign", "negative")
    resolved = AnalysisConfig.from_dict(analysis)
    secondary = dict(secondary) if secondary else None
    mu = secondary.pop("mu", None) if secondary else None
    sigma = secondary.pop("sigma", None) if secondary else None
    criterion = _secondary_block(secondary, resolved.effect_sign)
    if criterion is not None and criterion.sigma_mode == "known" and (mu is None or sigma is None):
        raise ConfigError("A known-mode secondary criterion needs 'mu' and 'sigma' in its block")
    if int(profile_top) < 0:
        raise ConfigError(f"profile_top must be >= 0, got {profile_top}")
    return PlateSettings(resolved, criterion, int(profile_top), bool(median_center),
                         None if mu is None else float(mu), None if sigma is None else float(sigma))
