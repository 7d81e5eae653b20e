"""Run configuration: JSON documents validated strictly against the
package defaults.

Unknown keys are rejected with their full dotted path, every field is
optional, and the normalized (defaults-merged) form is what runs are
reproduced from.
"""

from __future__ import annotations

import copy
import dataclasses
import json

from .errors import ConfigInvalid, ConfigValidation, SpecInvalid
from .hmm import HmmFitSpec
from .preprocess import FilterSpec, PreprocessConfig
from .smate import SmateConfig
from .synth import SynthSpec, default_profiles
from .xcm import XcmConfig

MODEL_NAMES = ("smate", "smate-unsup", "smate-ablated", "xcm", "hmm")
STAGE_NAMES = ("N1", "N2", "N3", "REM", "ALL")


def _dataclass_defaults(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            value = f.default
        else:
            value = f.default_factory()
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _defaults() -> dict:
    filter_defaults = _dataclass_defaults(FilterSpec)
    preprocess = _dataclass_defaults(PreprocessConfig,
                                     skip=("filter", "channel_order"))
    preprocess = {**filter_defaults, **preprocess}
    synth = _dataclass_defaults(SynthSpec, skip=("profiles",))
    synth["band_weight_gap"] = 0.3
    return {
        "seed": 0,
        "paths": {"corpus": None, "stores": None, "model": None},
        "synth": synth,
        "preprocess": preprocess,
        "model": {
            "smate": _dataclass_defaults(SmateConfig),
            "xcm": _dataclass_defaults(XcmConfig),
            "hmm": _dataclass_defaults(HmmFitSpec),
        },
        "eval": {
            "models": ["smate", "xcm", "hmm"],
            "stages": list(STAGE_NAMES),
            "subsample": None,
            "fractions": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            "sweep_stage": "ALL",
            "ablation_stage": "ALL",
            "ablation_seeds": [0, 1, 2, 3, 4],
            "alpha": 0.05,
            "tsne": {
                "perplexity": 30.0,
                "iterations": 1000,
                "learning_rate": 200.0,
                "stage": "ALL",
                "max_points": 600,
            },
        },
    }


DEFAULTS = _defaults()

# fields whose default is null, with the type they take when set
_NULLABLE = {
    "paths.corpus": str,
    "paths.stores": str,
    "paths.model": str,
    "eval.subsample": int,
}


def _check_scalar(path: str, default, value):
    if default is None:
        expected = _NULLABLE.get(path)
        if value is None:
            return None
        if expected is None or not isinstance(value, expected) \
                or isinstance(value, bool):
            want = expected.__name__ if expected else "null"
            raise ConfigValidation(f"{path}: expected {want} or null, "
                                   f"got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigValidation(f"{path}: expected true/false, "
                                   f"got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidation(f"{path}: expected an integer, "
                                   f"got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidation(f"{path}: expected a number, "
                                   f"got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigValidation(f"{path}: expected a string, "
                                   f"got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigValidation(f"{path}: expected a list, got {value!r}")
        if default:
            return [_check_scalar(f"{path}[{i}]", default[0], v)
                    for i, v in enumerate(value)]
        return list(value)
    raise ConfigValidation(f"{path}: unsupported value {value!r}")


def _merge(prefix: str, defaults: dict, overrides) -> dict:
    where = prefix or "config"
    if not isinstance(overrides, dict):
        raise ConfigValidation(f"{where}: expected an object, "
                               f"got {overrides!r}")
    unknown = sorted(set(overrides) - set(defaults))
    if unknown:
        key = unknown[0]
        path = f"{prefix}.{key}" if prefix else key
        raise ConfigValidation(f"{path}: unknown key '{key}'")
    out = {}
    for key, default in defaults.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in overrides:
            out[key] = copy.deepcopy(default)
        elif isinstance(default, dict):
            out[key] = _merge(path, default, overrides[key])
        else:
            out[key] = _check_scalar(path, default, overrides[key])
    return out


def _check_membership(cfg: dict) -> None:
    for i, name in enumerate(cfg["eval"]["models"]):
        if name not in MODEL_NAMES:
            raise ConfigValidation(
                f"eval.models[{i}]: unknown model '{name}' "
                f"(choose from {', '.join(MODEL_NAMES)})")
    for i, stage in enumerate(cfg["eval"]["stages"]):
        if stage not in STAGE_NAMES:
            raise ConfigValidation(
                f"eval.stages[{i}]: unknown stage '{stage}' "
                f"(choose from {', '.join(STAGE_NAMES)})")
    if cfg["eval"]["sweep_stage"] not in STAGE_NAMES:
        raise ConfigValidation(
            f"eval.sweep_stage: unknown stage "
            f"'{cfg['eval']['sweep_stage']}'")
    if cfg["eval"]["ablation_stage"] not in STAGE_NAMES:
        raise ConfigValidation(
            f"eval.ablation_stage: unknown stage "
            f"'{cfg['eval']['ablation_stage']}'")
    fractions = cfg["eval"]["fractions"]
    if any(not 0.0 <= f <= 1.0 for f in fractions) \
            or fractions != sorted(fractions):
        raise ConfigValidation(
            "eval.fractions: must be ascending values in [0, 1]")


def _check_bounds(cfg: dict) -> None:
    """Invariants the modules only catch at run time."""
    hmm_section = cfg["model"]["hmm"]
    if hmm_section["n_states"] < 1:
        raise ConfigValidation("model.hmm.n_states: must be >= 1")
    if hmm_section["max_iterations"] < 1:
        raise ConfigValidation("model.hmm.max_iterations: must be >= 1")
    pre = cfg["preprocess"]
    if not 0.0 < pre["low_cut"] < pre["high_cut"]:
        raise ConfigValidation(
            f"preprocess.low_cut: {pre['low_cut']} must lie in "
            f"(0, high_cut={pre['high_cut']})")
    if pre["high_cut"] >= pre["target_rate"] / 2:
        raise ConfigValidation(
            f"preprocess.high_cut: {pre['high_cut']} must stay below half "
            f"the target rate {pre['target_rate']}")
    if pre["segment_seconds"] <= 0 or pre["order"] < 1:
        raise ConfigValidation("preprocess: segment_seconds must be > 0 "
                               "and order >= 1")
    tsne_section = cfg["eval"]["tsne"]
    if tsne_section["perplexity"] <= 0 or tsne_section["iterations"] < 1 \
            or tsne_section["max_points"] < 1:
        raise ConfigValidation("eval.tsne: perplexity, iterations and "
                               "max_points must be positive")
    if cfg["eval"]["subsample"] is not None and cfg["eval"]["subsample"] < 1:
        raise ConfigValidation("eval.subsample: must be >= 1 (or null)")


def validate_config(document: dict) -> dict:
    """Merge onto defaults, rejecting unknown keys; enforce every module's
    own invariants by constructing its config."""
    merged = _merge("", DEFAULTS, document)
    _check_membership(merged)
    _check_bounds(merged)
    for section, builder in (("model.smate", smate_config),
                             ("model.xcm", xcm_config),
                             ("model.hmm", hmm_spec),
                             ("synth", synth_spec),
                             ("preprocess", preprocess_config)):
        try:
            builder(merged)
        except (ConfigInvalid, SpecInvalid) as exc:
            raise ConfigValidation(f"{section}: {exc}") from exc
    return merged


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except OSError as exc:
        raise ConfigValidation(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigValidation(f"{path} is not valid JSON: {exc}") from exc
    return validate_config(document)


def apply_seed(cfg: dict, seed: int) -> dict:
    """Override every seed in the document (the --seed flag)."""
    out = copy.deepcopy(cfg)
    out["seed"] = seed
    out["synth"]["seed"] = seed
    for model in out["model"].values():
        model["seed"] = seed
    return out


def config_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=1, sort_keys=True)


# --- builders ---------------------------------------------------------------

def smate_config(cfg: dict, **overrides) -> SmateConfig:
    section = dict(cfg["model"]["smate"])
    section["smb_windows"] = tuple(section["smb_windows"])
    section["conv_out"] = tuple(section["conv_out"])
    section.update(overrides)
    return SmateConfig(**section)


def xcm_config(cfg: dict, **overrides) -> XcmConfig:
    section = dict(cfg["model"]["xcm"])
    section.update(overrides)
    return XcmConfig(**section)


def hmm_spec(cfg: dict, **overrides) -> HmmFitSpec:
    section = dict(cfg["model"]["hmm"])
    section.update(overrides)
    return HmmFitSpec(**section)


def synth_spec(cfg: dict, **overrides) -> SynthSpec:
    section = dict(cfg["synth"])
    gap = section.pop("band_weight_gap")
    section["profiles"] = default_profiles(gap)
    section["fs_out"] = tuple(section["fs_out"])
    section["channel_weights"] = tuple(section["channel_weights"])
    section.update(overrides)
    return SynthSpec(**section)


def preprocess_config(cfg: dict) -> PreprocessConfig:
    section = cfg["preprocess"]
    spec = FilterSpec(low_cut=section["low_cut"],
                      high_cut=section["high_cut"],
                      order=section["order"],
                      zero_phase=section["zero_phase"])
    return PreprocessConfig(filter=spec,
                            target_rate=section["target_rate"],
                            segment_seconds=section["segment_seconds"])
