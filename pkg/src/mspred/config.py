"""Experiment configuration: parsing, validation, canonical hashing.

A run is fully determined by its config, so the config is canonicalized
(defaults materialized, keys sorted) before hashing; the SHA-256 of that
canonical JSON identifies every artifact the run produces. Unknown keys
are rejected rather than ignored.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

from .datagen import GeneratorSpec
from .errors import FormatError, ValidationError
from .model import TrainConfig
from .training import config_from_dict

_GENERATOR_DEFAULTS = {
    "k": 3,
    "obs_dim": 24,
    "T": 3,
    "num_sequences": 5000,
    "mixing_seed": 7,
    "velocity_range": [-math.pi / 2, math.pi / 2],
    "accel_range": [0.0, 0.0],
    "mode": "velocity",
}

_TRAIN_DEFAULTS = {
    "a": 8,
    "m": 16,
    "enc_hidden": [256, 256],
    "dec_hidden": [12],
    "mstar_hidden": [128, 128],
    "lr": 3e-4,
    "lr_final": 1e-4,
    "decay_at": None,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "batch_size": 32,
    "iterations": 10_000,
    "seed": 0,
    "variant": "msp",
    "order": 1,
    "T_c": None,
    "T_p": None,
    "invertibility_weight": 1.0,
    "holdout": 0,
    "log_interval": 100,
}

_EVAL_DEFAULTS = {
    "horizons": 18,
    "eval_sequences": 512,
    "pair_count": 256,
    "probe_offsets": 5,
    "spectrum_pairs": 50,
}

_SBD_DEFAULTS = {
    "iters": 1000,
    "lr": 0.05,
    "threshold": 0.01,
    "num_transitions": 64,
    "restarts": 4,
    "seed": 0,
}

_REQUIRED = ("master_seed", "out_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description plus its canonical identity."""

    master_seed: int
    out_dir: str
    generator: GeneratorSpec
    mode: str
    train: TrainConfig
    eval_spec: dict
    sbd_spec: dict
    canonical: dict
    config_hash: str


def _merge_section(raw: dict, defaults: dict, section: str) -> dict:
    extra = set(raw) - set(defaults)
    if extra:
        raise ValidationError(
            f"unknown key(s) in {section}: {sorted(extra)}", field=section
        )
    merged = dict(defaults)
    merged.update(raw)
    return merged


def _require_int(value, field):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{field} must be an integer", field=field)
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config document and materialize all defaults."""
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a JSON object", field="(root)")
    known_top = {"master_seed", "out_dir", "generator", "train", "eval", "sbd"}
    extra = set(raw) - known_top
    if extra:
        raise ValidationError(f"unknown top-level key(s): {sorted(extra)}",
                              field=sorted(extra)[0])
    for field in _REQUIRED:
        if field not in raw:
            raise ValidationError(f"missing required field {field!r}", field=field)
    master_seed = _require_int(raw["master_seed"], "master_seed")
    out_dir = raw["out_dir"]
    if not isinstance(out_dir, str) or not out_dir:
        raise ValidationError("out_dir must be a non-empty string", field="out_dir")

    gen = _merge_section(raw.get("generator", {}), _GENERATOR_DEFAULTS, "generator")
    mode = gen.pop("mode")
    spec = GeneratorSpec(
        k=_require_int(gen["k"], "generator.k"),
        obs_dim=_require_int(gen["obs_dim"], "generator.obs_dim"),
        T=_require_int(gen["T"], "generator.T"),
        num_sequences=_require_int(gen["num_sequences"], "generator.num_sequences"),
        mixing_seed=_require_int(gen["mixing_seed"], "generator.mixing_seed"),
        velocity_range=tuple(float(x) for x in gen["velocity_range"]),
        accel_range=tuple(float(x) for x in gen["accel_range"]),
    )
    spec.validate(mode)

    train_raw = _merge_section(raw.get("train", {}), _TRAIN_DEFAULTS, "train")
    train_cfg = config_from_dict(train_raw).resolved()
    train_cfg.validate()

    eval_spec = _merge_section(raw.get("eval", {}), _EVAL_DEFAULTS, "eval")
    for key in eval_spec:
        _require_int(eval_spec[key], f"eval.{key}")
        if eval_spec[key] < 1:
            raise ValidationError(f"eval.{key} must be >= 1", field=f"eval.{key}")

    sbd_spec = _merge_section(raw.get("sbd", {}), _SBD_DEFAULTS, "sbd")
    if sbd_spec["iters"] < 1 or sbd_spec["num_transitions"] < 1:
        raise ValidationError("sbd sizes must be >= 1", field="sbd.iters")
    if not 0.0 < float(sbd_spec["threshold"]) < 1.0:
        raise ValidationError("sbd.threshold must be in (0, 1)", field="sbd.threshold")

    canonical = {
        "master_seed": master_seed,
        "out_dir": out_dir,
        "generator": {
            "k": spec.k, "obs_dim": spec.obs_dim, "T": spec.T,
            "num_sequences": spec.num_sequences, "mixing_seed": spec.mixing_seed,
            "velocity_range": list(spec.velocity_range),
            "accel_range": list(spec.accel_range), "mode": mode,
        },
        "train": {
            "a": train_cfg.a, "m": train_cfg.m,
            "enc_hidden": list(train_cfg.enc_hidden),
            "dec_hidden": list(train_cfg.dec_hidden),
            "mstar_hidden": list(train_cfg.mstar_hidden),
            "lr": train_cfg.lr, "lr_final": train_cfg.lr_final,
            "decay_at": train_cfg.decay_at, "beta1": train_cfg.beta1,
            "beta2": train_cfg.beta2, "eps": train_cfg.eps,
            "batch_size": train_cfg.batch_size, "iterations": train_cfg.iterations,
            "seed": train_cfg.seed, "variant": train_cfg.variant,
            "order": train_cfg.order, "T_c": train_cfg.T_c, "T_p": train_cfg.T_p,
            "invertibility_weight": train_cfg.invertibility_weight,
            "holdout": train_cfg.holdout, "log_interval": train_cfg.log_interval,
        },
        "eval": dict(sorted(eval_spec.items())),
        "sbd": dict(sorted(sbd_spec.items())),
    }
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()
    return ExperimentConfig(master_seed=master_seed, out_dir=out_dir, generator=spec,
                            mode=mode, train=train_cfg, eval_spec=eval_spec,
                            sbd_spec=sbd_spec, canonical=canonical, config_hash=digest)


def load(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, *, seed=None, out_dir=None, variant=None,
                   order=None, horizons=None, iters=None) -> ExperimentConfig:
    """Re-derive a config (and its hash) with CLI flag overrides applied."""
    doc = json.loads(json.dumps(cfg.canonical))
    if seed is not None:
        doc["master_seed"] = int(seed)
    if out_dir is not None:
        doc["out_dir"] = str(out_dir)
    if variant is not None:
        doc["train"]["variant"] = variant
    if order is not None:
        doc["train"]["order"] = int(order)
        # order-dependent windows re-resolve from scratch
        doc["train"]["T_c"] = None
        doc["train"]["T_p"] = None
    if horizons is not None:
        doc["eval"]["horizons"] = int(horizons)
    if iters is not None:
        doc["train"]["iterations"] = int(iters)
        doc["train"]["decay_at"] = None
    return from_dict(doc)
