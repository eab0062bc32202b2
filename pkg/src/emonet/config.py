"""Strict JSON run configuration.

A run config fixes everything an experiment needs: seed, regime, corpus
manifests, output directory, model hyperparameters and schedule knobs.
Unknown keys are rejected by name so stale configs fail loudly, and the
fully resolved config is written into the output directory as the run
record.
"""

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path

from . import dsp
from .errors import ConfigError
from .model import ModelConfig
from .trainer import ScheduleConfig

# The frontend is fixed to these values throughout; configs may state them
# (they become part of the run record) but cannot change them.
FRONTEND = {
    "sample_rate": dsp.SAMPLE_RATE,
    "n_fft": dsp.N_FFT,
    "hop": dsp.HOP,
    "n_mels": dsp.N_MELS,
    "fmin_hz": dsp.FMIN_HZ,
    "fmax_hz": dsp.FMAX_HZ,
    "log_floor": dsp.LOG_FLOOR,
    "crop_seconds": dsp.CROP_SECONDS,
}

_TOP_KEYS = {"seed", "regime", "manifests", "out_dir", "model", "schedule", "frontend"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    regime: str = "scratch"
    manifests: tuple = ()
    out_dir: str | None = None
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()


def _check_keys(section: dict, allowed, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}")


def _build_section(cls, doc: dict, where: str):
    allowed = set(cls.__dataclass_fields__)
    _check_keys(doc, allowed, where)
    doc = dict(doc)
    for key in ("stack_filters", "stage_lrs", "duration_range"):
        if key in doc and doc[key] is not None:
            doc[key] = tuple(doc[key])
    return cls(**doc)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse a run config JSON file, then apply CLI flag overrides.

    `overrides` may set seed, regime, manifests or out_dir; None values
    are ignored so absent flags leave the config untouched.
    """
    doc: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "run config")

    frontend = doc.get("frontend", {})
    _check_keys(frontend, set(FRONTEND), "section 'frontend'")
    for key, value in frontend.items():
        if value != FRONTEND[key]:
            raise ConfigError(
                f"frontend.{key} is fixed at {FRONTEND[key]!r} in this build, got {value!r}"
            )

    merged = {
        "seed": doc.get("seed", 0),
        "regime": doc.get("regime", "scratch"),
        "manifests": tuple(doc.get("manifests", ())),
        "out_dir": doc.get("out_dir"),
    }
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = tuple(value) if key == "manifests" else value

    return RunConfig(
        seed=int(merged["seed"]),
        regime=str(merged["regime"]),
        manifests=tuple(str(m) for m in merged["manifests"]),
        out_dir=None if merged["out_dir"] is None else str(merged["out_dir"]),
        model=_build_section(ModelConfig, doc.get("model", {}), "section 'model'"),
        schedule=_build_section(ScheduleConfig, doc.get("schedule", {}), "section 'schedule'"),
    )


def effective_config(config: RunConfig) -> dict:
    """The fully resolved run record, defaults and environment included."""
    return {
        "seed": config.seed,
        "regime": config.regime,
        "manifests": list(config.manifests),
        "out_dir": config.out_dir,
        "model": dataclasses.asdict(config.model),
        "schedule": dataclasses.asdict(config.schedule),
        "frontend": dict(FRONTEND),
        "threads": os.environ.get("EMONET_THREADS"),
    }


def write_effective_config(config: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(effective_config(config), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
