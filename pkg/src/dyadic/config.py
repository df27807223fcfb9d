"""Experiment configuration: file parsing, strict validation, overrides.

Configs are TOML (``model.kind = "geometric"``, ``model.lambda = 2.0``,
``run.n_paths = 10000`` ...) or the JSON equivalent; a manifest emitted by a
previous run is also accepted and reproduces that run.  Command-line
``--set key=value`` overrides win over the file.  Validation is strict:
unknown keys anywhere are rejected before any computation starts.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .model import SpectralModel, TailHeuristic

SUBCOMMANDS = (
    "constants",
    "escape-mc",
    "forward-solve",
    "sde-verify",
    "decay-report",
    "novikov",
    "blowup",
)

FORMATS = ("csv", "jsonl")

ENV_OUTPUT = "DYADIC_OUTPUT_DIR"


# -- casters -------------------------------------------------------------------


def _int(key, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer, got {v!r}")
    return v


def _float(key, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a real number, got {v!r}")
    return float(v)


def _opt_float(key, v):
    return None if v is None else _float(key, v)


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key} must be true or false, got {v!r}")
    return v


def _str(key, v):
    if not isinstance(v, str):
        raise ConfigError(f"{key} must be a string, got {v!r}")
    return v


def _float_list(key, v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key} must be a non-empty list of reals, got {v!r}")
    return [_float(key, x) for x in v]


def _int_list(key, v):
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(f"{key} must be a non-empty list of integers, got {v!r}")
    return [_int(key, x) for x in v]


def _grid(key, v):
    """A time grid: explicit list or {start, stop, count}."""
    if isinstance(v, (list, tuple)):
        grid = np.array(_float_list(key, v), dtype=float)
    elif isinstance(v, dict):
        unknown = set(v) - {"start", "stop", "count"}
        if unknown:
            raise ConfigError(f"{key} has unknown fields {sorted(unknown)}")
        try:
            grid = np.linspace(float(v["start"]), float(v["stop"]), int(v["count"]))
        except KeyError as missing:
            raise ConfigError(f"{key} needs start/stop/count, missing {missing}")
    else:
        raise ConfigError(f"{key} must be a list or a start/stop/count table, got {v!r}")
    if np.any(np.diff(grid) <= 0.0) or grid[0] < 0.0:
        raise ConfigError(f"{key} must be strictly increasing and nonnegative")
    return grid


def _dt_policy(key, v):
    if not isinstance(v, dict) or len(v) != 1:
        raise ConfigError(f"{key} must be a one-entry table, e.g. {{stiffness_scaled = 0.1}}")
    (kind, value), = v.items()
    if kind not in ("stiffness_scaled", "fixed"):
        raise ConfigError(f"{key} kind must be stiffness_scaled or fixed, got {kind!r}")
    return (kind, _float(key, value))


# -- run-block schemas -----------------------------------------------------------

RUN_SCHEMAS: Dict[str, Dict[str, Tuple]] = {
    "constants": {
        "nu_count": (_int, 10),
        "t_values": (_float_list, [0.25, 0.5, 1.0]),
        "e0": (_float, 1.0),
    },
    "escape-mc": {
        "n_samples": (_int, 100_000),
        "cap": (_int, 60),
        "start": (_int, 1),
        "time_cap": (_opt_float, None),
        "t_grid": (_grid, [0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0]),
        "occupation_states": (_int_list, [1, 2, 3]),
        "write_samples": (_bool, True),
    },
    "forward-solve": {
        "n_levels": (_int, 40),
        "t_grid": (_grid, {"start": 0.05, "stop": 2.0, "count": 40}),
        "x0": (_float_list, [1.0]),
        "e0": (_float, 1.0),
        "tol": (_float, 1e-8),
        "include_p": (_bool, False),
    },
    "sde-verify": {
        "n_levels": (_int, 8),
        "horizon": (_float, 0.5),
        "n_paths": (_int, 10_000),
        "n_rec": (_int, 5),
        "x0": (_float_list, [1.0]),
        "dt_policy": (_dt_policy, ("stiffness_scaled", 0.1)),
        "scheme": (_str, "exponential_em"),
        "det_horizon": (_float, 1.0),
        "det_dt": (_float, 2e-5),
        "tol_energy": (_float, 0.01),
        "n_dump_paths": (_int, 8),
    },
    "decay-report": {
        "n_levels": (_int, 8),
        "horizon": (_float, 1.0),
        "q_n_paths": (_int, 256),
        "p_n_paths": (_int, 4_000),
        "n_rec": (_int, 50),
        "window": (_float, 0.5),
        "x0": (_float_list, [1.0]),
        "dt_policy": (_dt_policy, ("stiffness_scaled", 0.1)),
    },
    "novikov": {
        "n_levels": (_int, 8),
        "e0": (_float, 1.0),
        "horizons": (_float_list, [0.5, 1.0, 2.0]),
        "n_paths": (_int, 256),
        "n_rec": (_int, 20),
        "dt_policy": (_dt_policy, ("stiffness_scaled", 0.1)),
    },
    "blowup": {
        "n_sweep": (_int_list, [4, 6, 8]),
        "horizon": (_float, 1.0),
        "x0": (_float_list, [1.0]),
        "measure": (_str, "deterministic"),
        "n_paths": (_int, 1),
        "n_rec": (_int, 10),
        "det_dt": (_float, 2e-5),
        "dt_policy": (_dt_policy, ("stiffness_scaled", 0.1)),
    },
}

MODEL_KEYS = {"kind", "lambda", "k", "rel_tol", "divergence_bound", "tail_fraction"}
TOP_KEYS = {"model", "run", "seed", "output", "formats"}


@dataclass
class ExperimentConfig:
    subcommand: str
    model: SpectralModel
    run: Dict[str, Any]
    seed: int
    output: Optional[str]
    formats: Tuple[str, ...]
    model_block: Dict[str, Any]

    def resolved(self) -> Dict[str, Any]:
        """Plain dict safe to echo into a manifest and re-run from."""
        run = {}
        for key, value in self.run.items():
            if isinstance(value, np.ndarray):
                run[key] = [float(v) for v in value]
            elif isinstance(value, tuple) and key == "dt_policy":
                run[key] = {value[0]: value[1]}
            else:
                run[key] = value
        return {
            "model": dict(self.model_block),
            "run": run,
            "seed": self.seed,
            "output": self.output,
            "formats": list(self.formats),
        }


def build_model(block: Dict[str, Any]) -> SpectralModel:
    unknown = set(block) - MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model keys {sorted(unknown)}")
    kind = block.get("kind")
    heur = TailHeuristic(
        rel_tol=_float("model.rel_tol", block.get("rel_tol", 1e-12)),
        divergence_bound=_float("model.divergence_bound", block.get("divergence_bound", 1e6)),
        tail_fraction=_float("model.tail_fraction", block.get("tail_fraction", 0.1)),
    )
    if kind == "geometric":
        if "lambda" not in block:
            raise ConfigError("geometric model needs model.lambda")
        if "k" in block:
            raise ConfigError("geometric model must not carry model.k")
        return SpectralModel.geometric(_float("model.lambda", block["lambda"]))
    if kind == "custom":
        if "k" not in block:
            raise ConfigError("custom model needs model.k")
        if "lambda" in block:
            raise ConfigError("custom model must not carry model.lambda")
        return SpectralModel.custom(_float_list("model.k", block["k"]), heuristic=heur)
    raise ConfigError(f"model.kind must be 'geometric' or 'custom', got {kind!r}")


def _validate(subcommand: str, data: Dict[str, Any]) -> ExperimentConfig:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    unknown = set(data) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if "model" not in data or not isinstance(data["model"], dict):
        raise ConfigError("config needs a [model] table")
    model = build_model(data["model"])
    schema = RUN_SCHEMAS[subcommand]
    run_block = data.get("run", {})
    if not isinstance(run_block, dict):
        raise ConfigError("[run] must be a table")
    unknown = set(run_block) - set(schema)
    if unknown:
        raise ConfigError(
            f"unknown run keys for {subcommand}: {sorted(unknown)}; valid: {sorted(schema)}"
        )
    run = {}
    for key, (cast, default) in schema.items():
        if key in run_block:
            run[key] = cast(f"run.{key}", run_block[key])
        elif key == "t_grid":
            run[key] = _grid(key, default)
        else:
            run[key] = default
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError(f"output must be a directory path string, got {output!r}")
    formats = data.get("formats", list(FORMATS))
    if not isinstance(formats, (list, tuple)) or not formats or set(formats) - set(FORMATS):
        raise ConfigError(f"formats must be a non-empty subset of {FORMATS}, got {formats!r}")
    return ExperimentConfig(
        subcommand=subcommand,
        model=model,
        run=run,
        seed=seed,
        output=output,
        formats=tuple(formats),
        model_block=dict(data["model"]),
    )


def _merge_override(data: Dict[str, Any], dotted: str, raw_value: str) -> None:
    try:
        parsed = tomllib.loads(f"value = {raw_value}")["value"]
    except tomllib.TOMLDecodeError:
        parsed = raw_value
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {part} is not a table")
    node[parts[-1]] = parsed


def load_config(
    subcommand: str,
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    data: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """Load, override and validate one experiment configuration.

    ``path`` may point at a TOML config, a JSON config, or a manifest from a
    previous run (its embedded config is extracted and must belong to the
    same subcommand).
    """
    if data is None:
        if path is None:
            raise ConfigError("a config file is required (--config)")
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        if p.suffix == ".json":
            data = json.loads(p.read_text())
        else:
            try:
                data = tomllib.loads(p.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}")
    if "config" in data and "subcommand" in data:  # manifest round-trip
        if data["subcommand"] != subcommand:
            raise ConfigError(
                f"manifest belongs to {data['subcommand']!r}, not {subcommand!r}"
            )
        data = data["config"]
    data = json.loads(json.dumps(data))  # deep copy, normalize tuples
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        _merge_override(data, dotted.strip(), raw.strip())
    return _validate(subcommand, data)
