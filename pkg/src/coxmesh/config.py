"""Run configuration files (TOML or JSON) for the command-line front end.

Relative paths are resolved against the directory of the config file.
Unknown keys are rejected with a :class:`~coxmesh.model.ConfigError` that
names the offending key as ``section.key``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .model import ConfigError

SCHEMA = {
    "seed": None,
    "center": None,
    "paths": {"data", "domain", "mesh", "sst_grids"},
    "mesh": {"inner_res", "outer_extension", "outer_res", "min_angle"},
    "covariates": {"sst"},
    "model": None,  # validated by ModelSpec.from_dict
    "inference": None,  # validated by FitOptions.from_dict plus "init"
    "outputs": {"plots", "n_draws"},
    "simulate": {
        "spde", "intercept", "coef", "months", "years", "species", "tau_month", "tau_year",
        "include_marks", "mark_coef", "xi", "size", "rho", "behavior_probs", "share_single_field",
        "inner_res", "outer_extension", "outer_res",
    },
    "predict": {"species", "month", "year", "dx", "dy", "n_draws"},
    "evaluate": {"n_draws", "units"},
    "kfunc": {"species", "month", "year", "r_max", "n_radii", "n_sim", "correction"},
}

PATH_KEYS = ("data", "domain", "mesh")


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    source: Path | None = None
    digest: str = ""
    sections: dict = field(default_factory=dict)

    def section(self, name) -> dict:
        return dict(self.raw.get(name, {}))

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    def path(self, key, required=True) -> Path | None:
        p = self.raw.get("paths", {}).get(key)
        if p is None:
            if required:
                raise ConfigError(f"paths.{key}", f"missing required path: paths.{key}")
            return None
        return (self.base_dir / p).resolve()

    def sst_grid_paths(self) -> list[Path]:
        return [(self.base_dir / p).resolve() for p in self.raw.get("paths", {}).get("sst_grids", [])]

    def check_paths(self, keys):
        for k in keys:
            p = self.path(k, required=False)
            if p is not None and not (p.exists() or Path(str(p) + ".mesh.json").exists()):
                raise ConfigError(f"paths.{k}", f"file not found for paths.{k}: {p}")
        for p in self.sst_grid_paths():
            if not p.exists():
                raise ConfigError("paths.sst_grids", f"file not found for paths.sst_grids: {p}")

    def resolved(self) -> dict:
        """Config with absolute paths, suitable for embedding in outputs."""
        out = json.loads(json.dumps(self.raw))
        paths = out.get("paths", {})
        for k in PATH_KEYS:
            if k in paths:
                paths[k] = str((self.base_dir / paths[k]).resolve())
        if "sst_grids" in paths:
            paths["sst_grids"] = [str(p) for p in self.sst_grid_paths()]
        return out


def validate(raw: dict) -> dict:
    for key, val in raw.items():
        if key not in SCHEMA:
            raise ConfigError(key)
        allowed = SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ConfigError(key, f"section {key} must be a table")
        for sub in val:
            if sub not in allowed:
                raise ConfigError(f"{key}.{sub}")
    return raw


def parse_config_text(text: str, fmt: str) -> dict:
    try:
        return json.loads(text) if fmt == "json" else tomli.loads(text)
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ConfigError("<file>", f"cannot parse config: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"config file not found: {path}")
    data = path.read_bytes()
    raw = parse_config_text(data.decode("utf-8"), "json" if path.suffix.lower() == ".json" else "toml")
    validate(raw)
    return RunConfig(raw, path.parent.resolve(), path.resolve(), hashlib.sha256(data).hexdigest())


def from_dict(raw: dict, base_dir=".") -> RunConfig:
    validate(raw)
    digest = hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()
    return RunConfig(raw, Path(base_dir).resolve(), None, digest)
