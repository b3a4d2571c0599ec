"""Run configuration: one TOML file drives every pipeline stage.

Defaults are materialized on load; the config hash covers everything
except filesystem paths, so moving a workdir never invalidates artifacts
while changing any scientific knob does.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import DataError

DEFAULTS: dict = {
    "seed": 0,
    "paths": {"raw": "", "format": "jsonl", "workdir": "work"},
    "regions": {"cells_per_axis": 20},
    "kg": {"d_km": 0.2},
    "tokenizer": {
        "dim": 64, "rgcn_layers": 3, "quant_layers": 3,
        "codebook_user": 256, "codebook_poi": 256,
        "codebook_category": 64, "codebook_region": 64,
        "beta": 0.25, "epochs": 300, "lr": 0.01, "triples_per_step": 256,
        "negatives_per_positive": 1, "grad_clip": 5.0,
    },
    "corpus": {"window": 16},
    "lm": {
        "d_model": 128, "n_layers": 4, "n_heads": 4, "max_len": 512, "dropout": 0.0,
        "epochs": 10, "lr": 0.003, "batch_size": 32, "grad_clip": 5.0,
    },
    "eval": {"ks": [1, 5, 10], "beam_width": 20},
    "ablation": {"variant": "full"},
}


class RunConfig:
    """Materialized configuration with stage-level accessors."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def from_dict(cls, overrides: dict) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        _merge(merged, overrides, path="")
        return cls(merged)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"config parse error in {path}: {exc}") from None
        return cls.from_dict(raw)

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def config_hash(self) -> str:
        hashable = {k: v for k, v in self.data.items() if k != "paths"}
        return hashlib.sha256(json.dumps(hashable, sort_keys=True).encode()).hexdigest()

    def codebook_sizes(self) -> dict:
        tok = self.data["tokenizer"]
        return {t: tok[f"codebook_{t}"] for t in ("user", "poi", "category", "region")}

    def tokenizer_params(self) -> dict:
        tok = self.data["tokenizer"]
        return {
            "dim": tok["dim"], "rgcn_layers": tok["rgcn_layers"],
            "quant_layers": tok["quant_layers"], "codebook_sizes": self.codebook_sizes(),
            "beta": tok["beta"], "epochs": tok["epochs"], "lr": tok["lr"],
            "triples_per_step": tok["triples_per_step"],
            "negatives_per_positive": tok["negatives_per_positive"],
            "grad_clip": tok["grad_clip"], "seed": self.seed,
        }

    def lm_params(self) -> dict:
        lm = self.data["lm"]
        return {
            "d_model": lm["d_model"], "n_layers": lm["n_layers"], "n_heads": lm["n_heads"],
            "max_len": lm["max_len"], "dropout": lm["dropout"], "epochs": lm["epochs"],
            "lr": lm["lr"], "batch_size": lm["batch_size"], "grad_clip": lm["grad_clip"],
            "seed": self.seed,
        }

    def dump(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)


def _merge(base: dict, overrides: dict, path: str) -> None:
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise DataError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise DataError(f"config key {where} must be a table")
            _merge(base[key], value, where)
        else:
            base[key] = value
