"""JSON run configuration: validation, defaults, and run-directory naming."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields
from pathlib import Path

from .data import SyntheticSpec
from .model import ABLATIONS, ModelConfig
from .train import TrainConfig

__all__ = ["ConfigError", "DATA_DEFAULTS", "TEXT_DEFAULTS", "RunConfig", "load_run_config"]

DATA_DEFAULTS = {
    "series": "series.csv",
    "text": "text.jsonl",
    "embeddings": "embeddings.bin",
    "split": [0.7, 0.1, 0.2],
    "stride": 1,
    "domain": "Synthetic",
}
TEXT_DEFAULTS = {"backend": "file", "seed": 0, "url": None, "path": None}
TOP_LEVEL = {"seed", "ablation", "model", "train", "data", "text", "synthetic"}


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


class RunConfig:
    """Resolved configuration. ``seed`` feeds the model, the trainer and the synthetic data."""

    def __init__(self, raw: dict | None = None, *, seed: int | None = None, ablation: str | None = None,
                 backend: str | None = None):
        raw = copy.deepcopy(raw or {})
        _check_keys("<root>", raw, TOP_LEVEL)
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        spec_keys = {f.name for f in fields(SyntheticSpec)}
        _check_keys("model", raw.get("model", {}), model_keys)
        _check_keys("train", raw.get("train", {}), train_keys)
        _check_keys("data", raw.get("data", {}), DATA_DEFAULTS)
        _check_keys("text", raw.get("text", {}), set(TEXT_DEFAULTS) | {"dim"})
        _check_keys("synthetic", raw.get("synthetic", {}), spec_keys)

        self.seed = int(raw.get("seed", 0) if seed is None else seed)
        self.ablation = raw.get("ablation", "none") if ablation is None else ablation
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        self.user_model = dict(raw.get("model", {}))
        try:
            self.model = ModelConfig(**{**self.user_model, "seed": self.seed, "ablation": self.ablation})
            self.train = TrainConfig(**{**raw.get("train", {}), "seed": self.seed})
            self.synthetic = SyntheticSpec(**{**raw.get("synthetic", {}), "seed": self.seed})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        self.data = {**DATA_DEFAULTS, **raw.get("data", {})}
        self.text = {**TEXT_DEFAULTS, "dim": self.model.text_dim, **raw.get("text", {})}
        if backend is not None:
            self.text["backend"] = backend
        if self.text["backend"] not in ("stub", "file", "http"):
            raise ConfigError(f"text backend must be stub, file or http, got {self.text['backend']!r}")
        if self.text["dim"] != self.model.text_dim:
            raise ConfigError(f"text.dim={self.text['dim']} disagrees with model.text_dim={self.model.text_dim}")
        if int(self.data["stride"]) < 1:
            raise ConfigError("data.stride must be >= 1")

    def set_channels(self, n: int) -> None:
        """Adopt the data's channel count unless the user fixed one."""
        if "channels" in self.user_model:
            if self.model.channels != n:
                raise ConfigError(f"model.channels={self.model.channels} but the data has {n} channels")
            return
        self.model.channels = n

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ablation": self.ablation,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dict(self.data),
            "text": dict(self.text),
            "synthetic": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.synthetic).items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        for section in ("model", "train", "synthetic"):
            d[section].pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, out) -> Path:
        return Path(out) / f"run-{self.config_hash()}-seed{self.seed}"


def load_run_config(path, **overrides) -> RunConfig:
    if path is None:
        return RunConfig({}, **overrides)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return RunConfig(raw, **overrides)
