"""Run configuration files: training hyperparameters plus a generator block."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .generators import GeneratorError, GeneratorSpec, load_mlp_generator, make_synthetic_generator
from .trainer import ConfigError, TrainConfig

SEED_ENV = "LATENTDIR_SEED"
PRESET_PREFIX = "preset:"
SYNTHETIC_KEYS = {"seed", "d", "F", "grid", "gamma", "bias"}
FILE_KEYS = {"path", "target_layer", "grid"}


@dataclass
class RunConfig:
    train: TrainConfig
    generator: dict  # {"synthetic": {...}} or {"file": {...}}
    output_dir: str = "run"
    source: str | None = None

    def build_generator(self) -> GeneratorSpec:
        try:
            if "synthetic" in self.generator:
                g = self.generator["synthetic"]
                return make_synthetic_generator(g["seed"], g["d"], g["F"], g.get("grid", 64),
                                                g.get("gamma", 2.0), bias=g.get("bias"))
            g = self.generator["file"]
            path = Path(g["path"])
            if not path.is_absolute() and self.source is not None:
                path = Path(self.source).parent / path
            gen = load_mlp_generator(path, g.get("target_layer"), g.get("grid", 64))
        except (GeneratorError, OSError) as exc:
            raise ConfigError("generator", str(exc)) from None
        return gen

    def resolved(self, gen: GeneratorSpec) -> "RunConfig":
        """Copy with every defaulted field made explicit."""
        train = TrainConfig(**self.train.to_dict())
        train.latent_dim = gen.latent_dim
        train.target_layer = gen.target_layer
        block = json.loads(json.dumps(self.generator))
        if "synthetic" in block:
            block["synthetic"].setdefault("grid", gen.grid)
            block["synthetic"].setdefault("gamma", gen.gamma)
        else:
            block["file"]["path"] = str(Path(gen.meta["path"]).resolve())
            block["file"]["target_layer"] = gen.target_layer
            block["file"].setdefault("grid", gen.grid)
        return RunConfig(train, block, self.output_dir, self.source)

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "generator": self.generator, "output_dir": self.output_dir}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_generator_block(block) -> dict:
    if not isinstance(block, dict) or len(block) != 1 or next(iter(block)) not in ("synthetic", "file"):
        raise ConfigError("generator", "must hold exactly one of 'synthetic' or 'file'")
    (kind, body), = block.items()
    if not isinstance(body, dict):
        raise ConfigError(f"generator.{kind}", "must be an object")
    allowed, required = (SYNTHETIC_KEYS, {"seed", "d", "F"}) if kind == "synthetic" else (FILE_KEYS, {"path"})
    for key in body:
        if key not in allowed:
            raise ConfigError(f"generator.{kind}.{key}", "unknown field")
    for key in required:
        if key not in body:
            raise ConfigError(f"generator.{kind}.{key}", "missing")
    return block


def parse_run_config(doc: dict, source: str | None = None, env: dict | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config", "must be a JSON object")
    doc = dict(doc)
    if "generator" not in doc:
        raise ConfigError("generator", "missing generator block")
    generator = _check_generator_block(doc.pop("generator"))
    output_dir = doc.pop("output_dir", "run")
    names = {f.name for f in fields(TrainConfig)}
    for key in doc:
        if key not in names:
            raise ConfigError(key, "unknown field")
    train = TrainConfig(**doc)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            train.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    train.validate()
    return RunConfig(train, generator, str(output_dir), source)


def preset_names() -> list[str]:
    root = resources.files("latentdir") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_run_config(path: str, env: dict | None = None) -> RunConfig:
    if path.startswith(PRESET_PREFIX):
        name = path[len(PRESET_PREFIX):]
        res = resources.files("latentdir") / "presets" / f"{name}.json"
        if not res.is_file():
            raise ConfigError("config", f"no preset {name!r}; available: {', '.join(preset_names())}")
        text, source = res.read_text(), None
    else:
        text, source = Path(path).read_text(), path
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON ({exc})") from None
    try:
        return parse_run_config(doc, source, env)
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
