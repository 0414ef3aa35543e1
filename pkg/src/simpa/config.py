"""JSON experiment configuration.

Schema (keys marked * are required)::

    {
      "name": str,
      "mode": "simpa" | "maml",                       default "simpa"
      "environment": {
        "kind"*: "regression" | "blobs" | "features",
        regression: "m_t" (5), "m_v" (15), "noise_sigma" (0.3)
        blobs:      "N"*, "k"*, "m_v_per_class" (15), "dim" (2), "center_scale" (5.0)
        features:   "path"*, "N"*, "k"*, "m_v_per_class" (15)
      },
      "architecture": {
        "latent_dim"*, "base_hidden"*, "generator_hidden"*,
        "discriminator_hidden"*, "encoder_hidden"*, "generator_output" ("tanh")
      },
      "train": {
        "T"*, "K"*, "L_t"*, "L_v"*, "L_D"*, "eta"*, "alpha_t"*, "alpha_v"*,
        "gamma_t"*, "gamma_v"*, "nu"*, "delta"*, "iterations"*,
        optional: any other TrainConfig field
      },
      "checkpoint_every": int (500),
      "eval": {"n_tasks": int (1000), "seed": int (seed + 1)}
    }

The likelihood follows from the environment kind. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .environments import (
    FeatureEpisodeSource,
    TaskBatch,
    load_feature_episodes,
    sample_blob_classification_task,
    sample_regression_task,
)
from .maml import MamlConfig
from .meta import TrainConfig
from .networks import Architecture, MlpSpec
from .stochastic import RngStream

PRESETS = ("regression-appendix-d", "classification-appendix-f", "regression-desk", "classification-desk")

_ENV_FIELDS = {
    "regression": ({"kind"}, {"m_t": 5, "m_v": 15, "noise_sigma": 0.3}),
    "blobs": ({"kind", "N", "k"}, {"m_v_per_class": 15, "dim": 2, "center_scale": 5.0}),
    "features": ({"kind", "path", "N", "k"}, {"m_v_per_class": 15}),
}
_ARCH_REQUIRED = ("latent_dim", "base_hidden", "generator_hidden", "discriminator_hidden", "encoder_hidden")
_TRAIN_REQUIRED = ("T", "K", "L_t", "L_v", "L_D", "eta", "alpha_t", "alpha_v", "gamma_t", "gamma_v", "nu", "delta", "iterations")
_TOP_KEYS = {"name", "mode", "environment", "architecture", "train", "checkpoint_every", "eval"}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mode: str
    environment: dict
    architecture: dict
    train: TrainConfig
    checkpoint_every: int = 500
    eval: dict = field(default_factory=dict)

    @property
    def likelihood(self) -> str:
        return self.train.likelihood

    def with_overrides(self, seed: int | None = None, mode: str | None = None, inner_grad: str | None = None, **train_fields) -> "ExperimentConfig":
        changes = dict(train_fields)
        if seed is not None:
            changes["seed"] = int(seed)
        if inner_grad is not None:
            changes["inner_grad"] = inner_grad
        if mode is not None and mode not in ("simpa", "maml"):
            raise ConfigError("mode", f"must be 'simpa' or 'maml', got {mode!r}")
        try:
            train = dataclasses.replace(self.train, **changes)
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from None
        return dataclasses.replace(self, train=train, mode=mode or self.mode)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "environment": dict(self.environment),
            "architecture": dict(self.architecture),
            "train": dataclasses.asdict(self.train),
            "checkpoint_every": self.checkpoint_every,
            "eval": dict(self.eval),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # --- derived objects -------------------------------------------------

    def io_dims(self) -> tuple[int, int]:
        env = self.environment
        if env["kind"] == "regression":
            return 1, 1
        if env["kind"] == "blobs":
            return int(env["dim"]), int(env["N"])
        return self.feature_source().dim, int(env["N"])

    def build_architecture(self) -> Architecture:
        a = self.architecture
        d_in, d_out = self.io_dims()
        return Architecture.build(
            d_in, d_out, int(a["latent_dim"]), a["base_hidden"], a["generator_hidden"],
            a["discriminator_hidden"], a["encoder_hidden"], a.get("generator_output", "tanh"),
        )

    def base_spec(self) -> MlpSpec:
        d_in, d_out = self.io_dims()
        return MlpSpec((d_in, *self.architecture["base_hidden"], d_out))

    def maml_config(self) -> MamlConfig:
        t = self.train
        return MamlConfig(t.likelihood, t.T, t.eta, t.alpha_t, t.alpha_v, t.inner_grad, t.iterations, t.seed)

    def feature_source(self) -> FeatureEpisodeSource:
        env = self.environment
        return load_feature_episodes(env["path"], int(env["N"]), int(env["k"]), int(env["m_v_per_class"]))

    def task_sampler(self, n_oracle: int = 0):
        """A function RngStream -> TaskBatch for the configured environment."""
        env = self.environment
        if env["kind"] == "regression":
            return lambda s: sample_regression_task(s, int(env["m_t"]), int(env["m_v"]), n_oracle, float(env["noise_sigma"]))
        if env["kind"] == "blobs":
            return lambda s: sample_blob_classification_task(
                s, int(env["N"]), int(env["k"]), int(env["m_v_per_class"]), int(env["dim"]), float(env["center_scale"])
            )
        source = self.feature_source()
        return source.sample


def _require(section: dict, keys, prefix: str) -> None:
    for k in keys:
        if k not in section:
            raise ConfigError(f"{prefix}{k}", "missing required field")


def _reject_unknown(section: dict, allowed, prefix: str) -> None:
    for k in section:
        if k not in allowed:
            raise ConfigError(f"{prefix}{k}", "unknown field")


def _as_section(raw: dict, key: str) -> dict:
    sec = raw.get(key)
    if sec is None:
        raise ConfigError(key, "missing required field")
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    return sec


def _int_list(section: dict, key: str, prefix: str) -> list[int]:
    v = section[key]
    if not isinstance(v, list) or not all(isinstance(x, int) and x > 0 for x in v):
        raise ConfigError(f"{prefix}{key}", "must be a list of positive integers")
    return list(v)


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "")
    mode = raw.get("mode", "simpa")
    if mode not in ("simpa", "maml"):
        raise ConfigError("mode", f"must be 'simpa' or 'maml', got {mode!r}")

    env = dict(_as_section(raw, "environment"))
    if "kind" not in env:
        raise ConfigError("environment.kind", "missing required field")
    if env["kind"] not in _ENV_FIELDS:
        raise ConfigError("environment.kind", f"unknown environment {env['kind']!r}")
    required, defaults = _ENV_FIELDS[env["kind"]]
    _require(env, sorted(required), "environment.")
    _reject_unknown(env, required | set(defaults), "environment.")
    env = {**defaults, **env}

    arch = dict(_as_section(raw, "architecture"))
    _require(arch, _ARCH_REQUIRED, "architecture.")
    _reject_unknown(arch, set(_ARCH_REQUIRED) | {"generator_output"}, "architecture.")
    if not isinstance(arch["latent_dim"], int) or arch["latent_dim"] < 1:
        raise ConfigError("architecture.latent_dim", "must be a positive integer")
    for key in _ARCH_REQUIRED[1:]:
        arch[key] = _int_list(arch, key, "architecture.")
    arch.setdefault("generator_output", "tanh")

    tr = dict(_as_section(raw, "train"))
    _require(tr, _TRAIN_REQUIRED, "train.")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    _reject_unknown(tr, known, "train.")
    likelihood = "regression" if env["kind"] == "regression" else "classification"
    if tr.setdefault("likelihood", likelihood) != likelihood:
        raise ConfigError("train.likelihood", f"environment {env['kind']!r} implies {likelihood!r}")
    for name in tr:
        if name in ("T", "K", "L_t", "L_v", "L_D", "eta", "iterations", "seed") and not isinstance(tr[name], int):
            raise ConfigError(f"train.{name}", "must be an integer")
    try:
        train = TrainConfig(**tr)
    except ValueError as exc:
        msg = str(exc)
        culprit = next((n for n in sorted(tr, key=len, reverse=True) if msg.startswith(n)), "")
        raise ConfigError(f"train.{culprit}" if culprit else "train", msg) from None

    every = raw.get("checkpoint_every", 500)
    if not isinstance(every, int) or every < 1:
        raise ConfigError("checkpoint_every", "must be a positive integer")
    ev = dict(raw.get("eval", {}))
    _reject_unknown(ev, {"n_tasks", "seed"}, "eval.")
    ev.setdefault("n_tasks", 1000)
    return ExperimentConfig(str(raw.get("name", "")), mode, env, arch, train, every, ev)


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError("<preset>", f"unknown preset {name!r}; choose from {PRESETS}")
    return json.loads(resources.files("simpa.presets").joinpath(f"{name}.json").read_text())


def load_config(path_or_preset) -> ExperimentConfig:
    """Read a JSON config file, or a bundled preset by name."""
    p = Path(path_or_preset)
    if not p.exists() and str(path_or_preset) in PRESETS:
        return parse_config(load_preset(str(path_or_preset)))
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError("<config>", f"no such file or preset: {path_or_preset}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    return parse_config(raw)


def eval_stream(cfg: ExperimentConfig, j: int) -> RngStream:
    """Held-out task stream, disjoint from training streams by purpose."""
    seed = int(cfg.eval.get("seed", cfg.train.seed + 1))
    return RngStream(seed, 0, j, "eval-task")


__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "TaskBatch", "eval_stream", "load_config", "load_preset", "parse_config"]
