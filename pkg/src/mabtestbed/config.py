"""Declarative configs for experiments, simulated trials and the service.

Files are YAML (JSON is valid YAML).  Experiment config example::

    factors: [{name: Rationale, levels: 2}]
    context: [{name: Mood, values: [0, 1], default: 0}]
    context_terms: [Mood]        # default: every context variable
    interactions: [Mood]         # default: every context term
    mixture_p: 0.5
    v: 1.0                       # or noise: {R: .., epsilon: .., delta: ..}
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .bandit import (
    ArmSet,
    ContextSchema,
    ContextVariable,
    FeatureEncoding,
    NoiseParams,
    ParameterError,
    noise_scale,
)
from .simulation import RewardModel, TrialConfig, policy_probability


class ConfigError(ValueError):
    pass


def load_file(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def parse_noise(doc: Mapping) -> NoiseParams:
    if "noise" in doc:
        n = doc["noise"]
        if "v" in n:
            return NoiseParams(v=float(n["v"]))
        return NoiseParams.from_bound(float(n["R"]), float(n["epsilon"]), float(n["delta"]))
    return NoiseParams(v=float(doc.get("v", 1.0)))


def noise_to_dict(noise: NoiseParams) -> dict:
    if noise.R is None:
        return {"v": noise.v}
    return {"R": noise.R, "epsilon": noise.epsilon, "delta": noise.delta}


def parse_schema(items) -> ContextSchema:
    variables = []
    for item in items or ():
        values = tuple(float(x) for x in item.get("values", (0, 1)))
        default = item.get("default")
        variables.append(
            ContextVariable(str(item["name"]), values, None if default is None else float(default))
        )
    names = [v.name for v in variables]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate context variable names")
    return ContextSchema(tuple(variables))


def schema_to_list(schema: ContextSchema) -> list[dict]:
    return [
        {"name": v.name, "values": list(v.values), "default": v.default} for v in schema.variables
    ]


@dataclass(frozen=True)
class ExperimentConfig:
    """Arms (one bandit per factor), context schema, encoding choice, policy mix."""

    factors: tuple[ArmSet, ...]
    schema: ContextSchema = field(default_factory=ContextSchema)
    context_terms: tuple[str, ...] | None = None
    interactions: tuple[str, ...] | None = None
    mixture_p: float = 0.5
    noise: NoiseParams = field(default_factory=NoiseParams)
    name: str = ""

    def __post_init__(self):
        if not self.factors:
            raise ConfigError("an experiment needs at least one factor")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate factor names")
        if not 0 <= self.mixture_p <= 1:
            raise ConfigError("mixture_p must lie in [0, 1]")
        for name in (*self.terms, *self.interaction_vars):
            if name not in self.schema:
                raise ConfigError(f"encoding references undeclared context {name!r}")
        for f in self.factors:
            noise_scale(self.noise, self.encoding(f.name).d)

    @property
    def terms(self) -> tuple[str, ...]:
        return self.schema.names if self.context_terms is None else tuple(self.context_terms)

    @property
    def interaction_vars(self) -> tuple[str, ...]:
        return self.terms if self.interactions is None else tuple(self.interactions)

    def factor(self, name: str) -> ArmSet:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    def encoding(self, factor: str) -> FeatureEncoding:
        arms = self.factor(factor)
        terms = self.terms
        inter = self.interaction_vars
        for var in inter:
            if var not in terms:
                raise ConfigError(f"interaction with {var!r} needs it as a context term")
        return FeatureEncoding(arms, terms, tuple((arms.name, v) for v in inter))

    def v(self, factor: str) -> float:
        return noise_scale(self.noise, self.encoding(factor).d)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ExperimentConfig":
        try:
            factors = tuple(
                ArmSet(str(f["name"]), int(f.get("levels", 2))) for f in doc["factors"]
            )
            terms = doc.get("context_terms")
            inter = doc.get("interactions")
            return cls(
                factors=factors,
                schema=parse_schema(doc.get("context")),
                context_terms=None if terms is None else tuple(terms),
                interactions=None if inter is None else tuple(inter),
                mixture_p=float(doc.get("mixture_p", 0.5)),
                noise=parse_noise(doc),
                name=str(doc.get("name", "")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, ParameterError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "factors": [{"name": f.name, "levels": f.levels} for f in self.factors],
            "context": schema_to_list(self.schema),
            "context_terms": None if self.context_terms is None else list(self.context_terms),
            "interactions": None if self.interactions is None else list(self.interactions),
            "mixture_p": self.mixture_p,
            "noise": noise_to_dict(self.noise),
        }


def trial_config_from_dict(doc: Mapping[str, Any]) -> TrialConfig:
    """Simulation config: one factor, a schema, bandit encoding and reward model.

    ``reward`` holds ``coefficients`` keyed by term name plus optional
    ``noise_sd``, ``grid``, ``missing_prob``; its encoding is the full
    encoding over the context variables its coefficients mention.
    """
    try:
        exp = ExperimentConfig.from_dict(doc)
        if len(exp.factors) != 1:
            raise ConfigError("a simulated trial has exactly one factor")
        arms = exp.factors[0]
        reward = doc["reward"]
        coefs = {str(k): float(x) for k, x in reward["coefficients"].items()}
        ctx_used = [c for c in exp.schema.names if any(c in k.split("*") for k in coefs)]
        model = RewardModel(
            encoding=FeatureEncoding.full(arms, ctx_used),
            coefficients=coefs,
            noise_sd=float(reward.get("noise_sd", 1 / 6)),
            grid=tuple(reward.get("grid", (0, 0.25, 0.5, 0.75, 1))),
            missing_prob=float(reward.get("missing_prob", 0.0)),
        )
        policy = doc.get("policy", "ContextualTS")
        return TrialConfig(
            n=int(doc.get("n", 1000)),
            arms=arms,
            schema=exp.schema,
            encoding=exp.encoding(arms.name),
            reward_model=model,
            mixture_p=policy_probability(policy),
            noise=exp.noise,
            update_every=int(doc.get("update_every", 1)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise ConfigError(f"invalid trial config: {exc}") from None


ENV_PREFIX = "MABTESTBED_"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    data_dir: Path = Path("./mabtestbed-data")
    refresh_interval_seconds: float = 300.0
    snapshot_every: int = 1000
    seed: int | None = None

    def __post_init__(self):
        self.data_dir = Path(self.data_dir)
        if self.refresh_interval_seconds <= 0:
            raise ConfigError("refresh_interval_seconds must be positive")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every must be >= 1")
        if not 0 < int(self.port) < 65536:
            raise ConfigError(f"invalid port {self.port}")

    @classmethod
    def load(cls, path: str | Path | None = None, env: Mapping[str, str] | None = None) -> "ServiceConfig":
        """File values, then ``MABTESTBED_*`` environment overrides."""
        doc = load_file(path) if path else {}
        env = os.environ if env is None else env
        listen = env.get(ENV_PREFIX + "LISTEN") or doc.get("listen")
        if listen:
            host, _, port = str(listen).rpartition(":")
            doc["host"], doc["port"] = host or "127.0.0.1", port
        for key, cast in (
            ("data_dir", str),
            ("refresh_interval_seconds", float),
            ("seed", int),
        ):
            if ENV_PREFIX + key.upper() in env:
                doc[key] = cast(env[ENV_PREFIX + key.upper()])
        if ENV_PREFIX + "REFRESH_INTERVAL" in env:
            doc["refresh_interval_seconds"] = float(env[ENV_PREFIX + "REFRESH_INTERVAL"])
        known = {"host", "port", "data_dir", "refresh_interval_seconds", "snapshot_every", "seed"}
        unknown = set(doc) - known - {"listen"}
        if unknown:
            raise ConfigError(f"unknown service config keys {sorted(unknown)}")
        try:
            return cls(
                host=str(doc.get("host", "127.0.0.1")),
                port=int(doc.get("port", 8000)),
                data_dir=Path(doc.get("data_dir", "./mabtestbed-data")),
                refresh_interval_seconds=float(doc.get("refresh_interval_seconds", 300.0)),
                snapshot_every=int(doc.get("snapshot_every", 1000)),
                seed=None if doc.get("seed") is None else int(doc["seed"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid service config: {exc}") from None
