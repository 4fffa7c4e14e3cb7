"""Pipeline configuration: a YAML document mirroring :class:`PipelineConfig`."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from stepconf import seeding
from stepconf.conformal import Thresholds
from stepconf.envsim import EnvConfig, EnvKind, PolicyProfile, RepresentationConfig
from stepconf.errors import InvalidConfig
from stepconf.probes import TrainConfig
from stepconf.reward import RolloutBudget
from stepconf.trajectory import Split


@dataclass(frozen=True)
class SteeringConfig:
    layer: int | None = None  # None: best validation probe at the first intervention timestep
    timesteps: tuple[int, ...] = (3,)
    coefficient: float = 0.025
    n_episodes: int = 2000
    hazard_bias: float = 4.0
    hazard_slope: float = 4.0
    susceptible: tuple[int, ...] | None = (3,)
    min_per_class: int = 10


@dataclass(frozen=True)
class PipelineConfig:
    env: EnvConfig = EnvConfig()
    rep: RepresentationConfig = RepresentationConfig()
    profiles: Mapping[str, tuple[PolicyProfile, float]] = field(
        default_factory=lambda: {
            "expert": (PolicyProfile(), 0.3),
            "noisy": (PolicyProfile(kind="noisy", error_rate=0.3), 0.3),
            "drifting": (PolicyProfile(kind="drifting", drift_onset=(1, 8)), 0.4),
        }
    )
    budget: RolloutBudget = RolloutBudget()
    thresholds: Thresholds = Thresholds()
    train: TrainConfig = TrainConfig()
    steering: SteeringConfig = SteeringConfig()
    splits: Mapping[str, float] = field(
        default_factory=lambda: {"train": 0.6, "calibration": 0.2, "probe_train": 0.2}
    )
    n_episodes: int = 1000
    n_test_id: int = 200
    n_test_ood: int = 200
    start_timestep: int = 2
    calibration_labels: str = "oracle"  # or "final-outcome"
    min_per_cell: int = 20
    test_labels: str = "conformal"  # or "oracle"
    compare_kinds: tuple[str, ...] = ()
    dataset: str | None = None  # name of an ingested dataset to use instead of generating
    emit_annotated: bool = False
    output_dir: str = "runs/default"
    master_seed: int = 0

    def __post_init__(self):
        total = sum(self.splits.values())
        if set(self.splits) != {"train", "calibration", "probe_train"}:
            raise InvalidConfig("splits needs exactly train, calibration and probe_train")
        if abs(total - 1.0) > 1e-9:
            raise InvalidConfig(f"split fractions sum to {total}, not 1")
        if any(v < 0 for v in self.splits.values()):
            raise InvalidConfig("split fractions must be non-negative")
        if self.n_episodes < 1 or self.n_test_id < 0 or self.n_test_ood < 0:
            raise InvalidConfig("episode counts must be positive")
        if self.calibration_labels not in ("oracle", "final-outcome"):
            raise InvalidConfig("calibration_labels must be 'oracle' or 'final-outcome'")
        if self.test_labels not in ("conformal", "oracle"):
            raise InvalidConfig("test_labels must be 'conformal' or 'oracle'")
        if self.start_timestep < 1:
            raise InvalidConfig("start_timestep is 1-based and must be >= 1")
        if not self.profiles:
            raise InvalidConfig("at least one policy profile is required")
        for profile, weight in self.profiles.values():
            profile.check_horizon(self.env.horizon)
            if weight < 0:
                raise InvalidConfig("profile weights must be non-negative")
        for kind in self.compare_kinds:
            EnvKind(kind)
        for t in self.steering.timesteps:
            if not 1 <= t <= self.env.horizon:
                raise InvalidConfig(f"intervention timestep {t} outside horizon")
        if self.steering.layer is not None and self.steering.layer not in self.rep.layers:
            raise InvalidConfig(f"steering layer {self.steering.layer} not in {self.rep.layers}")

    @property
    def kinds(self) -> list[EnvKind]:
        out = [self.env.kind]
        for k in self.compare_kinds:
            if EnvKind(k) not in out:
                out.append(EnvKind(k))
        return out

    @property
    def split_plan(self) -> dict[Split, float]:
        return {
            Split.TRAIN: self.splits["train"],
            Split.CALIBRATION: self.splits["calibration"],
            Split.PROBE_TRAIN: self.splits["probe_train"],
        }

    def env_for(self, kind: EnvKind | str) -> EnvConfig:
        return replace(self.env, kind=EnvKind(kind))

    def seeded(self) -> PipelineConfig:
        """Copy whose component seeds all derive from ``master_seed``."""
        m = self.master_seed
        return replace(
            self,
            env=replace(self.env, seed=seeding.derive_seed(m, "env")),
            rep=replace(self.rep, seed=seeding.derive_seed(m, "rep")),
            profiles={
                name: (replace(p, seed=seeding.derive_seed(m, "policy", name)), w)
                for name, (p, w) in self.profiles.items()
            },
            budget=replace(self.budget, seed=seeding.derive_seed(m, "reward")),
            train=replace(self.train, seed=seeding.derive_seed(m, "probe")),
        )

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["env"] = {**asdict(self.env), "kind": self.env.kind.value}
        d["rep"] = {**asdict(self.rep), "layers": list(self.rep.layers)}
        d["profiles"] = {
            name: {
                "kind": p.kind.value,
                "weight": w,
                **({"error_rate": p.error_rate} if p.error_rate is not None else {}),
                **({"drift_onset": list(p.drift_onset)} if p.drift_onset is not None else {}),
                "seed": p.seed,
            }
            for name, (p, w) in self.profiles.items()
        }
        d["budget"] = asdict(self.budget)
        d["thresholds"] = asdict(self.thresholds)
        d["train"] = asdict(self.train)
        st = asdict(self.steering)
        st["timesteps"] = list(st["timesteps"])
        st["susceptible"] = None if st["susceptible"] is None else list(st["susceptible"])
        d["steering"] = st
        d["splits"] = dict(self.splits)
        d["compare_kinds"] = list(self.compare_kinds)
        return d

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def _sub(cls, raw: Mapping | None, base):
    if raw is None:
        return base
    names = {f.name for f in fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    vals = dict(raw)
    for key in ("layers", "timesteps", "susceptible"):
        if key in vals and vals[key] is not None:
            vals[key] = tuple(vals[key])
    try:
        return replace(base, **vals)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{cls.__name__}: {exc}") from exc


def _profiles(raw: Mapping[str, Mapping]) -> dict[str, tuple[PolicyProfile, float]]:
    out = {}
    for name, spec in raw.items():
        spec = dict(spec)
        weight = float(spec.pop("weight", 1.0))
        if "drift_onset" in spec and spec["drift_onset"] is not None:
            spec["drift_onset"] = tuple(spec["drift_onset"])
        try:
            out[name] = (PolicyProfile(**spec), weight)
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"profile '{name}': {exc}") from exc
    return out


def config_from_dict(raw: Mapping[str, Any]) -> PipelineConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - top
    if unknown:
        raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    try:
        kwargs["env"] = _sub(EnvConfig, raw.pop("env", None), EnvConfig())
        kwargs["rep"] = _sub(RepresentationConfig, raw.pop("rep", None), RepresentationConfig())
        kwargs["budget"] = _sub(RolloutBudget, raw.pop("budget", None), RolloutBudget())
        kwargs["thresholds"] = _sub(Thresholds, raw.pop("thresholds", None), Thresholds())
        kwargs["train"] = _sub(TrainConfig, raw.pop("train", None), TrainConfig())
        kwargs["steering"] = _sub(SteeringConfig, raw.pop("steering", None), SteeringConfig())
        if "profiles" in raw:
            kwargs["profiles"] = _profiles(raw.pop("profiles"))
        if "compare_kinds" in raw:
            kwargs["compare_kinds"] = tuple(raw.pop("compare_kinds") or ())
        kwargs.update(raw)
        return PipelineConfig(**kwargs)
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path: str | Path) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise InvalidConfig("config file must hold a mapping")
    return config_from_dict(raw or {})


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
