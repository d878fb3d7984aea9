"""YAML run configuration: every key optional, unknown keys rejected.

Layout::

    scene:   {image_size, classes, objects_per_image, object_size, foreground_intensity,
              background_mean, noise_std, min_center_separation}
    data:    {train_count, test_count, seed}
    cycle:   {any CycleConfig field except ``loss``}
    loss:    {lambda, focal_alpha, focal_gamma, clamp_eps, instance_norm}
    output:  {heatmap_count, record_timing}
    sweep:   {lambda: [...], k: [...], strategy: [...], seed: [...]}
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .activeloop import CycleConfig
from .losses import LossConfig
from .synthdata import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    lambdas: tuple[float, ...] = (0.5,)
    ks: tuple[int | str, ...] = (20,)
    strategies: tuple[str, ...] = ("miaod_iur",)
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train_count: int = 600
    test_count: int = 200
    data_seed: int = 1
    cycle: CycleConfig = field(default_factory=CycleConfig)
    heatmap_count: int = 2
    record_timing: bool = False
    sweep: SweepGrid = field(default_factory=SweepGrid)


_LOSS_KEYS = {"lambda": "lam", "focal_alpha": "focal_alpha", "focal_gamma": "focal_gamma",
              "clamp_eps": "clamp_eps", "instance_norm": "instance_norm"}
_SWEEP_KEYS = {"lambda": "lambdas", "k": "ks", "strategy": "strategies", "seed": "seeds"}


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {}) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    return value


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def parse_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    _reject_unknown("top level", raw, ("scene", "data", "cycle", "loss", "output", "sweep"))
    try:
        scene_raw = _section(raw, "scene")
        _reject_unknown("scene", scene_raw, [f.name for f in fields(SceneSpec)])
        scene = SceneSpec(**scene_raw)

        data = _section(raw, "data")
        _reject_unknown("data", data, ("train_count", "test_count", "seed"))

        loss_raw = _section(raw, "loss")
        _reject_unknown("loss", loss_raw, _LOSS_KEYS)
        loss = LossConfig(**{_LOSS_KEYS[k]: v for k, v in loss_raw.items()})

        cycle_raw = _section(raw, "cycle")
        _reject_unknown("cycle", cycle_raw, [f.name for f in fields(CycleConfig) if f.name != "loss"])
        cycle = CycleConfig(loss=loss, **cycle_raw)

        out = _section(raw, "output")
        _reject_unknown("output", out, ("heatmap_count", "record_timing"))

        sweep_raw = _section(raw, "sweep")
        _reject_unknown("sweep", sweep_raw, _SWEEP_KEYS)
        sweep = SweepGrid(**{_SWEEP_KEYS[k]: tuple(_as_list(v)) for k, v in sweep_raw.items()})

        cfg = RunConfig(scene=scene,
                        train_count=int(data.get("train_count", 600)),
                        test_count=int(data.get("test_count", 200)),
                        data_seed=int(data.get("seed", 1)),
                        cycle=cycle,
                        heatmap_count=int(out.get("heatmap_count", 2)),
                        record_timing=bool(out.get("record_timing", False)),
                        sweep=sweep)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.train_count <= 0 or cfg.test_count <= 0:
        raise ConfigError("train_count and test_count must be positive")
    if cfg.heatmap_count < 0:
        raise ConfigError("heatmap_count must be non-negative")
    if not all(cfg.sweep.__dict__.values()):
        raise ConfigError("every sweep axis needs at least one value")
    for k in cfg.sweep.ks:
        if k != "N" and (not isinstance(k, int) or k < 1):
            raise ConfigError(f"sweep k values must be positive integers or 'N', got {k!r}")


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    return parse_config(raw)


def with_overrides(cfg: RunConfig, seed=None, strategy=None, lam=None, k=None) -> RunConfig:
    cycle = cfg.cycle
    try:
        if lam is not None:
            cycle = replace(cycle, loss=replace(cycle.loss, lam=float(lam)))
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if strategy is not None:
            changes["strategy"] = strategy
        if k is not None:
            changes["k"] = int(k)
        cycle = replace(cycle, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return replace(cfg, cycle=cycle)
