"""Run configuration as ``key = value`` text with one section per stage.

Example::

    [network]
    joints = 5
    input_size = 64, 64
    width = 8
    binarize = true

    [stage1]
    blocks = 4
    [stage2]
    blocks = 0, 4

    [data]
    train_size = 1024

    [train]
    epochs = 20
    milestones = 12, 16
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .losses import AWingParams
from .model import NetworkConfig
from .synthdata import SynthSpec
from .train import DESK_SCHEDULE, Schedule, TrainConfig

_TRAIN_BASE = TrainConfig()
_STAGE = re.compile(r"stage(\d+)$")
# float keys that also accept "none"
_NULLABLE = {"train.kd_temperature"}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            if key in _NULLABLE and raw.strip().lower() == "none":
                return None
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(p) for p in parts)
        if default is None:
            return None if raw.strip().lower() in ("", "none") else int(raw)
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"bad value for {key!r}: {raw!r}") from None


def _section(parser, name: str, defaults: dict, skip=()) -> dict:
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key in skip:
            continue
        if key not in defaults:
            raise ConfigurationError(f"unknown key {key!r} in [{name}]")
        out[key] = _convert(raw, defaults[key], f"{name}.{key}")
    return out


def parse(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"unreadable config: {exc}") from None
    known = {"network", "data", "train"}
    for name in parser.sections():
        if name not in known and not _STAGE.match(name):
            raise ConfigurationError(f"unknown section [{name}]")

    base = NetworkConfig()
    net_defaults = {f.name: getattr(base, f.name) for f in fields(NetworkConfig)}
    net = _section(parser, "network", net_defaults, skip=("stages", "num_modules"))

    stage_ids = sorted(int(_STAGE.match(s).group(1)) for s in parser.sections() if _STAGE.match(s))
    if stage_ids:
        if stage_ids != list(range(1, len(stage_ids) + 1)):
            raise ConfigurationError(f"stage sections must be numbered 1..n, got {stage_ids}")
        stages, modules = [], []
        for i in stage_ids:
            sec = _section(parser, f"stage{i}", {"blocks": (0,), "modules": 1})
            if "blocks" not in sec:
                raise ConfigurationError(f"[stage{i}] needs a blocks entry")
            stages.append(sec["blocks"])
            modules.append(sec.get("modules", 1))
        net["stages"] = tuple(stages)
        net["num_modules"] = tuple(modules)

    spec_base = SynthSpec()
    data = _section(parser, "data", {f.name: getattr(spec_base, f.name) for f in fields(SynthSpec)})

    tr_defaults = {
        "epochs": DESK_SCHEDULE.epochs,
        "milestones": DESK_SCHEDULE.milestones,
        "lr": DESK_SCHEDULE.base_lr,
        "batch_size": _TRAIN_BASE.batch_size,
        "seed": _TRAIN_BASE.seed,
        "alpha_mix": _TRAIN_BASE.alpha_mix,
        "loss": _TRAIN_BASE.supervised,
        "sigma": _TRAIN_BASE.sigma,
        "kd_temperature": _TRAIN_BASE.kd_temperature,
        "patience": _TRAIN_BASE.patience,
    }
    tr = {**tr_defaults, **_section(parser, "train", tr_defaults)}
    if tr["loss"] not in ("awing", "mse"):
        raise ConfigurationError(f"loss must be awing or mse, got {tr['loss']!r}")
    try:
        schedule = Schedule(tr["epochs"], tr["milestones"], tr["lr"])
        train = TrainConfig(
            schedule=schedule,
            batch_size=tr["batch_size"],
            seed=tr["seed"],
            alpha_mix=tr["alpha_mix"],
            supervised=tr["loss"],
            awing=AWingParams(),
            sigma=tr["sigma"],
            kd_temperature=tr["kd_temperature"],
            patience=tr["patience"],
        )
        if train.batch_size < 1 or schedule.epochs < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0.0 <= train.alpha_mix <= 1.0:
            raise ConfigurationError("alpha_mix must lie in [0, 1]")
        if train.kd_temperature is not None and not train.kd_temperature > 0:
            raise ConfigurationError("kd_temperature must be positive or none")
        return RunConfig(NetworkConfig(**net), SynthSpec(**data), train)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from None


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return parse(p.read_text())


def dump(cfg: RunConfig) -> str:
    """Inverse of :func:`parse` (modulo formatting)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    n = cfg.network
    lines = ["[network]"]
    for f in fields(NetworkConfig):
        if f.name not in ("stages", "num_modules"):
            lines.append(f"{f.name} = {fmt(getattr(n, f.name))}")
    for i, (blocks, mods) in enumerate(zip(n.stages, n.num_modules), 1):
        lines += ["", f"[stage{i}]", f"blocks = {fmt(blocks)}", f"modules = {mods}"]
    lines += ["", "[data]"]
    for f in fields(SynthSpec):
        lines.append(f"{f.name} = {fmt(getattr(cfg.data, f.name))}")
    t = cfg.train
    lines += [
        "",
        "[train]",
        f"epochs = {t.schedule.epochs}",
        f"milestones = {fmt(t.schedule.milestones)}",
        f"lr = {t.schedule.base_lr}",
        f"batch_size = {t.batch_size}",
        f"seed = {t.seed}",
        f"alpha_mix = {t.alpha_mix}",
        f"loss = {t.supervised}",
        f"sigma = {t.sigma}",
        f"kd_temperature = {'none' if t.kd_temperature is None else t.kd_temperature}",
        f"patience = {'none' if t.patience is None else t.patience}",
    ]
    return "\n".join(lines) + "\n"
