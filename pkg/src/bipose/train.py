"""Optimizer, learning-rate schedule and the teacher-to-student distillation loop."""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import ConfigurationError, DivergenceError, InvalidInputError, TrainingComplete
from .evaluation import average_precision, decode_batch, oks, pckh, KeypointSet
from .layers import Conv2d, Module
from .losses import KD_TEMPERATURE, AWingParams, LossWeights, total_loss
from .model import BinaryPoseNet, NetworkConfig, build, teacher_config
from .synthdata import SynthDataset, batches

log = logging.getLogger(__name__)

LATENT_CLIP = 1.5


@dataclass(frozen=True)
class Schedule:
    """Step decay: ``base_lr`` divided by 10 at each milestone, stopping at ``epochs``."""

    epochs: int = 210
    milestones: tuple[int, ...] = (170, 200)
    base_lr: float = 1e-3
    factor: float = 0.1

    def lr_at(self, epoch: int) -> float:
        if epoch < 0:
            raise InvalidInputError("epoch must be non-negative")
        if epoch >= self.epochs:
            raise TrainingComplete(f"epoch {epoch} is past the final epoch {self.epochs - 1}")
        drops = sum(epoch >= m for m in self.milestones)
        return self.base_lr * self.factor**drops


PAPER_SCHEDULE = Schedule()
DESK_SCHEDULE = Schedule(epochs=20, milestones=(12, 16))


def lr_at(epoch: int, schedule: Schedule = PAPER_SCHEDULE) -> float:
    return schedule.lr_at(epoch)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Parameter], state: AdamState, lr: float, clip: dict | None = None, grads=None):
    """One bias-corrected Adam update in place; ``clip`` maps params to a symmetric bound."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for i, p in enumerate(params):
        g = p.grad if grads is None else grads[i]
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise InvalidInputError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
        if clip is not None and key in clip:
            np.clip(p.data, -clip[key], clip[key], out=p.data)


def latent_clip_map(model: Module, bound: float = LATENT_CLIP) -> dict[int, float]:
    return {id(m.weight): bound for m in model.modules() if isinstance(m, Conv2d) and m.binary}


@dataclass
class TrainConfig:
    schedule: Schedule = DESK_SCHEDULE
    batch_size: int = 16
    seed: int = 0
    alpha_mix: float = 1.0
    supervised: str = "awing"
    awing: AWingParams = AWingParams()
    # Target Gaussian width in heatmap cells.  At 16x16 heatmaps a sigma of 2
    # smears neighbouring joints together; 1 trains markedly sharper peaks.
    sigma: float = 1.0
    kd_temperature: float | None = KD_TEMPERATURE
    patience: int | None = None
    log_path: str | None = None


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 1e-3
    schedule: Schedule = DESK_SCHEDULE
    alpha_mix: float = 1.0
    seed: int = 0
    adam: AdamState = field(default_factory=AdamState)

    def record(self) -> dict:
        """JSON-safe summary stored next to checkpoints (moments are not persisted)."""
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "epochs": self.schedule.epochs,
            "milestones": list(self.schedule.milestones),
            "alpha_mix": self.alpha_mix,
            "seed": self.seed,
            "adam_step": self.adam.step,
        }


def prefetch(items: Iterable, capacity: int = 2) -> Iterator:
    """Produce ``items`` on a background thread through a bounded FIFO queue."""
    if capacity < 1:
        raise InvalidInputError("queue capacity must be positive")
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    errors: list[BaseException] = []

    def worker():
        try:
            for it in items:
                q.put(it)
        except BaseException as exc:  # pragma: no cover - surfaced below
            errors.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        it = q.get()
        if it is done:
            break
        yield it
    if errors:
        raise errors[0]


def _batch_stream(ds: SynthDataset, batch_size: int, seed: int, stride: int, sigma: float):
    targets = ds.targets(stride, sigma)
    for idx in batches(ds, batch_size, seed):
        yield ds.images[idx], targets[idx]


def distill_epoch(
    teacher: BinaryPoseNet | None,
    student: BinaryPoseNet,
    batch_stream: Iterable,
    state: TrainState,
    weights: LossWeights = LossWeights(),
    awing: AWingParams = AWingParams(),
    supervised: str = "awing",
    clip: dict | None = None,
) -> dict[str, float]:
    """One pass over ``batch_stream`` of ``(images, target_heatmaps)``.

    The teacher runs in inference mode without gradients; the student is
    trained on the blended loss.  Returns mean loss components.
    """
    if teacher is None and weights.alpha_mix < 1:
        raise ConfigurationError("distillation with alpha_mix < 1 needs a teacher")
    if teacher is not None:
        teacher.eval()
    student.train()
    params = student.parameters()
    if clip is None:
        clip = latent_clip_map(student)
    sums: dict[str, float] = {}
    count = 0
    for images, targets in batch_stream:
        x = Tensor(np.asarray(images, dtype=np.float32))
        t_out = None
        if teacher is not None and weights.alpha_mix < 1:
            with ag.no_grad():
                t_out = teacher(x).data
        s_out = student(x)
        if t_out is not None and t_out.shape != s_out.shape:
            raise ConfigurationError(f"teacher heatmaps {t_out.shape} vs student {s_out.shape}")
        loss, parts = total_loss(targets, s_out, t_out, weights, awing, supervised)
        if not math.isfinite(parts["total"]):
            raise DivergenceError(f"non-finite loss at epoch {state.epoch}: {parts}")
        student.zero_grad()
        ag.backward(loss)
        adam_step(params, state.adam, state.lr, clip)
        n = len(images)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v * n
        count += n
    return {k: v / count for k, v in sums.items()}


def evaluate(model: BinaryPoseNet, ds: SynthDataset, stride: int = 4) -> dict[str, float]:
    """PCKh@0.5, PCKh@0.1 and single-instance OKS AP on ``ds``."""
    heat = model.predict(ds.images)
    xy, _ = decode_batch(heat, stride)
    out = {
        "pck@0.5": pckh(xy, ds.keypoints, ds.head_length, 0.5, ds.visible),
        "pck@0.1": pckh(xy, ds.keypoints, ds.head_length, 0.1, ds.visible),
    }
    scores = [
        oks(xy[i], KeypointSet(ds.keypoints[i], ds.visible[i], ds.scale[i], ds.falloff)) for i in range(len(ds))
    ]
    out.update(average_precision(scores))
    return out


def fit(
    student: BinaryPoseNet,
    train: SynthDataset,
    cfg: TrainConfig,
    val: SynthDataset | None = None,
    teacher: BinaryPoseNet | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train ``student`` for the configured schedule; returns per-epoch records.

    With ``cfg.patience`` set and a validation split, training stops once
    PCKh@0.5 has not improved for that many epochs and the best weights are
    restored.
    """
    weights = LossWeights(cfg.alpha_mix, cfg.kd_temperature)
    state = TrainState(schedule=cfg.schedule, alpha_mix=cfg.alpha_mix, seed=cfg.seed)
    clip = latent_clip_map(student)
    history = []
    best = (-1.0, None)
    stale = 0
    log_file = open(cfg.log_path, "w") if cfg.log_path else None
    try:
        for epoch in range(cfg.schedule.epochs):
            state.epoch = epoch
            state.lr = cfg.schedule.lr_at(epoch)
            stream = _batch_stream(train, cfg.batch_size, cfg.seed * 100003 + epoch, 4, cfg.sigma)
            parts = distill_epoch(teacher, student, stream, state, weights, cfg.awing, cfg.supervised, clip)
            rec = {"epoch": epoch, "lr": state.lr, **parts}
            if val is not None:
                rec["val_pck"] = evaluate(student, val)["pck@0.5"]
            history.append(rec)
            log.info("epoch %d %s", epoch, rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(rec)
            if cfg.patience is not None and val is not None:
                if rec["val_pck"] > best[0]:
                    best = (rec["val_pck"], student.state_dict())
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        break
    finally:
        if log_file:
            log_file.close()
    if best[1] is not None:
        student.load_state_dict(best[1])
    student.train_state = state
    return history


def train_teacher(
    config: NetworkConfig, train: SynthDataset, cfg: TrainConfig, val: SynthDataset | None = None
) -> tuple[BinaryPoseNet, list[dict]]:
    """Train the real-valued twin of ``config`` with supervised loss only."""
    teacher = build(teacher_config(config))
    cfg = TrainConfig(**{**asdict_shallow(cfg), "alpha_mix": 1.0})
    history = fit(teacher, train, cfg, val)
    teacher.eval()
    return teacher, history


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def distill(
    teacher: BinaryPoseNet | None, student_config: NetworkConfig, train: SynthDataset, cfg: TrainConfig, val=None
) -> tuple[BinaryPoseNet, list[dict]]:
    """Build and train a student against a frozen teacher."""
    student = build(student_config)
    if teacher is not None and teacher.config.heatmap_size != student_config.heatmap_size:
        raise ConfigurationError("teacher and student heatmap shapes differ")
    history = fit(student, train, cfg, val, teacher)
    return student, history


# supervised loss and alpha_mix for each cell of the loss ablation
ABLATION_CELLS = {
    "mse": ("mse", 1.0),
    "awing": ("awing", 1.0),
    "mse+kd": ("mse", 0.5),
    "awing+kd": ("awing", 0.5),
}


def ablation(
    teacher: BinaryPoseNet,
    student_config: NetworkConfig,
    train: SynthDataset,
    val: SynthDataset,
    cfg: TrainConfig,
    seeds=(0, 1, 2),
    cells=tuple(ABLATION_CELLS),
) -> list[dict]:
    """Train one student per (cell, seed); rows carry the final validation metrics."""
    rows = []
    for cell in cells:
        if cell not in ABLATION_CELLS:
            raise ConfigurationError(f"unknown ablation cell {cell!r}")
        loss, mix = ABLATION_CELLS[cell]
        for seed in seeds:
            run_cfg = TrainConfig(**{**asdict_shallow(cfg), "supervised": loss, "alpha_mix": mix, "seed": seed})
            net_cfg = NetworkConfig.from_dict({**student_config.to_dict(), "seed": seed})
            student, hist = distill(teacher if mix < 1 else None, net_cfg, train, run_cfg)
            rows.append({"cell": cell, "seed": seed, **evaluate(student, val), "final_loss": hist[-1]["total"]})
    return rows
