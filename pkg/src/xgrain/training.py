"""Batch assembly, learning-rate schedule, optimizer, and the train loop.

Batches mix annotated and caption-only images: half the slots (rounding
down) come from annotated records whenever any exist. Every image
contributes its caption pair; each annotated image additionally contributes
exactly one uniformly sampled concept pair, subject to the ablation flags.
The optimizer is Adam with bias correction plus decoupled weight decay, and
gradients are clipped by global norm before each step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset
from .errors import ContractError
from .geometry import NormBox
from .objectives import AlignmentModel, prepare_batch, total_loss

log = logging.getLogger(__name__)

GRAD_CLIP_NORM = 1.0


# ---------------------------------------------------------------------------
# batches

@dataclass
class TrainBatch:
    images: np.ndarray  # [B, H, W, 3] floats in [0, 1]
    pairs: list[tuple[int, str, NormBox | None, str]]  # (image slot, text, box, kind)
    record_ids: list[str]


@dataclass(frozen=True)
class AblationFlags:
    no_object: bool = False
    no_region: bool = False
    no_bbox_loss: bool = False


def _draw(pool: list[int], n: int, rng: np.random.Generator) -> list[int]:
    if n <= 0:
        return []
    replace = len(pool) < n
    return [int(i) for i in rng.choice(len(pool), size=n, replace=replace)]


def assemble_batch(dataset: Dataset, batch_size: int, flags: AblationFlags,
                   rng: np.random.Generator) -> TrainBatch:
    """Sample one mixed batch: ``batch_size // 2`` annotated slots when possible."""
    if len(dataset) == 0:
        raise ContractError("assemble_batch: empty dataset")
    if batch_size < 2:
        raise ContractError(f"assemble_batch: batch_size must be >= 2, got {batch_size}")

    chosen: list[int] = []
    if dataset.annotated:
        chosen += [dataset.annotated[i] for i in _draw(dataset.annotated, batch_size // 2, rng)]
    filler = dataset.caption_only if dataset.caption_only else dataset.annotated
    chosen += [filler[i] for i in _draw(filler, batch_size - len(chosen), rng)]

    images = np.stack([dataset.image(i) for i in chosen]).astype(np.float64) / 255.0
    pairs: list[tuple[int, str, NormBox | None, str]] = []
    for slot, index in enumerate(chosen):
        record = dataset.records[index]
        if record.caption:
            pairs.append((slot, record.caption, None, "caption"))
        eligible = [c for c in record.concepts
                    if not (flags.no_object and c.kind == "object")
                    and not (flags.no_region and c.kind == "region")]
        if record.concepts:
            # one draw per annotated record regardless of the flags, so every
            # ablation sees the identical stream of chosen records
            draw = int(rng.integers(0, len(record.concepts)))
            if eligible:
                concept = eligible[draw % len(eligible)]
                pairs.append((slot, concept.text, concept.box, concept.kind))
    return TrainBatch(images=images, pairs=pairs,
                      record_ids=[dataset.records[i].image_id for i in chosen])


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass(frozen=True)
class Schedule:
    lr_start: float
    lr_peak: float
    lr_end: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ContractError(f"Schedule: warmup {self.warmup_steps} outside "
                                f"[0, {self.total_steps}]")
        if self.total_steps < 1:
            raise ContractError(f"Schedule: total_steps must be >= 1, got {self.total_steps}")
        if min(self.lr_start, self.lr_peak, self.lr_end) < 0:
            raise ContractError("Schedule: learning rates must be non-negative")


def lr_at(step: int, s: Schedule) -> float:
    """Piecewise-linear rate: start->peak over warmup, peak->end after."""
    if step < 0 or step > s.total_steps:
        raise ContractError(f"lr_at: step {step} outside [0, {s.total_steps}]")
    if s.warmup_steps > 0 and step <= s.warmup_steps:
        t = step / s.warmup_steps
        return s.lr_start * (1.0 - t) + s.lr_peak * t
    if s.total_steps == s.warmup_steps:
        return s.lr_peak
    t = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.lr_peak * (1.0 - t) + s.lr_end * t


# ---------------------------------------------------------------------------
# optimizer

class OptimizerState:
    """Adam moments plus decoupled weight decay, kept in float64."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = 0.02,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.data.shape, dtype=np.float64) for name, p in params.items()}
        self.v = {name: np.zeros(p.data.shape, dtype=np.float64) for name, p in params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray([float(self.t)])}
        for name, a in self.m.items():
            out[f"m.{name}"] = a
        for name, a in self.v.items():
            out[f"v.{name}"] = a
        return out

    @classmethod
    def from_arrays(cls, params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                    weight_decay: float = 0.02) -> "OptimizerState":
        state = cls(params, weight_decay=weight_decay)
        state.t = int(arrays["t"][0])
        for name in params:
            # copy so the restored state never aliases the caller's buffers
            state.m[name] = np.array(arrays[f"m.{name}"], dtype=np.float64)
            state.v[name] = np.array(arrays[f"v.{name}"], dtype=np.float64)
        return state


def clip_gradients(params: dict[str, Tensor], max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


def optimizer_step(params: dict[str, Tensor], state: OptimizerState, lr: float) -> bool:
    """Apply one update; returns False (params untouched) on non-finite grads."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            log.warning("optimizer_step: non-finite gradient in %s; step skipped", name)
            return False
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) * (1.0 - lr * state.weight_decay) - update).astype(p.data.dtype)
    return True


# ---------------------------------------------------------------------------
# the loop

@dataclass(frozen=True)
class TrainSettings:
    total_steps: int = 3000
    warmup_steps: int = 300
    lr_start: float = 5e-5
    lr_peak: float = 5e-4
    lr_end: float = 5e-5
    batch_size: int = 32
    weight_decay: float = 0.02
    grad_clip: float = GRAD_CLIP_NORM
    checkpoint_interval: int = 1000
    seed: int = 0

    def schedule(self) -> Schedule:
        return Schedule(lr_start=self.lr_start, lr_peak=self.lr_peak, lr_end=self.lr_end,
                        warmup_steps=self.warmup_steps, total_steps=self.total_steps)


def train(model: AlignmentModel, dataset: Dataset, settings: TrainSettings, out_dir,
          flags: AblationFlags = AblationFlags(), start_step: int = 0,
          optimizer: OptimizerState | None = None) -> dict:
    """Run steps start_step+1 .. total_steps, logging one JSONL line each.

    Writes metrics.jsonl (appending when resuming) and a checkpoint/ dir
    under out_dir every checkpoint_interval steps and at the end. Raises on
    a non-finite total loss, naming the records in the offending batch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = settings.schedule()
    if start_step >= schedule.total_steps:
        raise ContractError(f"train: start step {start_step} is already past "
                            f"total_steps {schedule.total_steps}")
    params = model.params()
    state = optimizer if optimizer is not None else OptimizerState(params, settings.weight_decay)
    rng = np.random.default_rng([settings.seed, start_step])
    metrics_path = out / "metrics.jsonl"
    checkpoint_dir = out / "checkpoint"
    last_report = None

    with open(metrics_path, "a" if start_step > 0 else "w", encoding="utf-8") as mfh:
        for step in range(start_step + 1, schedule.total_steps + 1):
            lr = lr_at(step - 1, schedule)
            batch = assemble_batch(dataset, settings.batch_size, flags, rng)
            prepared = prepare_batch(batch, dataset.vocab, model.cfg, rng,
                                     include_bbox=not flags.no_bbox_loss)
            result = total_loss(model, prepared, rng=rng)
            report = result.report
            if not math.isfinite(report.total):
                log.error("train: non-finite loss at step %d; records %s", step, prepared.record_ids)
                raise ContractError(
                    f"train: non-finite total loss at step {step}; "
                    f"offending batch records: {prepared.record_ids}")
            model.zero_grads()
            ag.backward(result.total)
            clip_gradients(params, settings.grad_clip)
            if optimizer_step(params, state, lr):
                model.clamp_constraints()
            line = {"step": step, "lr": lr, "l_bbox": report.l_bbox, "l_cl": report.l_cl,
                    "l_match": report.l_match, "l_mlm": report.l_mlm, "total": report.total}
            mfh.write(json.dumps(line) + "\n")
            last_report = line
            if step % settings.checkpoint_interval == 0 or step == schedule.total_steps:
                model.save(checkpoint_dir, step=step, optimizer_arrays=state.arrays())
    return {"steps_run": schedule.total_steps - start_step,
            "final": last_report, "checkpoint": str(checkpoint_dir),
            "metrics": str(metrics_path)}
