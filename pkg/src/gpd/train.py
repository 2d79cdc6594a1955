"""Co-training loop: one shared parameter store, two views, one update.

Each step runs the wide view forward, re-extracts the compact view from
the same parameters, composes the objective over both sets of logits, and
applies a single SGD-with-momentum update to the shared store. The compact
view owns no parameters of its own, so its gradient contribution arrives
through the extraction map's tape.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .data import Dataset, DatasetSpec, hflip, load_dataset
from .errors import GpdError, NumericError
from .expand import ExpansionPlan, expand_model
from .losses import LossBreakdown, LossConfig, gpd_loss
from .model import ModelGraph, build_student, forward
from .ops import sgd_momentum_step, softmax_cross_entropy
from .tensor import Tensor

PROTOCOLS = ("scratch", "distill", "finetune")
CSV_HEADER = "epoch,iter,ce_s,kd_ss,ce_t,kd_sd,kd_ds,total,acc_s,acc_t,gap,ms"


@dataclass
class TrainConfig:
    """Everything one run needs besides output paths."""

    protocol: str = "scratch"
    arch: str = "convnet-small"
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple = (10, 13)
    decay_factor: float = 0.1
    seed: int = 0
    eval_every: int = 1
    hflip: bool = False
    plan: ExpansionPlan = field(default_factory=ExpansionPlan)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    static_ckpt: str = ""
    init_ckpt: str = ""

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol '{self.protocol}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0.0 or self.decay_factor <= 0.0:
            raise ValueError("rates must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def initial_lr(self) -> float:
        # fine-tuning restarts at a tenth of the base rate
        return self.lr * (0.1 if self.protocol == "finetune" else 1.0)

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for d in self.decay_epochs if epoch >= d)
        return self.initial_lr() * self.decay_factor**decays


@dataclass
class TrainRecord:
    epoch: int
    iteration: int
    ce_s: float
    kd_ss: float
    ce_t: float
    kd_sd: float
    kd_ds: float
    total: float
    acc_s: float
    acc_t: float
    gap: float
    ms: int

    def csv_row(self) -> str:
        vals = asdict(self)
        vals["iter"] = vals.pop("iteration")
        return ",".join(repr(vals[k]) if isinstance(vals[k], float) else str(vals[k])
                        for k in CSV_HEADER.split(","))


class RecordWriter:
    """Streams records to a CSV file, one flushed row per logged point."""

    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._fh = open(path, "w")
        self._fh.write(CSV_HEADER + "\n")
        self._fh.flush()

    def append(self, record: TrainRecord) -> None:
        self._fh.write(record.csv_row() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def make_velocities(model: ModelGraph) -> dict:
    return {name: np.zeros_like(t.data) for name, t in model.parameters()}


def apply_update(model: ModelGraph, velocities: dict, lr: float,
                 momentum: float, weight_decay: float) -> None:
    for name, p in model.parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.data, velocities[name] = sgd_momentum_step(
            p.data, g, velocities[name], lr, momentum, weight_decay)


def train_step(model: ModelGraph, static: Optional[ModelGraph],
               x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               lr: float, velocities: dict) -> LossBreakdown:
    """One shared-parameter update from one batch.

    The wide view runs first (updating its normalization statistics), then
    the compact view is re-extracted and run (updating its own statistics);
    a single backward pass accumulates both paths' gradients into the
    shared leaves before one SGD step.
    """
    xt = Tensor(x)
    if model.is_expanded:
        teacher_logits = forward(model, xt, "teacher", "train")
        student_logits = forward(model, xt, "student", "train")
        static_logits = None
        if static is not None:
            static_logits = forward(static, xt, "student", "eval").detach()
        lb = gpd_loss(student_logits, teacher_logits, y, cfg.loss, static_logits)
    else:
        # plain model: views coincide, so train on cross-entropy alone
        logits = forward(model, xt, "student", "train")
        ce = softmax_cross_entropy(logits, y)
        zero = Tensor(0.0)
        lb = LossBreakdown(ce, zero, Tensor(0.0), Tensor(0.0), Tensor(0.0), ce)

    model.zero_grad()
    lb.total.backward()
    apply_update(model, velocities, lr, cfg.momentum, cfg.weight_decay)
    return lb


def evaluate(model: ModelGraph, view: str, dataset: Dataset, batch_size: int = 256):
    """Top-1 accuracy and mean cross-entropy over a dataset, eval mode."""
    if len(dataset) == 0:
        raise GpdError("cannot evaluate on an empty dataset")
    correct = 0
    ce_sum = 0.0
    for xb, yb in dataset.batches(batch_size):
        logits = forward(model, Tensor(xb), view, "eval")
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        ce_sum += softmax_cross_entropy(logits, yb).item() * len(yb)
    n = len(dataset)
    return correct / n, ce_sum / n


@dataclass
class GapSummary:
    epoch0_gap: float
    gaps: List[float]  # per eval point after epoch 0
    frac_nonneg: float
    final_gap: float


def track_gap(records: List[TrainRecord]) -> GapSummary:
    """Per-epoch gap series from logged records."""
    if not records:
        raise GpdError("no records to summarize")
    epoch0 = [r for r in records if r.epoch == 0]
    later = [r for r in records if r.epoch > 0]
    gaps = [r.gap for r in later]
    frac = sum(1 for g in gaps if g >= 0.0) / len(gaps) if gaps else 1.0
    return GapSummary(
        epoch0_gap=epoch0[0].gap if epoch0 else float("nan"),
        gaps=gaps,
        frac_nonneg=frac,
        final_gap=records[-1].gap,
    )


def _build_model(cfg: TrainConfig):
    """Instantiate (model, static) per protocol."""
    shape, classes = cfg.dataset.shape, cfg.dataset.classes
    static = None
    if cfg.protocol == "distill":
        if not cfg.static_ckpt:
            raise GpdError("protocol 'distill' requires static_ckpt")
        static = load_checkpoint(cfg.static_ckpt)
        static.set_trainable(False)
    if cfg.protocol == "finetune":
        if not cfg.init_ckpt:
            raise GpdError("protocol 'finetune' requires init_ckpt")
        student = load_checkpoint(cfg.init_ckpt)
        if student.is_expanded:
            raise GpdError("finetune expects a plain student checkpoint")
    else:
        student = build_student(cfg.arch, shape, classes, seed=cfg.seed)

    if cfg.plan.ratio * cfg.plan.branches > 1:
        model = expand_model(student, cfg.plan)
    else:
        model = student
    return model, static


def _eval_record(model, eval_ds, sums, count, epoch, iteration, ms) -> TrainRecord:
    acc_s, _ = evaluate(model, "student", eval_ds)
    if model.is_expanded:
        acc_t, _ = evaluate(model, "teacher", eval_ds)
    else:
        acc_t = acc_s
    mean = {k: (v / count if count else 0.0) for k, v in sums.items()}
    return TrainRecord(epoch, iteration,
                       mean.get("ce_s", 0.0), mean.get("kd_ss", 0.0),
                       mean.get("ce_t", 0.0), mean.get("kd_sd", 0.0),
                       mean.get("kd_ds", 0.0), mean.get("total", 0.0),
                       acc_s, acc_t, acc_t - acc_s, ms)


def train(cfg: TrainConfig, out_dir: Optional[str] = None):
    """Run a full protocol; returns (model, records).

    When ``out_dir`` is given, records stream to ``records.csv`` and
    checkpoints are written at every evaluation point plus a final one.
    """
    if cfg.loss.use_static_teacher != (cfg.protocol == "distill"):
        raise GpdError("loss.use_static_teacher must match the protocol")

    train_ds, eval_ds = load_dataset(cfg.dataset)
    if train_ds.shape != tuple(cfg.dataset.shape):
        raise GpdError(f"dataset shape {train_ds.shape} != declared {cfg.dataset.shape}")
    model, static = _build_model(cfg)

    writer = RecordWriter(os.path.join(out_dir, "records.csv")) if out_dir else None
    velocities = make_velocities(model)
    records: List[TrainRecord] = []

    def emit(record):
        records.append(record)
        if writer:
            writer.append(record)
        if out_dir:
            save_checkpoint(model, os.path.join(out_dir, "teacher_last.ckpt"))

    t0 = time.perf_counter()
    emit(_eval_record(model, eval_ds, {}, 0, 0, 0,
                      int((time.perf_counter() - t0) * 1000)))

    iteration = 0
    sums: dict = {}
    count = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            epoch_start = time.perf_counter()
            lr = cfg.lr_at(epoch)
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(epoch,)))
            for xb, yb in train_ds.batches(cfg.batch_size, rng=rng):
                if cfg.hflip:
                    xb = hflip(xb, rng)
                lb = train_step(model, static, xb, yb, cfg, lr, velocities)
                iteration += 1
                count += 1
                for k, v in lb.values().items():
                    sums[k] = sums.get(k, 0.0) + v
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                ms = int((time.perf_counter() - epoch_start) * 1000)
                emit(_eval_record(model, eval_ds, sums, count, epoch, iteration, ms))
                sums, count = {}, 0
    except NumericError as exc:
        raise NumericError(
            f"non-finite loss at epoch {len(records)}, iteration {iteration}: {exc}"
        ) from exc
    finally:
        if writer:
            writer.close()

    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "teacher_final.ckpt"))
    return model, records
