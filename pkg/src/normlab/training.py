"""Baseline, teacher and Counterbalancing-Teacher training loops."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import Dataset
from .model import Model, ModelSpec, build_model, forward, strip_batchnorm
from .rng import stream
from .tensor import EVAL, TRAIN, Tensor, backward, mse_mean, one_hot, softmax_cross_entropy, sum_squares

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SGD(_Strict):
    name: Literal["sgd"] = "sgd"
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.0, ge=0, lt=1)
    nesterov: bool = False


class Adam(_Strict):
    name: Literal["adam"] = "adam"
    lr: float = Field(0.001, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Constant(_Strict):
    name: Literal["constant"] = "constant"


class CosineDecay(_Strict):
    name: Literal["cosine"] = "cosine"
    lr_start: float = Field(gt=0)
    lr_end: float = Field(ge=0)
    epochs: int = Field(ge=1)


class StepDecay(_Strict):
    name: Literal["step"] = "step"
    factor: float = Field(0.1, gt=0)
    at_epochs: tuple[int, ...] = ()


Optimizer = Union[SGD, Adam]
Schedule = Union[Constant, CosineDecay, StepDecay]


class TrainConfig(_Strict):
    optimizer: Optimizer = Field(default_factory=SGD, discriminator="name")
    schedule: Schedule = Field(default_factory=Constant, discriminator="name")
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(30, ge=1)
    l2_coefficient: float = Field(0.0, ge=0)
    seed: int = 0


class CTConfig(_Strict):
    teacher: TrainConfig = Field(default_factory=TrainConfig)
    student: TrainConfig = Field(default_factory=TrainConfig)
    lam: float = Field(1.0, ge=0, alias="lambda")

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


DESK_SHORTCUT = TrainConfig(optimizer=SGD(lr=0.01), batch_size=64, epochs=16)
FULL_SHORTCUT = TrainConfig(optimizer=SGD(lr=0.01), batch_size=128, epochs=100)
CIFAR_STUDENT = TrainConfig(
    optimizer=SGD(lr=0.1, momentum=0.9, nesterov=True),
    schedule=CosineDecay(lr_start=0.1, lr_end=1e-5, epochs=300),
    batch_size=64,
    epochs=300,
)


def lr_at(schedule: Schedule, epoch: int, base_lr: float | None = None) -> float:
    """Learning rate for ``epoch`` (0-based).

    Cosine decay runs from ``lr_start`` at epoch 0 to ``lr_end`` at ``epochs - 1``;
    a one-epoch cosine schedule just uses ``lr_start``.
    """
    if epoch < 0:
        raise ValueError(f"epoch {epoch} out of range")
    if isinstance(schedule, CosineDecay):
        if epoch >= schedule.epochs:
            raise ValueError(f"epoch {epoch} out of range for {schedule.epochs}-epoch cosine schedule")
        if schedule.epochs == 1:
            return schedule.lr_start
        c = math.cos(math.pi * epoch / (schedule.epochs - 1))
        return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + c)
    if base_lr is None:
        raise ValueError("base_lr required for non-cosine schedules")
    if isinstance(schedule, StepDecay):
        return base_lr * schedule.factor ** sum(1 for e in schedule.at_epochs if epoch >= e)
    return base_lr


class OptimizerState:
    def __init__(self, cfg: Optimizer, params: list[tuple[str, Tensor, bool]]):
        self.cfg = cfg
        self.params = params
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p, _ in params]
        self.v = [np.zeros_like(p.data) for _, p, _ in params]

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        for i, (_, p, _) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if isinstance(cfg, Adam):
                self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
                self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
                mhat = self.m[i] / (1 - cfg.beta1**self.t)
                vhat = self.v[i] / (1 - cfg.beta2**self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.eps)
            elif cfg.momentum > 0:
                self.m[i] = cfg.momentum * self.m[i] + g
                upd = g + cfg.momentum * self.m[i] if cfg.nesterov else self.m[i]
                p.data = p.data - lr * upd
            else:
                p.data = p.data - lr * g
            p.grad = None


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)
    l_cls: list[float] = field(default_factory=list)
    l_ct: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    split_errors: list[dict[str, float]] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        splits = sorted({k for row in self.split_errors for k in row})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "l_cls", "l_ct", "lr", *[f"error_{s}" for s in splits]])
        for e in range(self.epochs):
            errs = self.split_errors[e] if e < len(self.split_errors) else {}
            w.writerow([e, repr(self.loss[e]), repr(self.l_cls[e]), repr(self.l_ct[e]), repr(self.lr[e]),
                        *[repr(errs.get(s, float("nan"))) for s in splits]])
        return buf.getvalue()


def _batches(n: int, batch_size: int, perm: np.ndarray, min_size: int):
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _fit(model: Model, data: Dataset, cfg: TrainConfig, teacher: Model | None = None, lam: float = 0.0,
         eval_splits: dict[str, Dataset] | None = None,
         on_epoch: Callable[[int, Model], None] | None = None) -> TrainTrace:
    if model.frozen:
        raise ValueError("cannot train a frozen model")
    k = model.spec.num_classes
    has_bn = model.spec.has_batchnorm
    if has_bn and cfg.batch_size < 2:
        raise ValueError("batch_size must be >= 2 for a model with BatchNorm")
    params = model.parameters()
    weights = [p for _, p, is_w in params if is_w]
    opt = OptimizerState(cfg.optimizer, params)
    trace = TrainTrace()
    n = len(data)
    base_lr = cfg.optimizer.lr
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg.schedule, epoch, base_lr)
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        tot = cls_tot = ct_tot = 0.0
        seen = 0
        for idx in _batches(n, cfg.batch_size, perm, 2 if has_bn else 1):
            x = Tensor(data.images[idx])
            y = one_hot(data.labels[idx], k)
            f_s, logits, _ = forward(model, x, TRAIN)
            l_cls = softmax_cross_entropy(logits, y)
            loss = l_cls
            l_ct_val = 0.0
            if teacher is not None:
                f_t = forward(teacher, x, EVAL)[0]
                if f_t.shape != f_s.shape:
                    raise ValueError(f"teacher representation {f_t.shape} != student representation {f_s.shape}")
                l_ct = mse_mean(f_s, Tensor(f_t.data))
                loss = loss + lam * l_ct
                l_ct_val = l_ct.item()
            if cfg.l2_coefficient > 0:
                for w in weights:
                    loss = loss + cfg.l2_coefficient * sum_squares(w)
            backward(loss)
            opt.step(lr)
            b = len(idx)
            trace.step_loss.append(loss.item())
            tot += loss.item() * b
            cls_tot += l_cls.item() * b
            ct_tot += l_ct_val * b
            seen += b
        trace.loss.append(tot / seen)
        trace.l_cls.append(cls_tot / seen)
        trace.l_ct.append(ct_tot / seen)
        trace.lr.append(lr)
        if eval_splits:
            from .metrics import error_rate

            trace.split_errors.append({name: error_rate(model, ds) for name, ds in eval_splits.items()})
        log.debug("epoch %d loss %.5f l_cls %.5f l_ct %.5f lr %.3g", epoch, trace.loss[-1], trace.l_cls[-1],
                  trace.l_ct[-1], lr)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return trace


def train_baseline(spec: ModelSpec, data: Dataset, cfg: TrainConfig,
                   eval_splits: dict[str, Dataset] | None = None,
                   on_epoch: Callable[[int, Model], None] | None = None) -> tuple[Model, TrainTrace]:
    model = build_model(spec, cfg.seed)
    trace = _fit(model, data, cfg, eval_splits=eval_splits, on_epoch=on_epoch)
    return model, trace


def train_teacher(spec: ModelSpec, data: Dataset, cfg: TrainConfig,
                  eval_splits: dict[str, Dataset] | None = None) -> tuple[Model, TrainTrace]:
    """Train a BN-free model with cross-entropy and return it frozen."""
    if spec.has_batchnorm:
        raise ValueError("teacher must be BN-free")
    model, trace = train_baseline(spec, data, cfg, eval_splits)
    return model.freeze(), trace


def train_student_ct(spec: ModelSpec, teacher: Model, data: Dataset, cfg: TrainConfig, lam: float,
                     eval_splits: dict[str, Dataset] | None = None) -> tuple[Model, TrainTrace]:
    """Train ``spec`` on cross-entropy + ``lam`` * mean squared representation gap to ``teacher``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if not teacher.frozen:
        raise ValueError("teacher must be frozen before student training")
    if strip_batchnorm(spec) != teacher.spec:
        raise ValueError("teacher spec must equal the student spec with BatchNorm removed")
    before = teacher.state_hash()
    model = build_model(spec, cfg.seed)
    trace = _fit(model, data, cfg, teacher=teacher, lam=lam, eval_splits=eval_splits)
    if teacher.state_hash() != before:
        raise RuntimeError("teacher state changed during student training")
    return model, trace
