"""Evaluation: split errors, corruption error, BN adaptation, saliency, calibration."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import CORRUPTIONS, CorruptionSpec, Dataset, apply_corruption
from .model import Model, forward
from .rng import derive_seed, stream
from .tensor import EVAL, TRAIN, Tensor, backward, weighted_sum

EVAL_CHUNK = 256


def predict_proba(model: Model, images: np.ndarray) -> np.ndarray:
    out = []
    for s in range(0, len(images), EVAL_CHUNK):
        out.append(forward(model, images[s:s + EVAL_CHUNK], EVAL)[2].data)
    return np.concatenate(out)


def error_rate(model: Model, split: Dataset) -> float:
    """Percentage of argmax misclassifications (ties go to the lower class index)."""
    if len(split) == 0:
        raise ValueError("empty split")
    pred = predict_proba(model, split.images).argmax(axis=1)
    return 100.0 * float(np.mean(pred != split.labels))


def accuracy(model: Model, split: Dataset) -> float:
    return 100.0 - error_rate(model, split)


# ---------------------------------------------------------------------------
# corruption error


def cell_key(kind: str, severity: int) -> str:
    return f"{kind}@{severity}"


def corruption_errors(model: Model, clean: Dataset, kinds: Sequence[str], severities: Sequence[int],
                      seed: int) -> dict[str, float]:
    """Error on every (kind, severity) cell; each cell's noise comes from its own seeded stream."""
    if not kinds:
        raise ValueError("need at least one corruption kind")
    if not severities:
        raise ValueError("need at least one severity")
    out = {}
    for kind in kinds:
        for sev in severities:
            imgs = apply_corruption(clean.images, CorruptionSpec(kind, sev), seed)
            out[cell_key(kind, sev)] = error_rate(model, Dataset(imgs, clean.labels))
    return out


def mean_corruption_error(model: Model, clean: Dataset, kinds: Sequence[str] = CORRUPTIONS,
                          severities: Sequence[int] = (1, 3, 5), seed: int = 0) -> dict:
    cells = corruption_errors(model, clean, kinds, severities, seed)
    return {
        "clean_error": error_rate(model, clean),
        "per_corruption_error": cells,
        "mce": mce_of(cells),
    }


def mce_of(cells: dict[str, float]) -> float:
    # sorted so the float sum does not depend on dict insertion order
    vals = [cells[k] for k in sorted(cells)]
    return float(sum(vals) / len(vals))


# ---------------------------------------------------------------------------
# BN statistics adaptation


def adapt_bn_statistics(model: Model, batch: np.ndarray, blend: float = 1.0) -> Model:
    """Copy of ``model`` whose BN running statistics are re-estimated on ``batch``.

    ``blend=1`` replaces the statistics outright; smaller values mix them with the
    source statistics. Learnable parameters are untouched.
    """
    if not model.bn:
        raise ValueError("nothing to adapt: model has no BatchNorm layers")
    if len(batch) < 2:
        raise ValueError("adaptation batch needs at least 2 samples")
    if not 0.0 < blend <= 1.0:
        raise ValueError("blend must be in (0, 1]")
    adapted = model.copy()
    was_frozen = adapted.frozen
    adapted.frozen = False
    saved = {}
    for i, st in adapted.bn.items():
        saved[i] = st.momentum
        st.momentum = blend
    forward(adapted, Tensor(np.asarray(batch)), TRAIN, update_stats=True)
    for i, st in adapted.bn.items():
        st.momentum = saved[i]
    adapted.frozen = was_frozen
    return adapted


SCENARIOS = ("AdaptOneTestOne", "AdaptOneTestAll", "AdaptAllTestAll")


@dataclass(frozen=True)
class AdaptScenario:
    kind: str
    adapt_batch_size: int = 32
    severity: int = 3
    adapt_corruption: str | None = None  # None: drawn from the seed (AdaptOneTestAll only)
    seed: int = 0
    blend: float = 1.0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.adapt_batch_size < 2:
            raise ValueError("adapt_batch_size must be >= 2")


def corrupted_test_sets(test: Dataset, kinds: Sequence[str], severity: int, seed: int) -> dict[str, Dataset]:
    return {k: Dataset(apply_corruption(test.images, CorruptionSpec(k, severity), seed), test.labels) for k in kinds}


def run_adapt_scenario(model: Model, scenario: AdaptScenario, test: Dataset,
                       kinds: Sequence[str] = CORRUPTIONS, corrupted: dict[str, Dataset] | None = None,
                       with_unadapted: bool = True) -> dict:
    """Per-kind test errors after adapting BN statistics as the scenario prescribes.

    Adaptation samples are drawn from the test pool and corrupted with their own
    seed stream, separate from the one used to corrupt the evaluated test set.
    ``corrupted`` may carry the output of ``corrupted_test_sets`` for the same
    severity and seed, so several scenarios can share it.
    """
    if not model.bn:
        raise ValueError("nothing to adapt: model has no BatchNorm layers")
    kinds = list(kinds)
    sev = scenario.severity
    seed = scenario.seed
    rng = stream(seed, "adapt-scenario", scenario.kind)
    idx = rng.choice(len(test), size=min(scenario.adapt_batch_size, len(test)), replace=False)
    base = test.images[idx]
    corrupted_test = corrupted if corrupted is not None else corrupted_test_sets(test, kinds, sev, seed)

    def adapt_on(kind):
        return adapt_bn_statistics(model, apply_corruption(base, CorruptionSpec(kind, sev),
                                                           derive_seed(seed, "adapt-batch")), scenario.blend)

    errors: dict[str, float] = {}
    adapted_to = None
    if scenario.kind == "AdaptOneTestOne":
        for k in kinds:
            errors[k] = error_rate(adapt_on(k), corrupted_test[k])
    else:
        if scenario.kind == "AdaptOneTestAll":
            adapted_to = scenario.adapt_corruption or kinds[int(rng.integers(len(kinds)))]
            m = adapt_on(adapted_to)
        else:
            assign = rng.permutation(np.arange(len(base)) % len(kinds))
            mixed = base.copy()
            for j, k in enumerate(kinds):
                sel = assign == j
                if sel.any():
                    mixed[sel] = apply_corruption(base[sel], CorruptionSpec(k, sev), derive_seed(seed, "adapt-batch"))
            m = adapt_bn_statistics(model, mixed, scenario.blend)
        for k in kinds:
            errors[k] = error_rate(m, corrupted_test[k])
    return {
        "scenario": scenario.kind,
        "adapted_to": adapted_to,
        "severity": sev,
        "errors": errors,
        "mean_error": float(sum(errors[k] for k in sorted(errors)) / len(errors)),
        "unadapted_errors": {k: error_rate(model, corrupted_test[k]) for k in kinds} if with_unadapted else None,
    }


# ---------------------------------------------------------------------------
# saliency


def input_saliency(model: Model, images: np.ndarray) -> np.ndarray:
    """|d(predicted-class logit)/d(input)| summed over channels, shape (N, H, W)."""
    out = []
    for s in range(0, len(images), EVAL_CHUNK):
        x = Tensor(images[s:s + EVAL_CHUNK], requires_grad=True)
        _, logits, _ = forward(model, x, EVAL)
        pick = np.zeros(logits.shape)
        pick[np.arange(len(pick)), logits.data.argmax(axis=1)] = 1.0
        backward(weighted_sum(logits, pick))
        g = np.zeros(x.shape) if x.grad is None else x.grad
        out.append(np.abs(g).sum(axis=1))
    return np.concatenate(out)


def saliency_reliance(model: Model, split: Dataset, region: np.ndarray) -> float:
    """Mean fraction of saliency mass inside ``region`` (a boolean (H, W) mask)."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("region is empty")
    sal = input_saliency(model, split.images)
    total = sal.sum(axis=(1, 2))
    # same reduction as ``total`` so a full-image region gives exactly 1
    inside = (sal * region).sum(axis=(1, 2))
    frac = np.divide(inside, total, out=np.zeros_like(total), where=total > 0)
    return float(np.clip(frac.mean(), 0.0, 1.0))


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationReport:
    rms_cal_err: float
    ma_cal_err: float
    miscalibration_area: float
    sharpness: float
    crps: float
    adversarial: dict = field(default_factory=dict)


def _check_probs(p: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] != labels.shape[0] or p.shape[0] == 0:
        raise ValueError(f"probabilities {p.shape} do not match labels {labels.shape}")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must be nonnegative and sum to 1")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError("label out of range")
    return p, labels


def _abs_area(x0, x1, d0, d1) -> float:
    """Exact integral of |d| for d linear from d0 at x0 to d1 at x1."""
    w = x1 - x0
    if d0 * d1 >= 0:
        return 0.5 * (abs(d0) + abs(d1)) * w
    return 0.5 * (d0 * d0 + d1 * d1) / (abs(d0) + abs(d1)) * w


def _binned_gaps(conf: np.ndarray, correct: np.ndarray, n_bins: int):
    b = np.minimum((conf * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    conf_sum = np.bincount(b, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(b, weights=correct.astype(np.float64), minlength=n_bins)
    nz = counts > 0
    return counts[nz], conf_sum[nz] / counts[nz], acc_sum[nz] / counts[nz]


def _cal_errors(conf, correct, n_bins):
    counts, mconf, macc = _binned_gaps(conf, correct, n_bins)
    gap = np.abs(macc - mconf)
    w = counts / counts.sum()
    return float(np.sum(w * gap)), float(math.sqrt(np.sum(w * gap * gap))), mconf, macc


def calibration_metrics(p, labels, n_bins: int = 15) -> CalibrationReport:
    """Binned calibration errors, miscalibration area, sharpness and CRPS.

    The miscalibration area integrates |accuracy - confidence| along the
    piecewise-linear reliability curve through the non-empty bins; with a single
    non-empty bin it is that bin's gap times the bin width.
    """
    p, labels = _check_probs(p, labels)
    conf = p.max(axis=1)
    correct = p.argmax(axis=1) == labels
    ma, rms, mconf, macc = _cal_errors(conf, correct, n_bins)
    d = macc - mconf
    if len(d) == 1:
        area = abs(d[0]) / n_bins
    else:
        area = sum(_abs_area(mconf[i], mconf[i + 1], d[i], d[i + 1]) for i in range(len(d) - 1))
    k = p.shape[1]
    cls = np.arange(k, dtype=np.float64)
    m1 = p @ cls
    sharp = float(np.mean(p @ (cls * cls) - m1 * m1))
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    crps = float(np.mean(np.sum((np.cumsum(p, axis=1) - np.cumsum(onehot, axis=1)) ** 2, axis=1)))
    return CalibrationReport(rms, ma, float(area), max(sharp, 0.0), crps)


def adversarial_calibration(p, labels, group_sizes: Iterable[float] = (0.11, 0.56, 1.0), n_groups: int = 10,
                            seed: int = 0, n_bins: int = 15) -> dict:
    """Worst mean-absolute and RMS calibration error over random subsets of each relative size."""
    p, labels = _check_probs(p, labels)
    conf = p.max(axis=1)
    correct = p.argmax(axis=1) == labels
    n = len(labels)
    out = {}
    for gs in group_sizes:
        size = max(1, int(math.ceil(gs * n)))
        rng = stream(seed, "adv-cal", gs)
        worst_ma = worst_rms = 0.0
        for _ in range(n_groups):
            idx = rng.choice(n, size=size, replace=False)
            ma, rms, _, _ = _cal_errors(conf[idx], correct[idx], n_bins)
            worst_ma, worst_rms = max(worst_ma, ma), max(worst_rms, rms)
        out[f"{gs:.2f}"] = {"ma": worst_ma, "rms": worst_rms}
    return out


# ---------------------------------------------------------------------------
# weight histograms


HIST_BINS = 101


def export_weight_histograms(trace: Sequence[tuple[int, Model]]) -> str:
    """CSV of per-layer weight histograms per epoch on a fixed symmetric range per layer."""
    if not trace:
        raise ValueError("need at least one checkpoint")
    layers = [name for name, _, role in trace[0][1].named_tensors() if role == "weight"]
    weights = {epoch: {n: a for n, a, role in m.named_tensors() if role == "weight"} for epoch, m in trace}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "epoch", "bin", "left", "right", "count"])
    for layer in layers:
        lim = max(float(np.abs(weights[e][layer]).max()) for e, _ in trace)
        lim = lim if lim > 0 else 1.0
        edges = np.linspace(-lim, lim, HIST_BINS + 1)
        for epoch, _ in trace:
            counts, _ = np.histogram(weights[epoch][layer], bins=edges)
            for i, c in enumerate(counts):
                w.writerow([layer, epoch, i, repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    return buf.getvalue()


# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    clean_error: float | None = None
    per_corruption_error: dict[str, float] = field(default_factory=dict)
    mce: float | None = None
    split_errors: dict[str, float] = field(default_factory=dict)
    reliance_score: float | None = None
    calibration: CalibrationReport | None = None

    def check(self) -> None:
        errs = [self.clean_error, self.mce, *self.per_corruption_error.values(), *self.split_errors.values()]
        for e in errs:
            if e is not None and not 0.0 <= e <= 100.0:
                raise ValueError(f"error percentage {e} outside [0, 100]")
        if self.per_corruption_error and self.mce != mce_of(self.per_corruption_error):
            raise ValueError("mce is not the mean of its per-corruption table")
        if self.calibration and self.calibration.ma_cal_err > self.calibration.rms_cal_err + 1e-12:
            raise ValueError("mean-absolute calibration error exceeds RMS")

    def to_dict(self) -> dict:
        self.check()
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
