"""Experiment configs and seeded end-to-end pipelines with deterministic outputs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from threadpoolctl import threadpool_limits

from . import __version__
from .data import CORRUPTIONS, SPLITS, Dataset, ShortcutDatasetConfig, generate_shortcut_dataset
from .metrics import (
    SCENARIOS,
    AdaptScenario,
    MetricsReport,
    adversarial_calibration,
    calibration_metrics,
    cell_key,
    corruption_errors,
    corrupted_test_sets,
    error_rate,
    export_weight_histograms,
    mce_of,
    predict_proba,
    run_adapt_scenario,
    saliency_reliance,
)
from .model import Model, appendix_cnn, mlp, save_checkpoint, strip_batchnorm
from .rng import derive_seed, stream
from .theory import (
    centering_analysis,
    analytic_ratio_gain,
    bias_rows_csv,
    check_projection_identity,
    max_margin_solve,
    min_norm_solve,
    normalized_min_norm_solve,
    variance_bias_statistic,
)
from .training import DESK_SHORTCUT, TrainConfig, TrainTrace, train_baseline, train_student_ct, train_teacher

log = logging.getLogger(__name__)

EXPERIMENTS = ("TheoryMinNorm", "TheoryMaxMargin", "TheoryCentering", "Shortcut", "CorruptionRobustness",
               "BnAdaptation", "LambdaSweep", "Calibration")
SEED_ENV = "NORMLAB_SEED"
MANIFEST_NAME = "run_manifest.json"
RESOLVED_NAME = "config.resolved.json"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    idx_images: str | None = None
    idx_labels: str | None = None
    classes: tuple[int, int] = (2, 3)
    image_size: int = Field(28, ge=8)
    noise_sigma: float = Field(0.1, ge=0)
    noise_per_channel: bool = False
    square_size: int = Field(2, ge=1)
    red_square_pos: tuple[int, int] = (2, 2)
    blue_square_pos: tuple[int, int] = (22, 22)
    jitter: int = Field(2, ge=0)
    wobble: float = Field(1.0, ge=0)
    n_train: int = Field(512, ge=2)
    n_val: int = Field(200, ge=2)
    n_test: int = Field(200, ge=2)

    @model_validator(mode="after")
    def _fits(self):
        self.to_cfg(0, 0).validate()
        return self

    def to_cfg(self, seed: int, n_test: int) -> ShortcutDatasetConfig:
        fields = self.model_dump(exclude={"n_val", "n_test"})
        return ShortcutDatasetConfig(**fields, channels=3, n_test=n_test, seed=seed)


class ModelSection(_Strict):
    preset: Literal["cnn", "mlp"] = "cnn"
    hidden: tuple[int, ...] = (256, 256)


class CTSection(_Strict):
    lambdas: tuple[float, ...] = (0.1, 1.0, 10.0)
    both_tolerance: float = Field(2.0, ge=0)
    # replicates that train every lambda; the rest train only the selected one
    sweep_replicates: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _nonneg(self):
        if not self.lambdas:
            raise ValueError("need at least one lambda")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambda values must be >= 0")
        return self


class TheorySection(_Strict):
    n: int = Field(20, ge=1)
    d: int = Field(100, ge=2)
    low_count: int = Field(50, ge=1)
    sigma_low: float = Field(0.1, gt=0)
    sigma_high: float = Field(1.0, gt=0)
    n_seeds: int = Field(200, ge=1)
    u_source: Literal["true", "sample"] = "true"
    projection_instances: int = Field(100, ge=1)
    projection_n: int = Field(8, ge=1)
    projection_d: int = Field(40, ge=2)
    max_margin_instances: int = Field(50, ge=1)
    max_margin_max_n: int = Field(10, ge=2)
    max_margin_max_d: int = Field(30, ge=2)
    centering_instances: int = Field(100, ge=1)
    centering_n: int = Field(8, ge=2)
    centering_d: int = Field(40, ge=2)
    centering_probes: int = Field(20, ge=1)


class CorruptionSection(_Strict):
    kinds: tuple[Literal[CORRUPTIONS], ...] = CORRUPTIONS  # type: ignore[valid-type]
    severities: tuple[int, ...] = (1, 3, 5)
    split: Literal[SPLITS] = "Both"  # type: ignore[valid-type]

    @model_validator(mode="after")
    def _nonempty(self):
        if not self.kinds or not self.severities:
            raise ValueError("need at least one kind and one severity")
        if any(not 1 <= s <= 5 for s in self.severities):
            raise ValueError("severities must be in 1..5")
        return self


class AdaptationSection(_Strict):
    adapt_batch_size: int = Field(32, ge=2)
    severity: int = Field(3, ge=1, le=5)
    blend: float = Field(1.0, gt=0, le=1)
    n_seeds: int = Field(5, ge=1)


class CalibrationSection(_Strict):
    n_bins: int = Field(15, ge=1)
    group_sizes: tuple[float, ...] = (0.11, 0.56, 1.0)
    n_groups: int = Field(10, ge=1)
    splits: tuple[Literal[SPLITS], ...] = ("Both", "None")  # type: ignore[valid-type]


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]  # type: ignore[valid-type]
    seed: int = 0
    output_dir: str = "runs/out"
    replicates: int = Field(3, ge=1)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainConfig = DESK_SHORTCUT
    ct: CTSection = Field(default_factory=CTSection)
    theory: TheorySection = Field(default_factory=TheorySection)
    corruption: CorruptionSection = Field(default_factory=CorruptionSection)
    adaptation: AdaptationSection = Field(default_factory=AdaptationSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    checkpoints: bool = True
    weight_histograms: bool = False

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_json().encode()).hexdigest()


def parse_config(text: str) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(text)


# ---------------------------------------------------------------------------
# output bookkeeping


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if dataclasses.is_dataclass(x):
        return _plain(dataclasses.asdict(x))
    return x


def dump_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


class Outputs:
    """Writes files under one directory and remembers each one for the manifest."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.files: list[str] = []

    def _track(self, path: Path) -> None:
        rel = path.relative_to(self.root).as_posix()
        if rel not in self.files:
            self.files.append(rel)

    def text(self, rel: str, content: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
        self._track(path)
        return path

    def json(self, rel: str, obj) -> Path:
        return self.text(rel, dump_json(obj))

    def checkpoint(self, rel: str, model: Model, extra: dict | None = None) -> None:
        path = save_checkpoint(model, self.root / rel, extra)
        for f in sorted(path.iterdir()):
            self._track(f)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# theory experiments


def run_theory_minnorm(cfg: ExperimentConfig, out: Outputs) -> dict:
    t = cfg.theory
    seeds = [derive_seed(cfg.seed, "bias", i) for i in range(t.n_seeds)]
    stat = variance_bias_statistic(seeds, t.n, t.d, t.low_count, t.sigma_low, t.sigma_high, t.u_source)
    out.text("variance_bias.csv", bias_rows_csv(stat["rows"]))
    rows = []
    for i in range(t.projection_instances):
        rng = stream(cfg.seed, "projection", i)
        X = rng.normal(size=(t.projection_n, t.projection_d))
        Y = rng.normal(size=t.projection_n)
        u = rng.uniform(0.1, 10.0, size=t.projection_d)
        z = min_norm_solve(X, Y).theta
        th = normalized_min_norm_solve(X, Y, u).theta
        chk = check_projection_identity(z, th, X)
        rows.append([i, chk["row_space_gap"], chk["null_space_gap"]])
    out.text("projection.csv", csv_text(["instance", "row_space_gap", "null_space_gap"], rows))
    summary = {
        "median_ratio_unnormalized": stat["median_r_unnorm"],
        "median_ratio_normalized": stat["median_r_norm"],
        "analytic_ratio_gain": analytic_ratio_gain(t.d, t.low_count, t.sigma_low, t.sigma_high),
        "expected_analytic_gain": (t.sigma_high / t.sigma_low) ** 2,
        "max_projection_gap": max(r[1] for r in rows),
    }
    out.json("summary.json", summary)
    return summary


def separable_instance(seed: int, i: int, max_n: int, max_d: int):
    rng = stream(seed, "max-margin", i)
    n = int(rng.integers(2, max_n + 1))
    d = int(rng.integers(2, max_d + 1))
    X = rng.normal(size=(n, d))
    Y = np.sign(X @ rng.normal(size=d))
    Y[Y == 0] = 1.0
    u = rng.uniform(0.1, 10.0, size=d)
    return X, Y, u


def run_theory_maxmargin(cfg: ExperimentConfig, out: Outputs) -> dict:
    t = cfg.theory
    rows = []
    for i in range(t.max_margin_instances):
        X, Y, u = separable_instance(cfg.seed, i, t.max_margin_max_n, t.max_margin_max_d)
        for label, uu in (("identity", None), ("normalized", u)):
            est = max_margin_solve(X, Y, uu)
            dg = est.diagnostics
            rows.append([i, X.shape[0], X.shape[1], label, dg["min_margin"], dg["stationarity_residual"],
                         len(dg["active"])])
    out.text("max_margin.csv", csv_text(["instance", "n", "d", "u", "min_margin", "stationarity_residual",
                                         "active_count"], rows))
    summary = {
        "instances": t.max_margin_instances,
        "min_margin": min(r[4] for r in rows),
        "max_stationarity_residual": max(r[5] for r in rows),
    }
    out.json("summary.json", summary)
    return summary


def run_theory_centering(cfg: ExperimentConfig, out: Outputs) -> dict:
    t = cfg.theory
    rows = []
    for i in range(t.centering_instances):
        rng = stream(cfg.seed, "centering", i)
        # shifted features so centering actually changes the system
        X = rng.normal(size=(t.centering_n, t.centering_d)) + rng.normal(size=t.centering_d)
        Y = rng.normal(size=t.centering_n) + 1.0
        probes = rng.normal(size=(t.centering_probes, t.centering_d))
        rep = centering_analysis(X, Y, probes)
        rows.append([i, rep["in_sample_gap"], rep["param_gap"], rep["off_sample_gap"]])
    out.text("centering.csv", csv_text(["instance", "in_sample_gap", "param_gap", "off_sample_gap"], rows))
    summary = {
        "max_in_sample_gap": max(r[1] for r in rows),
        "median_param_gap": float(np.median([r[2] for r in rows])),
        "median_off_sample_gap": float(np.median([r[3] for r in rows])),
    }
    out.json("summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# shortcut models


def model_spec(cfg: ExperimentConfig):
    d = cfg.dataset
    if cfg.model.preset == "cnn":
        return appendix_cnn(3, 2, d.image_size, batchnorm=True)
    return mlp((3, d.image_size, d.image_size), cfg.model.hidden, 2, batchnorm=True)


def replicate_data(cfg: ExperimentConfig, r: int) -> tuple[Dataset, dict[str, Dataset], dict[str, Dataset]]:
    """Train set, validation splits and test splits for replicate ``r``.

    Validation and test splits come from disjoint base images of the same draw.
    """
    d = cfg.dataset
    ds = generate_shortcut_dataset(d.to_cfg(derive_seed(cfg.seed, "data", r), d.n_val + d.n_test))
    val = {s: ds[s].subset(slice(0, d.n_val)) for s in SPLITS}
    test = {s: ds[s].subset(slice(d.n_val, None)) for s in SPLITS}
    return ds["train"], val, test


def ct_name(lam: float) -> str:
    return f"CT_lambda={lam:g}"


@dataclass
class Replicate:
    index: int
    models: dict[str, Model]
    traces: dict[str, TrainTrace]
    val_errors: dict[str, dict[str, float]]
    test_errors: dict[str, dict[str, float]]
    snapshots: list[tuple[int, Model]] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)  # training wall time per model


def train_replicate(cfg: ExperimentConfig, r: int, lambdas: tuple[float, ...], baseline_only: bool = False,
                    snapshots: bool = False) -> Replicate:
    with threadpool_limits(1):
        train, val, test = replicate_data(cfg, r)
        spec = model_spec(cfg)
        tcfg = cfg.train.model_copy(update={"seed": derive_seed(cfg.seed, "train", r)})
        snaps: list[tuple[int, Model]] = []
        hook = (lambda e, m: snaps.append((e, m.copy()))) if snapshots else None
        models, traces, seconds = {}, {}, {}

        def timed(name, fn, *args, **kw):
            t0 = time.perf_counter()
            models[name], traces[name] = fn(*args, **kw)
            seconds[name] = time.perf_counter() - t0

        timed("wBN", train_baseline, spec, train, tcfg, on_epoch=hook)
        if not baseline_only:
            timed("NoBN", train_teacher, strip_batchnorm(spec), train, tcfg)
            for lam in lambdas:
                timed(ct_name(lam), train_student_ct, spec, models["NoBN"], train, tcfg, lam)
        val_err = {m: {s: error_rate(mod, val[s]) for s in SPLITS} for m, mod in models.items()}
        test_err = {m: {s: error_rate(mod, test[s]) for s in SPLITS} for m, mod in models.items()}
    log.info("replicate %d done: %s", r, {m: e["None"] for m, e in test_err.items()})
    return Replicate(r, models, traces, val_err, test_err, snaps, seconds)


def _train_replicate_job(args):
    cfg_json, r, lambdas, baseline_only, snapshots = args
    return train_replicate(parse_config(cfg_json), r, lambdas, baseline_only, snapshots)


def map_jobs(fn, jobs: list, threads: int) -> list:
    """Ordered map over ``jobs``; with ``threads > 1`` jobs run in worker processes."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as ex:
        return list(ex.map(fn, jobs))


@dataclass
class ShortcutRun:
    cfg: ExperimentConfig
    replicates: list[Replicate]
    lambdas: tuple[float, ...]
    selected_lambda: float | None

    @property
    def ct_model_name(self) -> str | None:
        return None if self.selected_lambda is None else ct_name(self.selected_lambda)

    def compared(self) -> list[str]:
        names = ["wBN"]
        if self.selected_lambda is not None:
            names += ["NoBN", self.ct_model_name]
        return names


def select_lambda(replicates: list[Replicate], lambdas, tolerance: float) -> float:
    """Lambda with the lowest median validation None error among those within
    ``tolerance`` points of wBN on validation Both (ties go to the smaller lambda)."""
    def med(model, split):
        return float(np.median([rep.val_errors[model][split] for rep in replicates]))

    replicates = [rep for rep in replicates if all(ct_name(lam) in rep.val_errors for lam in lambdas)]
    both_ref = med("wBN", "Both")
    ok = [lam for lam in sorted(lambdas) if med(ct_name(lam), "Both") <= both_ref + tolerance]
    pool = ok or sorted(lambdas)
    return min(pool, key=lambda lam: (med(ct_name(lam), "None"), lam))


def train_shortcut_models(cfg: ExperimentConfig, threads: int = 1, baseline_only: bool = False,
                          lambdas: tuple[float, ...] | None = None, full_sweep: bool = False) -> ShortcutRun:
    """Train every replicate.

    With ``full_sweep`` each replicate trains a student per lambda. Otherwise the
    first ``ct.sweep_replicates`` replicates pick lambda on their validation splits
    and the remaining replicates train only that student.
    """
    lambdas = tuple(sorted(set(cfg.ct.lambdas if lambdas is None else lambdas)))
    cfg_json = cfg.resolved_json()

    def jobs(rs, lams):
        return [(cfg_json, r, lams, baseline_only, cfg.weight_histograms and r == 0) for r in rs]

    if baseline_only or full_sweep:
        reps = map_jobs(_train_replicate_job, jobs(range(cfg.replicates), lambdas), threads)
        sel = None if baseline_only else select_lambda(reps, lambdas, cfg.ct.both_tolerance)
        return ShortcutRun(cfg, reps, lambdas, sel)
    k = min(cfg.ct.sweep_replicates, cfg.replicates)
    reps = map_jobs(_train_replicate_job, jobs(range(k), lambdas), threads)
    sel = select_lambda(reps, lambdas, cfg.ct.both_tolerance)
    reps += map_jobs(_train_replicate_job, jobs(range(k, cfg.replicates), (sel,)), threads)
    return ShortcutRun(cfg, reps, lambdas, sel)


def _median(values) -> float:
    return float(np.median(list(values)))


def _write_models(run: ShortcutRun, out: Outputs) -> None:
    for rep in run.replicates:
        for name, trace in rep.traces.items():
            out.text(f"traces/rep{rep.index}_{name}.csv", trace.to_csv())
        if run.cfg.checkpoints:
            for name, model in rep.models.items():
                out.checkpoint(f"checkpoints/rep{rep.index}/{name}", model, {"replicate": rep.index})
        if rep.snapshots:
            out.text("weight_histograms.csv", export_weight_histograms(rep.snapshots))


def split_error_rows(run: ShortcutRun, names=None):
    rows = []
    for rep in run.replicates:
        for name in names or rep.test_errors:
            e = rep.test_errors[name]
            rows.append([rep.index, name, *[e[s] for s in SPLITS]])
    return rows


def shortcut_summary(run: ShortcutRun) -> dict:
    names = [n for n in run.replicates[0].test_errors if all(n in rep.test_errors for rep in run.replicates)]
    med = {name: {s: _median(rep.test_errors[name][s] for rep in run.replicates) for s in SPLITS} for name in names}
    summary = {"median_test_errors": med, "lambdas": list(run.lambdas), "selected_lambda": run.selected_lambda}
    if run.selected_lambda is not None:
        ct = run.ct_model_name
        gap = med["wBN"]["None"] - med["NoBN"]["None"]
        summary["ct_model"] = ct
        summary["none_gap_wbn_minus_nobn"] = gap
        summary["ct_recovered_fraction"] = (med["wBN"]["None"] - med[ct]["None"]) / gap if gap > 0 else None
    return summary


def reliance_scores(run: ShortcutRun) -> dict[str, list[float]]:
    region = run.cfg.dataset.to_cfg(0, 2).region_mask()
    scores: dict[str, list[float]] = {}
    with threadpool_limits(1):
        for rep in run.replicates:
            test = replicate_data(run.cfg, rep.index)[2]
            for name in run.compared():
                scores.setdefault(name, []).append(saliency_reliance(rep.models[name], test["Both"], region))
    return scores


def evaluate_shortcut(run: ShortcutRun, out: Outputs) -> dict:
    _write_models(run, out)
    out.text("split_errors.csv", csv_text(["replicate", "model", *SPLITS], split_error_rows(run)))
    sweep = []
    for lam in run.lambdas:
        name = ct_name(lam)
        reps = [r for r in run.replicates if name in r.val_errors]
        sweep.append([lam, len(reps), *[_median(r.val_errors[name][s] for r in reps) for s in ("Both", "None")],
                      *[_median(r.test_errors[name][s] for r in reps) for s in ("Both", "None")]])
    out.text("lambda_selection.csv", csv_text(["lambda", "replicates", "val_Both", "val_None", "test_Both", "test_None"],
                                                   sweep))
    rel = reliance_scores(run)
    out.text("reliance.csv", csv_text(["replicate", "model", "reliance"],
                                      [[i, m, v[i]] for m, v in rel.items() for i in range(len(v))]))
    for rep in run.replicates:
        for name in run.compared():
            report = MetricsReport(clean_error=rep.test_errors[name]["Both"], split_errors=rep.test_errors[name],
                                   reliance_score=rel[name][rep.index])
            out.text(f"reports/rep{rep.index}_{name}.json", report.to_json())
    summary = shortcut_summary(run)
    summary["median_reliance"] = {m: _median(v) for m, v in rel.items()}
    out.json("summary.json", summary)
    return summary


def evaluate_corruption(run: ShortcutRun, out: Outputs) -> dict:
    c = run.cfg.corruption
    rows, mces = [], {}
    with threadpool_limits(1):
        for rep in run.replicates:
            clean = replicate_data(run.cfg, rep.index)[2][c.split]
            for name in run.compared():
                seed = derive_seed(run.cfg.seed, "corruption", rep.index)
                cells = corruption_errors(rep.models[name], clean, list(c.kinds), list(c.severities), seed)
                report = MetricsReport(clean_error=rep.test_errors[name][c.split], per_corruption_error=cells,
                                       mce=mce_of(cells), split_errors=rep.test_errors[name])
                out.text(f"reports/rep{rep.index}_{name}.json", report.to_json())
                mces.setdefault(name, []).append(report.mce)
                for kind in c.kinds:
                    for sev in c.severities:
                        rows.append([rep.index, name, kind, sev, cells[cell_key(kind, sev)]])
    out.text("corruption_errors.csv", csv_text(["replicate", "model", "kind", "severity", "error"], rows))
    out.text("mce.csv", csv_text(["replicate", "model", "mce"],
                                 [[i, m, v[i]] for m, v in mces.items() for i in range(len(v))]))
    summary = {"median_mce": {m: _median(v) for m, v in mces.items()}, "mce": mces,
               "selected_lambda": run.selected_lambda, "split": c.split}
    out.json("summary.json", summary)
    return summary


def evaluate_adaptation(run: ShortcutRun, out: Outputs) -> dict:
    """Every scenario for each scenario seed on each replicate's wBN model.

    A seed's score is the mean over replicates; the summary reports medians over seeds.
    """
    a = run.cfg.adaptation
    kinds = list(run.cfg.corruption.kinds)
    rows, per_seed = [], {s: [] for s in SCENARIOS}
    mutated = False
    with threadpool_limits(1):
        tests = {rep.index: replicate_data(run.cfg, rep.index)[2][run.cfg.corruption.split] for rep in run.replicates}
        for j in range(a.n_seeds):
            acc = {s: [] for s in SCENARIOS}
            for rep in run.replicates:
                model = rep.models["wBN"]
                before = model.state_hash()
                seed = derive_seed(run.cfg.seed, "adapt", j, rep.index)
                # the three scenarios share one seed, hence one corrupted test set
                corrupted = corrupted_test_sets(tests[rep.index], kinds, a.severity, seed)
                unadapted = {k: error_rate(model, corrupted[k]) for k in kinds}
                for kind in SCENARIOS:
                    sc = AdaptScenario(kind, a.adapt_batch_size, a.severity, None, seed, a.blend)
                    res = run_adapt_scenario(model, sc, tests[rep.index], kinds, corrupted, with_unadapted=False)
                    acc[kind].append(res["mean_error"])
                    for k in kinds:
                        rows.append([j, rep.index, kind, res["adapted_to"] or "", k, res["errors"][k], unadapted[k]])
                mutated |= model.state_hash() != before
            for kind in SCENARIOS:
                per_seed[kind].append(float(np.mean(acc[kind])))
    out.text("adaptation.csv", csv_text(["seed", "replicate", "scenario", "adapted_to", "kind", "error",
                                         "unadapted_error"], rows))
    summary = {"per_seed_mean_error": per_seed, "median_error": {k: _median(v) for k, v in per_seed.items()},
               "source_model_mutated": mutated, "severity": a.severity}
    out.json("summary.json", summary)
    return summary


def evaluate_calibration(run: ShortcutRun, out: Outputs) -> dict:
    cal = run.cfg.calibration
    rows, adv_rows = [], []
    with threadpool_limits(1):
        for rep in run.replicates:
            test = replicate_data(run.cfg, rep.index)[2]
            for name in run.compared():
                for split in cal.splits:
                    p = predict_proba(rep.models[name], test[split].images)
                    labels = test[split].labels
                    r = calibration_metrics(p, labels, cal.n_bins)
                    r.adversarial = adversarial_calibration(p, labels, cal.group_sizes, cal.n_groups,
                                                            derive_seed(run.cfg.seed, "adv-cal", rep.index),
                                                            cal.n_bins)
                    rows.append([rep.index, name, split, r.rms_cal_err, r.ma_cal_err, r.miscalibration_area,
                                 r.sharpness, r.crps])
                    for g, v in r.adversarial.items():
                        adv_rows.append([rep.index, name, split, g, v["ma"], v["rms"]])
                    report = MetricsReport(clean_error=rep.test_errors[name]["Both"],
                                           split_errors=rep.test_errors[name], calibration=r)
                    out.text(f"reports/rep{rep.index}_{name}_{split}.json", report.to_json())
    out.text("calibration.csv", csv_text(["replicate", "model", "split", "rms_cal_err", "ma_cal_err",
                                          "miscalibration_area", "sharpness", "crps"], rows))
    out.text("adversarial_calibration.csv", csv_text(["replicate", "model", "split", "group_size", "ma", "rms"],
                                                     adv_rows))
    summary = {"median_ma_cal_err": {}, "median_rms_cal_err": {}}
    for name in run.compared():
        for split in cal.splits:
            sel = [r for r in rows if r[1] == name and r[2] == split]
            summary["median_ma_cal_err"][f"{name}/{split}"] = _median(r[4] for r in sel)
            summary["median_rms_cal_err"][f"{name}/{split}"] = _median(r[3] for r in sel)
    out.json("summary.json", summary)
    return summary


def evaluate_lambda_sweep(run: ShortcutRun, out: Outputs) -> dict:
    _write_models(run, out)
    names = ["wBN"] + [ct_name(lam) for lam in run.lambdas]
    rows = []
    for lam in run.lambdas:
        for rep in run.replicates:
            e = rep.test_errors[ct_name(lam)]
            rows.append([lam, rep.index, *[e[s] for s in SPLITS]])
    out.text("lambda_sweep.csv", csv_text(["lambda", "replicate", *SPLITS], rows))
    out.text("baseline_errors.csv", csv_text(["replicate", "model", *SPLITS],
                                             split_error_rows(run, ["wBN", "NoBN"])))
    summary = {
        "median_none_error": {f"{lam:g}": _median(r.test_errors[ct_name(lam)]["None"] for r in run.replicates)
                              for lam in run.lambdas},
        "wbn_median_none_error": _median(r.test_errors["wBN"]["None"] for r in run.replicates),
        "models": names,
    }
    out.json("summary.json", summary)
    return summary


# ---------------------------------------------------------------------------


def execute(cfg: ExperimentConfig, out: Outputs, threads: int = 1, lambdas: tuple[float, ...] | None = None) -> dict:
    exp = cfg.experiment
    if exp == "TheoryMinNorm":
        return run_theory_minnorm(cfg, out)
    if exp == "TheoryMaxMargin":
        return run_theory_maxmargin(cfg, out)
    if exp == "TheoryCentering":
        return run_theory_centering(cfg, out)
    if exp == "BnAdaptation":
        return evaluate_adaptation(train_shortcut_models(cfg, threads, baseline_only=True), out)
    run = train_shortcut_models(cfg, threads, lambdas=lambdas, full_sweep=exp == "LambdaSweep")
    if exp == "Shortcut":
        return evaluate_shortcut(run, out)
    if exp == "CorruptionRobustness":
        return evaluate_corruption(run, out)
    if exp == "Calibration":
        return evaluate_calibration(run, out)
    return evaluate_lambda_sweep(run, out)


def resolve_seed(cfg: ExperimentConfig, cli_seed: int | None) -> tuple[ExperimentConfig, str]:
    """Apply the seed precedence: ``--seed`` flag, then NORMLAB_SEED, then the config file."""
    if cli_seed is not None:
        return cfg.model_copy(update={"seed": cli_seed}), "flag"
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        return cfg.model_copy(update={"seed": int(env)}), "env"
    return cfg, "config"


def run_experiment(cfg: ExperimentConfig, threads: int = 1, seed_source: str = "config",
                   lambdas: tuple[float, ...] | None = None) -> tuple[dict, Path]:
    """Execute ``cfg`` and write its outputs, resolved config and manifest to ``cfg.output_dir``."""
    # re-validate so model_copy overrides go through the same checks as file input
    cfg = parse_config(cfg.resolved_json())
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    out = Outputs(root)
    started = time.time()
    out.text(RESOLVED_NAME, cfg.resolved_json())
    summary = execute(cfg, out, threads, lambdas)
    manifest = {
        "artifact_version": __version__,
        "config_hash": cfg.config_hash(),
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "seed_source": seed_source,
        "started_at": started,
        "finished_at": time.time(),
        "files": [{"path": f, "sha256": _sha256(root / f)} for f in sorted(out.files)],
    }
    (root / MANIFEST_NAME).write_text(dump_json(manifest))
    return summary, root
