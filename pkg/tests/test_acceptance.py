"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The shortcut models behind criteria 7 to 10 are trained once per session at
the default desk-scale preset; each criterion's time budget is charged the
training time of the models it needs plus its own evaluation time.
"""

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from gradcheck import PRIMITIVES, TOL, worst_error
from normlab.data import ShortcutDatasetConfig, generate_shortcut_dataset
from normlab.experiments import (
    EXPERIMENTS,
    ExperimentConfig,
    Outputs,
    evaluate_adaptation,
    evaluate_calibration,
    evaluate_corruption,
    evaluate_shortcut,
    parse_config,
    run_experiment,
    separable_instance,
    train_shortcut_models,
)
from normlab.metrics import calibration_metrics
from normlab.model import appendix_cnn, strip_batchnorm
from normlab.theory import (
    analytic_ratio_gain,
    centering_analysis,
    check_projection_identity,
    max_margin_solve,
    min_norm_solve,
    normalized_min_norm_solve,
    variance_bias_statistic,
)
from normlab.training import SGD, TrainConfig, train_baseline, train_student_ct, train_teacher
from oracles import brute_force_max_margin


def fmt(x: float) -> str:
    return f"{x:.3g}"


# --------------------------------------------------------------------------- theory


def test_criterion_01_normalization_bias(record):
    t0 = time.perf_counter()
    stat = variance_bias_statistic(range(200), 20, 100, 50, 0.1, 1.0)
    secs = time.perf_counter() - t0
    gain = analytic_ratio_gain(100, 50, 0.1, 1.0)
    ok = (stat["median_r_norm"] > stat["median_r_unnorm"] and abs(gain - (1.0 / 0.1) ** 2) <= 1e-6
          and secs < 10)
    detail = (f"median ratio normalized {fmt(stat['median_r_norm'])} vs unnormalized "
              f"{fmt(stat['median_r_unnorm'])}; analytic gain {gain!r}; {secs:.2f}s")
    assert record(1, ok, detail), detail


def test_criterion_02_projection_identity(record):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X, Y, u = rng.normal(size=(8, 40)), rng.normal(size=8), rng.uniform(0.1, 10.0, size=40)
        rep = check_projection_identity(min_norm_solve(X, Y).theta, normalized_min_norm_solve(X, Y, u).theta, X)
        worst = max(worst, rep["row_space_gap"])
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 5
    detail = f"worst row-space gap {worst:.2e} over 100 instances; {secs:.2f}s"
    assert record(2, ok, detail), detail


def test_criterion_03_max_margin(record):
    t0 = time.perf_counter()
    min_margin, worst_stat = np.inf, 0.0
    for i in range(50):
        X, Y, u = separable_instance(0, i, 10, 30)
        for weights in (None, u):
            dg = max_margin_solve(X, Y, weights).diagnostics
            min_margin = min(min_margin, dg["min_margin"])
            worst_stat = max(worst_stat, dg["stationarity_residual"])
    worst_oracle = 0.0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(4, 2))
        Y = np.sign(X @ rng.normal(size=2))
        Y[Y == 0] = 1
        diff = max_margin_solve(X, Y).theta - brute_force_max_margin(X, Y)
        worst_oracle = max(worst_oracle, float(np.abs(diff).max()))
    secs = time.perf_counter() - t0
    ok = min_margin >= 1 - 1e-6 and worst_stat <= 1e-4 and worst_oracle <= 1e-4 and secs < 30
    detail = (f"min margin {min_margin!r}, worst stationarity {worst_stat:.1e}, "
              f"worst brute-force gap {worst_oracle:.1e}; {secs:.2f}s")
    assert record(3, ok, detail), detail


def test_criterion_04_centering(record):
    t0 = time.perf_counter()
    worst, off = 0.0, []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(8, 40)) + rng.normal(size=40)
        Y = rng.normal(size=8) + 1.0
        rep = centering_analysis(X, Y, rng.normal(size=(20, 40)))
        worst = max(worst, rep["in_sample_gap"])
        off.append(rep["off_sample_gap"])
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 5
    detail = f"worst in-sample gap {worst:.1e}; median off-sample gap {fmt(np.median(off))} (reported); {secs:.2f}s"
    assert record(4, ok, detail), detail


def test_criterion_05_autodiff(record):
    t0 = time.perf_counter()
    errors = {name: worst_error(name) for name in sorted(PRIMITIVES)}
    secs = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= TOL and secs < 60
    detail = f"{len(errors)} primitives x 20 seeds, worst {worst} {errors[worst]:.1e}; {secs:.2f}s"
    assert record(5, ok, detail), detail


def test_criterion_06_ct_mechanics(record):
    data = generate_shortcut_dataset(ShortcutDatasetConfig(n_train=48, n_test=8, seed=1, square_size=2))["train"]
    spec = appendix_cnn()
    cfg = TrainConfig(optimizer=SGD(lr=0.01), batch_size=16, epochs=2, seed=5)
    teacher, _ = train_teacher(strip_batchnorm(spec), data, cfg.model_copy(update={"epochs": 1}))
    h = teacher.state_hash()
    hashes = []
    _, base = train_baseline(spec, data, cfg)
    _, ct = train_student_ct(spec, teacher, data, cfg, 0.0)
    hashes.append(teacher.state_hash())
    _, _ = train_student_ct(spec, teacher, data, cfg, 1.0)
    hashes.append(teacher.state_hash())
    step_gap = max(abs(a - b) for a, b in zip(base.step_loss, ct.step_loss))
    removed = [l.kind for l in spec.layers if l not in strip_batchnorm(spec).layers]
    ok = (len(base.step_loss) == len(ct.step_loss) and step_gap <= 1e-12 and all(x == h for x in hashes)
          and len(spec.layers) - len(strip_batchnorm(spec).layers) == 5 and removed == ["BatchNorm"] * 5)
    detail = (f"lambda=0 worst step gap {step_gap:.1e} over {len(base.step_loss)} steps; teacher hash constant "
              f"{all(x == h for x in hashes)}; BN rows removed {len(spec.layers) - len(strip_batchnorm(spec).layers)}")
    assert record(6, ok, detail), detail


# --------------------------------------------------------------------------- desk-scale experiments


@pytest.fixture(scope="session")
def shortcut(tmp_path_factory):
    cfg = ExperimentConfig(experiment="Shortcut", seed=0)
    t0 = time.perf_counter()
    run = train_shortcut_models(cfg)
    wall = time.perf_counter() - t0
    root = tmp_path_factory.mktemp("desk")
    return {"run": run, "train_seconds": wall, "root": root}


def _timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def test_criterion_07_shortcut(shortcut, record):
    run = shortcut["run"]
    summary, secs = _timed(evaluate_shortcut, run, Outputs(shortcut["root"] / "shortcut"))
    med = summary["median_test_errors"]
    ct = summary["ct_model"]
    total = shortcut["train_seconds"] + secs
    a = med["wBN"]["Both"] <= 2 and med["NoBN"]["Both"] <= 2
    b = med["NoBN"]["None"] <= med["wBN"]["None"] - 15
    c = summary["ct_recovered_fraction"] is not None and summary["ct_recovered_fraction"] >= 0.5 \
        and med[ct]["Both"] <= med["wBN"]["Both"] + 2
    ok = a and b and c and total <= 600
    detail = (f"Both wBN {fmt(med['wBN']['Both'])} NoBN {fmt(med['NoBN']['Both'])} {ct} {fmt(med[ct]['Both'])}; "
              f"None wBN {fmt(med['wBN']['None'])} NoBN {fmt(med['NoBN']['None'])} {ct} {fmt(med[ct]['None'])}; "
              f"recovered {fmt(summary['ct_recovered_fraction'] or 0)}; "
              f"reliance {summary['median_reliance']}; {total:.0f}s")
    assert record(7, ok, detail), detail


def test_criterion_08_corruption(shortcut, record):
    run = shortcut["run"]
    summary, secs = _timed(evaluate_corruption, run, Outputs(shortcut["root"] / "corruption"))
    mce = summary["median_mce"]
    ct = run.ct_model_name
    total = shortcut["train_seconds"] + secs
    ok = mce[ct] <= mce["wBN"] and total <= 600
    detail = f"median mCE wBN {fmt(mce['wBN'])} NoBN {fmt(mce['NoBN'])} {ct} {fmt(mce[ct])}; {total:.0f}s"
    assert record(8, ok, detail), detail


def test_criterion_09_adaptation(shortcut, record):
    run = shortcut["run"]
    hashes = [rep.models["wBN"].state_hash() for rep in run.replicates]
    summary, secs = _timed(evaluate_adaptation, run, Outputs(shortcut["root"] / "adaptation"))
    # the BnAdaptation experiment trains only the wBN models
    total = sum(rep.seconds["wBN"] for rep in run.replicates) + secs
    med = summary["median_error"]
    intact = not summary["source_model_mutated"] and hashes == [r.models["wBN"].state_hash() for r in run.replicates]
    ok = med["AdaptOneTestOne"] <= med["AdaptOneTestAll"] and intact and total <= 300
    detail = (f"median over 5 seeds: one-one {fmt(med['AdaptOneTestOne'])}, one-all {fmt(med['AdaptOneTestAll'])}, "
              f"all-all {fmt(med['AdaptAllTestAll'])}; source intact {intact}; {total:.0f}s")
    assert record(9, ok, detail), detail


def test_criterion_10_calibration(shortcut, record):
    labels = np.arange(30) % 3
    exact = calibration_metrics(np.eye(3)[labels], labels)
    zeros = all(v == 0.0 for v in (exact.rms_cal_err, exact.ma_cal_err, exact.miscalibration_area, exact.crps))
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=10_000)
    y = (rng.uniform(size=(10_000, 1)) > p.cumsum(axis=1)).sum(axis=1)
    area = calibration_metrics(p, y).miscalibration_area
    out = shortcut["root"] / "calibration"
    evaluate_calibration(shortcut["run"], Outputs(out))
    reports = [json.loads(f.read_text())["calibration"] for f in sorted((out / "reports").glob("*.json"))]
    held = all(r["ma_cal_err"] <= r["rms_cal_err"] + 1e-12 for r in reports)
    ok = zeros and area <= 0.02 and held and reports
    detail = f"one-hot all zero {zeros}; Monte-Carlo area {area:.4f}; ma <= rms on {len(reports)} reports {held}"
    assert record(10, ok, detail), detail


# --------------------------------------------------------------------------- reproducibility

REDUCED = {
    "replicates": 2,
    "dataset": {"n_train": 48, "n_val": 16, "n_test": 16},
    "train": {"optimizer": {"name": "sgd", "lr": 0.01}, "batch_size": 16, "epochs": 1},
    "ct": {"lambdas": [0.0, 1.0]},
    "theory": {"n_seeds": 20, "projection_instances": 10, "max_margin_instances": 10, "centering_instances": 10},
    "adaptation": {"n_seeds": 2, "adapt_batch_size": 8},
    "weight_histograms": True,
}


def _snapshot(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


def _manifest_core(root: Path) -> dict:
    man = json.loads((root / "run_manifest.json").read_text())
    return {k: v for k, v in man.items() if k not in ("started_at", "finished_at")}


def test_criterion_11_reproducibility(tmp_path, record):
    mismatched = []
    counted = 0
    for exp in EXPERIMENTS:
        root = tmp_path / exp
        cfg = parse_config(json.dumps({**REDUCED, "experiment": exp, "seed": 3, "output_dir": str(root)}))
        snaps, mans = [], []
        for threads in (1, 4):
            if root.exists():
                shutil.rmtree(root)
            run_experiment(cfg, threads=threads)
            snaps.append(_snapshot(root))
            mans.append(_manifest_core(root))
        counted += sum(1 for f in snaps[0] if f.endswith((".csv", ".json")))
        if snaps[0] != snaps[1] or mans[0] != mans[1]:
            mismatched.append(exp)
    ok = not mismatched
    detail = (f"{len(EXPERIMENTS)} experiments at threads 1 and 4, {counted} CSV/JSON files compared; "
              f"mismatches {mismatched or 'none'}")
    assert record(11, ok, detail), detail


@pytest.mark.xfail(strict=False, reason="input-gradient saliency puts at least as much mass on the squares "
                   "for NoBN as for wBN at desk scale, even though only wBN fails without them")
def test_bn_model_leans_on_planted_squares(shortcut):
    """Saliency reliance is higher for the BN model than for its BN-free twin."""
    path = shortcut["root"] / "shortcut" / "summary.json"
    if path.exists():
        summary = json.loads(path.read_text())
    else:
        summary = evaluate_shortcut(shortcut["run"], Outputs(shortcut["root"] / "shortcut"))
    rel = summary["median_reliance"]
    assert rel["wBN"] > rel["NoBN"], rel

