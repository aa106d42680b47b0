"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced, or ``python3 tests/test_acceptance.py`` to run them without pytest.
The lines are also repeated in the pytest terminal summary.
"""
from __future__ import annotations

import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dpm.baselines import LaggedDesign, build_lagged_design, fit_glm
from dpm.cli import main as cli_main
from dpm.estimation import SgdConfig, fit, grad_log_joint, trajectory_drift
from dpm.evaluation import compare_auc, last_touch_histogram, roc_curve
from dpm.model import CustomerHistory, ModelParams, expit, make_path, touch_drive
from dpm.particles import FilterConfig, run_filter
from dpm.simulate import SimConfig, calibrate_offset, generate, with_offset

from oracles import fd_gradient, gradient_ascent_logistic, grid_filter, mann_whitney_auc

RESULTS: dict[int, str] = {}

# tolerances
GRAD_REL_TOL = 1e-6
GRAD_TRIPLES = 100
GRAD_SECONDS = 10.0
FILTER_INSTANCES = 10
FILTER_PARTICLES = 10_000
FILTER_MIN_OK = 9
FILTER_SECONDS = 60.0
RECOVERY_SEEDS = 5
RECOVERY_MIN_OK = 4
PHI_TOL = 0.10
COEF_TOL = 0.15
FIT_SECONDS = 300.0
DRIFT_TOL = 0.05
AUC_MARGIN = 0.01
ORDERING_SEEDS = 5
ORDERING_MIN_OK = 4
ORDERING_SECONDS = 600.0
# shorter schedule so five fits plus scoring fit in the time budget
ORDERING_SGD = dict(gamma0=0.1, schedule_exponent=0.51, max_iters=30000)
IRLS_ORACLE_TOL = 1e-4
INTERCEPT_TOL = 1e-9
NULL_LEVEL, NULL_BAND, NULL_SEEDS = 0.05, 0.03, 200
AUC_INSTANCES = 100
HIST_MIN_EVENTS = 100_000
HIST_BINS = 6

# scenarios
EFFECTS = dict(alpha=[0.5, 0.8, 1.0], beta=[0.2, 0.6, 0.9])
RECOVERY = dict(phi=0.53, rate=4e-4, touch_rate=0.3, cap=5, customers=5000, horizon=180)
ORDERING = dict(phi=0.8, rate=1e-3, touch_rate=0.3, cap=5, customers=2500, horizon=180, targeting=-0.5)
HISTOGRAM = dict(phi=0.53, rate=4e-3, touch_rate=1.0, cap=5, customers=40_000, horizon=180)


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    RESULTS[criterion] = line
    print(line, flush=True)


def calibrated(scenario: dict, **sim) -> ModelParams:
    p = ModelParams(0.0, scenario["phi"], EFFECTS["alpha"], EFFECTS["beta"])
    rates, caps = (scenario["touch_rate"],) * 6, (scenario["cap"],) * 6
    c = calibrate_offset(p, rates, caps, scenario["horizon"], scenario["rate"], seed=12345, pilot_days=1_000_000, **sim)
    return ModelParams(c, p.phi, p.alpha, p.beta)


def scenario_config(scenario: dict, truth: ModelParams, seed: int, **extra) -> SimConfig:
    return SimConfig(
        truth, scenario["customers"], scenario["horizon"], (scenario["touch_rate"],) * 6, (scenario["cap"],) * 6,
        seed=seed, **extra,
    )


# --------------------------------------------------------------------------- 1


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(GRAD_TRIPLES):
        K, L, T = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 11))
        y = np.zeros(T, dtype=int)
        y[-1] = int(rng.random() < 0.5)
        h = CustomerHistory(0, rng.poisson(1.0, (T, K)), rng.poisson(1.0, (T, L)), y)
        p = ModelParams(rng.normal(-1, 1), rng.uniform(-0.9, 0.9), rng.normal(0, 0.5, K), rng.normal(0, 0.5, L))
        x, x0 = rng.normal(-1, 1.5, T), float(rng.normal())
        g = grad_log_joint(p, h, make_path(p, h, x, x0))
        fd = fd_gradient(p.to_vector(), h.r, h.m, h.y, x, x0)
        rel = np.abs(g - fd) / np.where(fd == 0, 1.0, np.abs(fd))
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_REL_TOL and elapsed < GRAD_SECONDS
    report(1, ok, f"max rel err {worst:.2e} over {GRAD_TRIPLES} triples (< {GRAD_REL_TOL:g}), {elapsed:.1f}s (< {GRAD_SECONDS:g}s)")
    assert ok


# --------------------------------------------------------------------------- 2


def test_filter_matches_grid_oracle():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    good = 0
    for i in range(FILTER_INSTANCES):
        T = int(rng.integers(1, 6))
        y = np.zeros(T, dtype=int)
        y[-1] = int(rng.random() < 0.5)
        h = CustomerHistory(i, rng.poisson(1.0, (T, 1)), rng.poisson(1.0, (T, 1)), y)
        p = ModelParams(rng.normal(-1, 1), rng.uniform(-0.9, 0.9), rng.normal(0, 0.5, 1), rng.normal(0, 0.5, 1))
        exact, _ = grid_filter(p.c, p.phi, touch_drive(p, h), h.y, p.prior_mean(), p.prior_std())
        reps = np.array([
            run_filter(p, h, FilterConfig(particle_count=FILTER_PARTICLES, seed=s)).means for s in range(1, 21)
        ])
        est = run_filter(p, h, FilterConfig(particle_count=FILTER_PARTICLES, seed=0)).means
        good += bool(np.all(np.abs(est - exact) <= 3 * reps.std(axis=0, ddof=1)))
    elapsed = time.perf_counter() - start
    ok = good >= FILTER_MIN_OK and elapsed < FILTER_SECONDS
    report(2, ok, f"{good}/{FILTER_INSTANCES} instances within 3 MC s.e. (need {FILTER_MIN_OK}), {elapsed:.1f}s (< {FILTER_SECONDS:g}s)")
    assert ok


# --------------------------------------------------------------------------- 3 and 4

_recovery_runs: list = []


def recovery_runs():
    if not _recovery_runs:
        truth = calibrated(RECOVERY)
        for seed in range(RECOVERY_SEEDS):
            data = generate(scenario_config(RECOVERY, truth, 100 + seed))
            start = time.perf_counter()
            rep = fit(data, SgdConfig(seed=seed))
            _recovery_runs.append((truth, rep, time.perf_counter() - start))
    return _recovery_runs


@pytest.mark.slow
def test_parameter_recovery():
    runs = recovery_runs()
    ok_seeds, details = 0, []
    for truth, rep, secs in runs:
        err = np.abs(rep.final_params.to_vector() - truth.to_vector())
        hit = err[1] <= PHI_TOL and np.all(err[2:] <= COEF_TOL) and secs < FIT_SECONDS
        ok_seeds += bool(hit)
        details.append(f"phi err {err[1]:.3f} max coef err {err[2:].max():.3f} {secs:.0f}s")
    ok = ok_seeds >= RECOVERY_MIN_OK
    report(3, ok, f"{ok_seeds}/{len(runs)} seeds within phi +-{PHI_TOL} and coef +-{COEF_TOL}, each fit < {FIT_SECONDS:g}s "
                  f"(need {RECOVERY_MIN_OK}); " + "; ".join(details))
    assert ok


@pytest.mark.slow
def test_trajectory_flattens():
    drifts = [trajectory_drift(rep.trajectory) for _, rep, _ in recovery_runs()]
    ok = max(drifts) < DRIFT_TOL
    report(4, ok, "final-quarter drift " + ", ".join(f"{d:.3f}" for d in drifts) + f" (all < {DRIFT_TOL})")
    assert ok


# --------------------------------------------------------------------------- 5


@pytest.mark.slow
def test_dpm_beats_lagged_regressions_on_targeted_data():
    start = time.perf_counter()
    sim = dict(targeting=ORDERING["targeting"])
    truth = calibrated(ORDERING, **sim)
    ordered = signs = 0
    details = []
    for seed in range(ORDERING_SEEDS):
        train = generate(scenario_config(ORDERING, truth, 10 + seed, **sim))
        test = generate(scenario_config(ORDERING, truth, 500 + seed, first_id=ORDERING["customers"] + 1, **sim))
        params = fit(train, SgdConfig(seed=seed, **ORDERING_SGD)).final_params
        fits = {f"glm.lag{l}": fit_glm(build_lagged_design(train, l)) for l in (0, 1, 2)}
        aucs = compare_auc(params, fits, test, FilterConfig(particle_count=200, seed=seed))
        ordered += all(aucs["dpm"] >= aucs[n] + AUC_MARGIN for n in fits)
        glm_beta = fits["glm.lag0"].coefficients[1 + 3 : 1 + 6]
        signs += bool(np.any((glm_beta < 0) & (params.beta > 0)))
        details.append(" ".join(f"{k} {v:.3f}" for k, v in aucs.items()))
    elapsed = time.perf_counter() - start
    ok = ordered >= ORDERING_MIN_OK and signs >= ORDERING_MIN_OK and elapsed < ORDERING_SECONDS
    report(5, ok, f"DPM ahead by >= {AUC_MARGIN} in {ordered}/{ORDERING_SEEDS} seeds, glm beta < 0 < DPM beta in "
                  f"{signs}/{ORDERING_SEEDS} (need {ORDERING_MIN_OK} each), {elapsed:.0f}s (< {ORDERING_SECONDS:g}s); "
                  + "; ".join(details))
    assert ok


# --------------------------------------------------------------------------- 6


def _design(X, y):
    return LaggedDesign(np.asarray(X, float), np.asarray(y, float), 0, [f"f{i}" for i in range(X.shape[1])], list(range(len(y))))


def test_baseline_correctness():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(3):
        X = np.column_stack([np.ones(200), rng.poisson(0.7, (200, 2)), rng.normal(0, 1, 200)])
        y = (rng.random(200) < expit(X @ [-1.0, 0.5, -0.3, 0.8])).astype(float)
        worst = max(worst, float(np.max(np.abs(fit_glm(_design(X, y)).coefficients - gradient_ascent_logistic(X, y)))))
    y = np.zeros(9999)
    y[0] = 1
    icpt = abs(fit_glm(_design(np.ones((9999, 1)), y)).coefficients[0] - math.log(1 / 9998))
    rejections = 0
    for seed in range(NULL_SEEDS):
        p = ModelParams(-4.0, 0.0, [0.8], [0.6, 0.0])
        data = generate(SimConfig(p, 400, 40, (0.4, 0.4, 0.4), (4, 4, 4), seed=1000 + seed))
        rejections += fit_glm(build_lagged_design(data, 0)).p_values[3] < NULL_LEVEL
    rate = rejections / NULL_SEEDS
    ok = worst <= IRLS_ORACLE_TOL and icpt <= INTERCEPT_TOL and abs(rate - NULL_LEVEL) <= NULL_BAND
    report(6, ok, f"IRLS vs oracle {worst:.1e} (<= {IRLS_ORACLE_TOL:g}), intercept-only {icpt:.1e} (<= {INTERCEPT_TOL:g}), "
                  f"null rejection {rate:.3f} ({NULL_LEVEL} +- {NULL_BAND})")
    assert ok


# --------------------------------------------------------------------------- 7


def test_auc_equals_mann_whitney():
    rng = np.random.default_rng(303)
    exact = 0
    for _ in range(AUC_INSTANCES):
        n = int(rng.integers(2, 50))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 8, n) / 7.0
        exact += roc_curve(scores, labels).auc == mann_whitney_auc(scores, labels)
    ok = exact == AUC_INSTANCES
    report(7, ok, f"{exact}/{AUC_INSTANCES} instances exactly equal")
    assert ok


# --------------------------------------------------------------------------- 8


@pytest.mark.slow
def test_last_touch_decay():
    truth = calibrated(HISTOGRAM)
    hist = last_touch_histogram(generate(scenario_config(HISTOGRAM, truth, 8)), HIST_BINS - 1)
    pooled = hist.sum(axis=0)
    events = int(pooled.sum())
    ok = events >= HIST_MIN_EVENTS and bool(np.all(np.diff(pooled) <= 0))
    report(8, ok, f"pooled bins 0-{HIST_BINS - 1} {pooled.tolist()} from {events} events (>= {HIST_MIN_EVENTS}), "
                  f"touch rate {HISTOGRAM['touch_rate']}/day")
    assert ok


# --------------------------------------------------------------------------- 9


def _pipeline(tmp: Path, tag: str, threads: int) -> list[bytes]:
    sim = {
        "true_params": {"c": -3.0, "phi": 0.5, **EFFECTS},
        "n_customers": 300, "horizon": 60, "touch_rates": [0.3] * 6, "touch_caps": [5] * 6, "targeting": -0.5,
    }
    (tmp / "sim.json").write_text(json.dumps(sim))
    (tmp / "fit.json").write_text(json.dumps({"max_iters": 1000, "warmup": 50, "convergence_window": 100}))
    d, m, s = tmp / f"d{tag}.csv", tmp / f"m{tag}.json", tmp / f"s{tag}.csv"
    t = ["--threads", str(threads), "--seed", "9"]
    steps = [
        ["simulate", "--config", tmp / "sim.json", "--out", d],
        ["split", "--data", d, "--train", tmp / f"a{tag}.csv", "--test", tmp / f"b{tag}.csv"],
        ["fit", "--data", tmp / f"a{tag}.csv", "--config", tmp / "fit.json", "--model", m, "--trajectory", tmp / f"t{tag}.csv"],
        ["fit-baseline", "--data", tmp / f"a{tag}.csv", "--lag", "2", "--out", tmp / f"g{tag}.csv"],
        ["score", "--model", m, "--data", tmp / f"b{tag}.csv", "--out", s, "--particles", "300"],
        ["eval-roc", "--scores", s, "--out", tmp / f"r{tag}.csv"],
        ["diag-lasttouch", "--data", d, "--out", tmp / f"h{tag}.csv"],
    ]
    for argv in steps:
        assert cli_main([str(a) for a in argv] + t) == 0
    names = ["d", "a", "b", "m", "t", "g", "s", "r", "h"]
    return [next(tmp.glob(f"{n}{tag}.*")).read_bytes() for n in names]


def test_determinism(tmp_path):
    first = _pipeline(tmp_path, "1", 1)
    again = _pipeline(tmp_path, "2", 1)
    threaded = _pipeline(tmp_path, "3", 4)
    same = sum(a == b == c for a, b, c in zip(first, again, threaded))
    ok = same == len(first)
    report(9, ok, f"{same}/{len(first)} pipeline outputs byte-identical across reruns and --threads 1/4")
    assert ok


if __name__ == "__main__":
    import tempfile

    for fn in (
        test_gradient_matches_finite_differences, test_filter_matches_grid_oracle, test_parameter_recovery,
        test_trajectory_flattens, test_dpm_beats_lagged_regressions_on_targeted_data, test_baseline_correctness,
        test_auc_equals_mann_whitney, test_last_touch_decay,
    ):
        try:
            fn()
        except AssertionError:
            pass
    with tempfile.TemporaryDirectory() as tmp:
        try:
            test_determinism(Path(tmp))
        except AssertionError:
            pass
    print("\n".join(RESULTS[k] for k in sorted(RESULTS)))
