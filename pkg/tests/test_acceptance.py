"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one PASS/FAIL line (printed, and repeated in the pytest
terminal summary) before asserting. Run on its own with
``pytest tests/test_acceptance.py -v -s``.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import random_window, record_acceptance

from trmflow import autodiff as ad
from trmflow import cli, dataio, neural, trm
from trmflow import pipeline as pl
from trmflow.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(number, passed, detail):
    record_acceptance(number, bool(passed), detail)
    assert passed, detail


# --- 1: parameter counts ----------------------------------------------------------


def test_criterion_1_parameter_counts(capsys):
    start = time.perf_counter()
    code = cli.main(["-q", "inspect-params", str(CONFIGS / "a12_layout.json")])
    out = capsys.readouterr().out
    cfg = load_config(CONFIGS / "a12_layout.json")
    counted = pl.PipelineParams.init(cfg.pipeline, 0).counts()
    elapsed = time.perf_counter() - start
    closed = neural.closed_form_counts(55, 15)
    rows = {line.split()[0]: [int(v) for v in line.split()[1:]] for line in out.splitlines()[2:6]}
    ok = (
        code == 0
        and (cfg.geometry.n_interfaces, cfg.geometry.n_observed) == (55, 15)
        and rows["mlp1"] == [13970, 13970, 0]
        and rows["extractor"] == [15620, 15620, 0]
        and rows["mlp2"] == [3834, 3834, 0]
        and rows["predictor"] == [9185, 9240, 55]
        and counted == {"mlp1": 13970, "extractor": 15620, "mlp2": 3834, "predictor": 9185}
        and closed["predictor"] == 3 * 55**2 + 2 * 55
        and elapsed < 1.0
    )
    verdict(1, ok, f"MLP1/Extractor/MLP2/Predictor = {list(counted.values())}, table predictor 9240 (delta 55), {elapsed:.2f} s")


# --- 2: gradient correctness ------------------------------------------------------


def test_criterion_2_gradient_check(tiny_config):
    start = time.perf_counter()
    worst, n_params, failures = 0.0, 0, []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        params = pl.PipelineParams.init(tiny_config, seed)
        n_params = params.size
        batch = random_window(rng, tiny_config, 2)
        report = ad.grad_check(
            lambda t: pl.loss(params.unflatten(t), batch, tiny_config),
            params.flatten(),
            tolerance=1e-5,
            h=1e-6,
            fd_dtype=np.longdouble,
        )
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            failures.append(seed)
    elapsed = time.perf_counter() - start
    ok = not failures and n_params <= 300 and elapsed < 60
    verdict(2, ok, f"{n_params} parameters, 10 seeds, worst relative error {worst:.2e} (tol 1e-5), {elapsed:.1f} s")


# --- 3: conservation and bounds ----------------------------------------------------


def _random_state(rng, n_rows, n_cells):
    u = rng.uniform(0, 1, (n_rows, n_cells))
    # include exact 0 and 1 states, the edges of the domain
    u[rng.uniform(size=u.shape) < 0.05] = 0.0
    u[rng.uniform(size=u.shape) < 0.05] = 1.0
    c = rng.uniform(0, 0.5, (n_rows, n_cells + 1))
    c[c >= 0.5] = 0.0
    return u, c


def test_criterion_3_conservation_and_bounds():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    steps, worst, violations = 0, 0.0, 0
    for n_cells in (1, 2, 3, 5, 8, 13, 21, 34, 55, 100):
        u, c = _random_state(rng, 1000, n_cells)
        u1, f = trm.trm_step(u, c)
        balance = (u1.sum(axis=1) - u.sum(axis=1)) - (f[:, 0] - f[:, -1])
        worst = max(worst, float(np.abs(balance).max()))
        violations += int(np.count_nonzero((u1 < 0) | (u1 > 1)))
        steps += len(u)
    elapsed = time.perf_counter() - start
    ok = steps == 10_000 and worst <= 1e-12 and violations == 0 and elapsed < 5
    verdict(3, ok, f"{steps} steps, max mass-balance error {worst:.1e}, {violations} bound violations, {elapsed:.2f} s")


# --- 4: monotonicity --------------------------------------------------------------


def test_criterion_4_monotonicity():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    eps, decreases, tests = 1e-6, 0, 0
    for n_cells in (1, 2, 4, 10, 30):
        u, c = _random_state(rng, 200, n_cells)
        u = np.minimum(u, 1 - eps)
        j = rng.integers(0, n_cells, 200)
        bumped = u.copy()
        bumped[np.arange(200), j] += eps
        base, _ = trm.trm_step(u, c)
        up, _ = trm.trm_step(bumped, c)
        decreases += int(np.count_nonzero(up < base))
        tests += 200
    elapsed = time.perf_counter() - start
    ok = tests == 1000 and decreases == 0 and elapsed < 10
    verdict(4, ok, f"{tests} perturbations of {eps:g}, {decreases} output decreases, {elapsed:.2f} s")


# --- 5: grid convergence ------------------------------------------------------------

ROAD, RHO_MAX, F_MAX, HORIZON = 3000.0, 0.2, 0.5, 60.0


def _solve(n_cells):
    """Constant f_max, smooth profile, fixed dt/dx so the rate is the same on every grid."""
    dx = ROAD / n_cells
    dt = 0.4 * RHO_MAX * dx / (4 * F_MAX)
    cfg = trm.TrmConfig(RHO_MAX, dx, dt, 4 * F_MAX / RHO_MAX, p_t=1)
    assert trm.check_cfl(cfg, F_MAX).passed
    rate = float(trm.reaction_rate(F_MAX, cfg))
    x = (np.arange(n_cells) + 0.5) * dx
    u0 = 0.3 + 0.2 * np.sin(2 * np.pi * x / ROAD)
    steps = int(round(HORIZON / dt))
    dens, _ = trm.trm_rollout(u0, np.full((steps, n_cells + 1), rate))
    return dens[-1]


def test_criterion_5_grid_convergence():
    start = time.perf_counter()
    base = 50
    reference = _solve(8 * base)
    errors = []
    for k in (1, 2, 4):
        n = k * base
        projected = reference.reshape(n, -1).mean(axis=1)
        errors.append(float(np.abs(_solve(n) - projected).sum() * ROAD / n))
    orders = [np.log2(errors[0] / errors[1]), np.log2(errors[1] / errors[2])]
    fitted = -np.polyfit(np.log([1, 2, 4]), np.log(errors), 1)[0]
    elapsed = time.perf_counter() - start
    ok = errors[0] > errors[1] > errors[2] and min(orders) >= 0.8 and elapsed < 30
    detail = (
        f"L1 errors {[f'{e:.3g}' for e in errors]}, pairwise orders {orders[0]:.2f}/{orders[1]:.2f}, "
        f"fitted {fitted:.2f}, {elapsed:.2f} s"
    )
    verdict(5, ok, detail)


# --- 6-8: one capped training run on the default synthetic setup ------------------

TRAIN_CAP_SECONDS = 280.0


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    cfg = load_config(CONFIGS / "synthetic.json", output_override=out)
    cfg.training = replace(cfg.training, max_seconds=TRAIN_CAP_SECONDS)
    assert cli.main(["-q", "synth", str(CONFIGS / "synthetic.json"), "--output", str(out)]) == 0
    data = cli.Dataset(cfg)
    start = time.perf_counter()
    pipe, best, state = cli._train_one(cfg, data, out)
    train_seconds = time.perf_counter() - start
    report = cli._report(cfg, data, best, pipe, "test")
    measured = np.concatenate([d.values[:, data.series.column_index(cfg.geometry.observed_indices)] for d in data.series.subset_days(data.splits["test"]).days])
    return {"cfg": cfg, "report": report, "state": state, "seconds": train_seconds, "mean_flux": float(measured.mean())}


@pytest.mark.slow
def test_criterion_6_synthetic_recoverability(synthetic_run):
    r, seconds = synthetic_run["report"], synthetic_run["seconds"]
    h5, base5 = r.horizon_mape[5], r.baseline_horizon_mape[5]
    ratio = r.hidden_mape / r.observed_mape
    ok = r.truth_source == "ground_truth" and h5 < base5 and ratio <= 1.5 and seconds <= 300
    detail = (
        f"5-step MAPE {h5:.2f}% vs last-value {base5:.2f}%; hidden/observed {r.hidden_mape:.2f}/"
        f"{r.observed_mape:.2f} = {ratio:.2f} (<= 1.5); trained {seconds:.0f} s, "
        f"{synthetic_run['state'].epoch} epochs, stop: {synthetic_run['state'].stopped}"
    )
    verdict(6, ok, detail)


@pytest.mark.slow
def test_criterion_7_horizon_degradation(synthetic_run):
    m = synthetic_run["report"].horizon_mape
    hs = sorted(m)
    worst = min(m[h2] - m[h1] for i, h1 in enumerate(hs) for h2 in hs[i + 1 :])
    ok = worst >= -1.0
    verdict(7, ok, "per-horizon MAPE " + ", ".join(f"h{h}={m[h]:.2f}%" for h in hs) + f"; worst drop {max(0.0, -worst):.2f} pp (<= 1)")


@pytest.mark.slow
def test_criterion_8_smoothing(synthetic_run):
    s = synthetic_run["report"].smoothing
    noise_std = synthetic_run["cfg"].synth.noise_std
    limit = 0.5 * noise_std * synthetic_run["mean_flux"]
    ok = abs(s.bias) <= limit and s.smoothed_std < s.measured_std
    detail = f"|bias| {abs(s.bias):.2e} <= {limit:.2e}; smoothed std {s.smoothed_std:.4e} < measured std {s.measured_std:.4e}"
    verdict(8, ok, detail)


# --- 9: determinism ---------------------------------------------------------------


def _run_all(config: Path, out: Path) -> dict[str, bytes]:
    for command in ("synth", "train", "predict", "evaluate"):
        assert cli.main(["-q", command, str(config), "--output", str(out)]) == 0, command
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    doc = json.loads((CONFIGS / "smoke.json").read_text())
    config = tmp_path / "smoke.json"
    config.write_text(json.dumps(doc))
    first = _run_all(config, tmp_path / "a")
    second = _run_all(config, tmp_path / "b")
    differing = [name for name in first if first[name] != second.get(name)]
    ok = set(first) == set(second) and not differing and len(first) >= 10
    verdict(9, ok, f"{len(first)} output files from synth/train/predict/evaluate, {len(differing)} differ")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
