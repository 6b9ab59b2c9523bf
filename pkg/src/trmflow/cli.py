"""Command-line entry point: ``trmflow <command> <config.json> [options]``.

Commands::

    synth           write a seeded synthetic dataset and its ground truth
    simulate        run a bare TRM rollout (config schedule or ground-truth replay)
    train           fit the pipeline; checkpoints and history.csv
    predict         smoothed/predicted fluxes, rates and densities as CSV
    evaluate        report.json plus tables, with the last-value baseline
    gridsearch-np   train + evaluate over a list of past-window lengths
    inspect-params  per-block parameter counts next to the closed forms

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import dataio, metrics, neural, trm
from .config import ExperimentConfig, derive_seed, load_config
from .errors import ConfigError, DataError, NumericalError
from .io_utils import write_table
from .pipeline import PipelineParams, baseline_last_value, batch_arrays, forward, input_statistics
from .training import (
    load_checkpoint,
    load_params,
    predict_batched,
    save_params,
    train,
    write_history,
)

log = logging.getLogger("trmflow")

EXIT_CODES = ((ConfigError, 2), (DataError, 3), (FileNotFoundError, 3), (NumericalError, 4))
SPLITS = ("train", "valid", "test")


# --- data helpers ---------------------------------------------------------------


class Dataset:
    """Prepared measurements, day splits and (optionally) aligned ground truth."""

    def __init__(self, cfg: ExperimentConfig):
        path = cfg.measurements_path
        if not path.exists():
            raise ConfigError(f"measurements not found: {path} (run 'synth' or set data.measurements)")
        raw = dataio.load_csv(path)
        missing = set(cfg.geometry.observed_indices.tolist()) - set(raw.interfaces)
        if missing:
            raise DataError(f"{path} has no column for observed interfaces {sorted(missing)}")
        prepared = dataio.prepare(raw, cfg.trm)
        self.cfg = cfg
        self.series = prepared.series
        self.clipped = prepared.clipped
        self.filled = prepared.filled
        self.splits = dict(zip(SPLITS, dataio.split_day_indices(len(self.series.days), cfg.split)))
        self.truth = self._ground_truth()

    def _ground_truth(self):
        cfg = self.cfg
        # the default sidecar only belongs to the default measurements file
        if not cfg.data.get("ground_truth") and cfg.data.get("measurements"):
            return None
        path = cfg.ground_truth_path
        if not path.exists():
            if cfg.data.get("ground_truth"):
                raise ConfigError(f"ground truth not found: {path}")
            return None
        gt = dataio.load_ground_truth(path)
        ids = [d.day_id for d in self.series.days]
        if [d.day_id for d in gt.days] != ids or gt.days[0].fluxes.shape[1] != cfg.geometry.n_interfaces:
            raise DataError(f"{path} does not match the measurement days or road size")
        return gt

    def windows(self, split: str, n_past: int | None = None):
        n_past = self.cfg.pipeline.n_past if n_past is None else n_past
        sub = self.series.subset_days(self.splits[split])
        return dataio.window_examples(
            sub, n_past, self.cfg.pipeline.n_future, self.cfg.stride, self.cfg.geometry.observed_indices
        )

    def day_starts(self, split: str):
        return [self.series.days[i].start for i in self.splits[split]]


def _eval_split(cfg) -> str:
    return cfg.data.get("eval_split", "test")


def _require(examples, what):
    if not examples:
        raise DataError(f"no {what} windows: days too short for n_past + n_future or split empty")
    return examples


# --- commands -------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    if cfg.synth is None:
        raise ConfigError("'synth' needs a data.synth section")
    series, gt = dataio.synth_generate(cfg.synth)
    dataio.write_csv(series, cfg.measurements_path, cfg.trm)
    dataio.write_ground_truth(gt, cfg.ground_truth_path)
    log.info("wrote %d days to %s and %s", len(series.days), cfg.measurements_path, cfg.ground_truth_path)
    return 0


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    sim = cfg.simulate
    out = cfg.output / "tables"
    n_i = cfg.geometry.n_interfaces
    if sim.get("source", "schedule") == "ground_truth":
        gt = dataio.load_ground_truth(cfg.resolve(sim["ground_truth"]) if "ground_truth" in sim else cfg.ground_truth_path)
        replayed = dataio.replay_ground_truth(gt)
        rows, worst = [], 0.0
        for day, fl in zip(gt.days, replayed):
            worst = max(worst, float(np.max(np.abs(fl - day.fluxes))))
            for k, row in enumerate(fl):
                ts = day.start + timedelta(seconds=k * gt.delta_t_seconds)
                rows.append([ts.isoformat(), *map(float, row)])
        write_table(out / "simulated_fluxes.csv", ["timestamp"] + [f"flux_{i}" for i in range(fl.shape[1])], rows)
        print(f"replayed {len(gt.days)} days; max |simulated - stored| = {worst!r}")
        return 0
    unknown = set(sim) - {"source", "initial_density", "rates", "hold"}
    if unknown:
        raise ConfigError(f"unknown keys in 'simulate': {sorted(unknown)}")
    try:
        u0 = np.asarray(sim["initial_density"], dtype=np.float64)
        rates = np.asarray(sim["rates"], dtype=np.float64)
    except KeyError as exc:
        raise ConfigError(f"simulate needs {exc}") from None
    if u0.shape != (n_i - 1,) or rates.ndim != 2 or rates.shape[1] != n_i:
        raise ConfigError(f"simulate needs {n_i - 1} initial densities and rate rows of length {n_i}")
    if sim.get("hold", True):
        rates = np.repeat(rates, cfg.trm.p_t, axis=0)
    dens, flux = trm.trm_rollout(u0, rates)
    states = np.concatenate([u0[None], dens[:-1]])
    header = ["substep"] + [f"density_{j}" for j in range(n_i - 1)] + [f"flux_{i}" for i in range(n_i)]
    write_table(out / "simulation.csv", header, [[k, *map(float, s), *map(float, f)] for k, (s, f) in enumerate(zip(states, flux))])
    mass = float(dens[-1].sum() - u0.sum())
    inflow = float(flux[:, 0].sum() - flux[:, -1].sum())
    print(f"{len(rates)} substeps; mass change {mass!r}, net boundary inflow {inflow!r}")
    return 0


def _train_one(cfg: ExperimentConfig, data: Dataset, outdir: Path, n_past=None, resume=None):
    pipe = cfg.pipeline if n_past is None else replace(cfg.pipeline, n_past=n_past)
    train_ex = _require(data.windows("train", pipe.n_past), "training")
    valid_ex = data.windows("valid", pipe.n_past)
    params = PipelineParams.init(pipe, derive_seed(cfg.seed, "init"))
    if cfg.standardize_inputs:
        params = params.with_input_norm(*input_statistics(batch_arrays(train_ex)[0]))
    state = None
    if resume is not None:
        params, state, _ = load_checkpoint(resume, pipe)
    log.info("training on %d windows (%d validation), %d parameters", len(train_ex), len(valid_ex), params.size)

    def report(row):
        log.info("epoch %d " + " ".join(f"{k}=%.6g" for k in row if k != "epoch"), *row.values())

    best, state = train(
        params, train_ex, valid_ex, pipe, cfg.training, checkpoint=outdir / "checkpoints" / "last.bin", state=state, log=report
    )
    meta = {"best_epoch": state.best_epoch, "stopped": state.stopped, "n_past": pipe.n_past}
    save_params(outdir / "checkpoints" / "best.bin", best, seed=cfg.seed, meta=meta)
    write_history(outdir / "history.csv", state.history)
    log.info("stopped (%s) after %d epochs; best epoch %d", state.stopped, state.epoch, state.best_epoch)
    return pipe, best, state


def cmd_train(cfg: ExperimentConfig, args) -> int:
    data = Dataset(cfg)
    _train_one(cfg, data, cfg.output, resume=args.resume)
    return 0


def _params(cfg, args, pipe=None):
    path = Path(args.checkpoint) if args.checkpoint else cfg.output / "checkpoints" / "best.bin"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (run 'train' first)")
    return load_params(path, pipe or cfg.pipeline)


def cmd_predict(cfg: ExperimentConfig, args) -> int:
    data = Dataset(cfg)
    split = _eval_split(cfg)
    examples = _require(data.windows(split), split)
    params = _params(cfg, args)
    pipe = cfg.pipeline
    past, _ = batch_arrays(examples)
    smoothed, predicted, rates = predict_batched(params, past, pipe)
    dens = _densities(params, past, pipe)
    starts = data.day_starts(split)
    n_i, n_p = pipe.n_interfaces, pipe.n_past

    def rows_for(values, offset, step_base):
        rows = []
        for w, e in enumerate(examples):
            for k, v in enumerate(values[w]):
                step = k + step_base
                ts = starts[e.day] + timedelta(seconds=(e.start + k + offset) * cfg.trm.dT)
                rows.append([w, e.day, e.start, step, ts.isoformat(), *map(float, v)])
        return rows

    key = ["window", "day", "start", "step", "timestamp"]
    out = cfg.output / "predictions"
    flux_cols = [f"flux_{i}" for i in range(n_i)]
    write_table(out / "smoothed.csv", key + flux_cols, rows_for(smoothed, 0, 0))
    key_h = ["window", "day", "start", "horizon", "timestamp"]
    write_table(out / "predicted.csv", key_h + flux_cols, rows_for(predicted, n_p, 1))
    write_table(out / "rates.csv", key + [f"rate_{i}" for i in range(n_i)], rows_for(rates, 0, 0))
    write_table(out / "densities.csv", key + [f"density_{j}" for j in range(n_i - 1)], rows_for(dens, 0, 0))
    log.info("wrote predictions for %d %s windows to %s", len(examples), split, out)
    return 0


def _densities(params, past, pipe, batch=256):
    """Cell densities at the start of every measurement period."""
    out = []
    for i in range(0, len(past), batch):
        o = forward(params, past[i : i + batch], pipe)
        out.append(o.densities[:, :: pipe.trm.p_t])
    return np.concatenate(out)


def _report(cfg, data: Dataset, params, pipe, split: str) -> metrics.EvalReport:
    examples = _require(data.windows(split, pipe.n_past), split)
    past, target = batch_arrays(examples)
    smoothed, predicted, _ = predict_batched(params, past, pipe)
    obs = cfg.geometry.observed_indices
    n = pipe.n_past + pipe.n_future
    if data.truth is not None:
        per_day = [d.fluxes for d in data.truth.subset_days(data.splits[split]).days]
        truth = dataio.slice_windows(per_day, examples, n)[:, pipe.n_past :]
        columns, source = list(range(pipe.n_interfaces)), "ground_truth"
    else:
        sub = data.series.subset_days(data.splits[split])
        truth = dataio.slice_windows([d.values for d in sub.days], examples, n)[:, pipe.n_past :]
        columns, source = list(data.series.interfaces), "measurements"
    return metrics.build_report(
        predicted,
        truth,
        columns,
        obs,
        cfg.geometry.hidden,
        baseline=baseline_last_value(past, pipe.n_future),
        smoothed=smoothed[:, :, obs],
        measured=past,
        clipped=data.clipped,
        truth_source=source,
    )


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    data = Dataset(cfg)
    params = _params(cfg, args)
    report = _report(cfg, data, params, cfg.pipeline, _eval_split(cfg))
    report.write(cfg.output / "report.json")
    report.write_tables(cfg.output / "tables")
    print(f"rmse {report.rmse:.6g}  mape {report.mape:.4g}%  baseline mape {report.baseline_mape:.4g}%")
    for h, m in sorted(report.horizon_mape.items()):
        print(f"  h={h}: {m:.4g}% (baseline {report.baseline_horizon_mape[h]:.4g}%)")
    if report.hidden_mape is not None:
        print(f"  observed {report.observed_mape:.4g}%  hidden {report.hidden_mape:.4g}%")
    return 0


def cmd_gridsearch(cfg: ExperimentConfig, args) -> int:
    values = cfg.gridsearch.get("n_past")
    if not values:
        raise ConfigError("gridsearch-np needs gridsearch.n_past, a list of window lengths")
    data = Dataset(cfg)
    rows = []
    for n_past in values:
        sub = cfg.output / "gridsearch" / f"np_{int(n_past)}"
        pipe, best, _ = _train_one(cfg, data, sub, n_past=int(n_past))
        report = _report(cfg, data, best, pipe, "valid")
        report.write(sub / "report.json")
        rows.append([int(n_past), report.rmse, report.mape])
        print(f"n_past={n_past}: rmse {report.rmse:.6g}  mape {report.mape:.4g}%")
    write_table(cfg.output / "tables" / "gridsearch.csv", ["n_past", "rmse", "mape"], rows)
    return 0


def cmd_inspect(cfg: ExperimentConfig, args) -> int:
    n_i, n_o = cfg.geometry.n_interfaces, cfg.geometry.n_observed
    counted = PipelineParams.init(cfg.pipeline, 0).counts()
    closed = neural.closed_form_counts(n_i, n_o)
    table = {"mlp1": "mlp1", "extractor": "extractor", "mlp2": "mlp2", "predictor": "predictor_table"}
    print(f"N_i={n_i} N_o={n_o}")
    print(f"{'block':<10} {'counted':>9} {'closed':>9} {'delta':>6}")
    for name, ref in table.items():
        print(f"{name:<10} {counted[name]:>9} {closed[ref]:>9} {closed[ref] - counted[name]:>6}")
    total = sum(counted.values())
    print(f"{'total':<10} {total:>9} {closed['total_table']:>9} {closed['total_table'] - total:>6}")
    print(
        f"predictor: Elman cell 3*N_i^2 + 2*N_i = {closed['predictor']}; "
        f"the tabulated 3*N_i*(N_i+1) = {closed['predictor_table']} is larger by N_i = {closed['predictor_delta']}"
    )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gridsearch-np": cmd_gridsearch,
    "inspect-params": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trmflow", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--output", default=None, help="override the output directory")
        if name in ("predict", "evaluate"):
            p.add_argument("--checkpoint", default=None, help="parameter file (default: <output>/checkpoints/best.bin)")
        if name == "train":
            p.add_argument("--resume", default=None, help="continue from a checkpoint written by 'train'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed_override=args.seed, output_override=args.output)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        for kind, code in EXIT_CODES:
            if isinstance(exc, kind):
                err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
                print(json.dumps(err), file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
