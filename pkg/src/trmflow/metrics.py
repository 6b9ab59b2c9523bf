"""Error metrics, per-horizon and per-interface breakdowns, smoothing diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import DataError, DimensionError
from .io_utils import atomic_write_text, write_table

MAPE_EPS = 1e-9
QUANTILE_LEVELS = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    if pred.size == 0:
        raise DataError("rmse of an empty set")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape_counted(pred, truth, eps: float = MAPE_EPS) -> tuple[float, int, int]:
    """MAPE in percent plus ``(n_used, n_excluded)``; entries with ``|y| <= eps`` are skipped."""
    pred, truth = _pair(pred, truth)
    keep = np.abs(truth) > eps
    n_used = int(keep.sum())
    if n_used == 0:
        raise DataError("every entry excluded from MAPE (truth too close to zero)")
    rel = np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])
    return float(100.0 * rel.mean()), n_used, int(truth.size - n_used)


def mape(pred, truth, eps: float = MAPE_EPS) -> float:
    return mape_counted(pred, truth, eps)[0]


def horizon_mape(pred, truth, horizons=None, columns=None, eps: float = MAPE_EPS) -> dict[int, float]:
    """MAPE per forecast horizon.

    Args:
        pred, truth: arrays ``(windows, N_f, interfaces)``.
        horizons: 1-based horizons, all by default.
        columns: interface columns to include, all by default.
    """
    pred, truth = _pair(pred, truth)
    if pred.ndim != 3:
        raise DimensionError("expected (windows, horizon, interface) arrays")
    n_f = pred.shape[1]
    horizons = range(1, n_f + 1) if horizons is None else horizons
    cols = slice(None) if columns is None else np.asarray(columns, dtype=int)
    out = {}
    for h in horizons:
        if not 1 <= h <= n_f:
            raise DataError(f"horizon {h} outside 1..{n_f}")
        out[int(h)] = mape(pred[:, h - 1, cols], truth[:, h - 1, cols], eps)
    return out


def per_interface_mape(pred, truth, eps: float = MAPE_EPS) -> np.ndarray:
    """One MAPE per column of the last axis."""
    pred, truth = _pair(pred, truth)
    p = pred.reshape(-1, pred.shape[-1])
    t = truth.reshape(-1, truth.shape[-1])
    return np.array([mape(p[:, j], t[:, j], eps) for j in range(p.shape[1])])


def normal_quantiles(n: int) -> np.ndarray:
    """Standard normal quantiles at plotting positions ``(i - 0.5) / n``."""
    inv = NormalDist().inv_cdf
    return np.array([inv((i - 0.5) / n) for i in range(1, n + 1)])


@dataclass
class SmoothingStats:
    n: int
    bias: float
    sd: float
    quantiles: dict[str, float]
    smoothed_std: float
    measured_std: float
    qq: list[tuple[float, float]] = field(default_factory=list)  # (normal quantile, standardized diff)
    hist_edges: list[float] = field(default_factory=list)
    hist_counts: list[int] = field(default_factory=list)


def smoothing_stats(smoothed, measured, bins: int = 30, qq_points: int | None = 200) -> SmoothingStats:
    """Distribution of ``smoothed - measured``.

    ``qq_points`` thins the QQ pairs to an evenly spaced subset (None keeps all).
    The standard deviations are population (ddof=0) values.
    """
    smoothed, measured = _pair(smoothed, measured)
    diff = (smoothed - measured).ravel()
    n = diff.size
    if n < 2:
        raise DataError("smoothing statistics need at least two samples")
    bias = float(diff.mean())
    sd = float(diff.std())
    qs = np.quantile(diff, QUANTILE_LEVELS)
    z = np.sort(diff - bias) / sd if sd > 0 else np.zeros(n)
    theo = normal_quantiles(n)
    idx = np.arange(n)
    if qq_points is not None and n > qq_points:
        idx = np.unique(np.round(np.linspace(0, n - 1, qq_points)).astype(int))
    lo, hi = float(diff.min()), float(diff.max())
    # a nearly constant difference cannot be split into finite bins; widen it
    # the way numpy does for an exactly constant one
    if hi - lo <= 1e-9 * max(1.0, abs(lo), abs(hi)):
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(diff, bins=bins, range=(lo, hi))
    return SmoothingStats(
        n=n,
        bias=bias,
        sd=sd,
        quantiles={repr(q): float(v) for q, v in zip(QUANTILE_LEVELS, qs)},
        smoothed_std=float(smoothed.std()),
        measured_std=float(measured.std()),
        qq=[(float(theo[i]), float(z[i])) for i in idx],
        hist_edges=[float(e) for e in edges],
        hist_counts=[int(c) for c in counts],
    )


@dataclass
class EvalReport:
    rmse: float
    mape: float
    n_windows: int
    horizon_mape: dict[int, float]
    per_interface_mape: list  # length N_i, None where no truth exists
    interface_tags: list[str]  # "observed", "hidden" or "none"
    observed_mape: float | None
    hidden_mape: float | None
    baseline_mape: float | None = None
    baseline_rmse: float | None = None
    baseline_horizon_mape: dict[int, float] = field(default_factory=dict)
    smoothing: SmoothingStats | None = None
    excluded: int = 0
    clipped: int = 0
    truth_source: str = "measurements"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizon_mape"] = {str(k): v for k, v in self.horizon_mape.items()}
        d["baseline_horizon_mape"] = {str(k): v for k, v in self.baseline_horizon_mape.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["horizon_mape"] = {int(k): v for k, v in d["horizon_mape"].items()}
        d["baseline_horizon_mape"] = {int(k): v for k, v in d.get("baseline_horizon_mape", {}).items()}
        if d.get("smoothing") is not None:
            s = dict(d["smoothing"])
            s["qq"] = [tuple(p) for p in s["qq"]]
            d["smoothing"] = SmoothingStats(**s)
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())

    def write_tables(self, directory) -> None:
        """Companion CSVs for plotting."""
        directory = Path(directory)
        write_table(
            directory / "per_interface.csv",
            ["interface", "tag", "mape"],
            [(i, t, m) for i, (t, m) in enumerate(zip(self.interface_tags, self.per_interface_mape))],
        )
        write_table(
            directory / "per_horizon.csv",
            ["horizon", "mape", "baseline_mape"],
            [(h, m, self.baseline_horizon_mape.get(h)) for h, m in sorted(self.horizon_mape.items())],
        )
        if self.smoothing is not None:
            s = self.smoothing
            write_table(
                directory / "histogram.csv",
                ["left", "right", "count"],
                [(a, b, c) for a, b, c in zip(s.hist_edges, s.hist_edges[1:], s.hist_counts)],
            )
            write_table(directory / "qq.csv", ["normal_quantile", "standardized_difference"], s.qq)


def _opt_mape(pred, truth, eps):
    return None if pred.size == 0 else mape(pred, truth, eps)


def build_report(
    predicted,
    truth,
    truth_columns,
    observed,
    hidden=(),
    baseline=None,
    smoothed=None,
    measured=None,
    eps: float = MAPE_EPS,
    clipped: int = 0,
    truth_source: str = "measurements",
) -> EvalReport:
    """Assemble an :class:`EvalReport`.

    Args:
        predicted: ``(windows, N_f, N_i)`` forecasts at every interface.
        truth: ``(windows, N_f, len(truth_columns))`` reference values.
        truth_columns: interface index of each truth column.
        observed, hidden: interface indices seen / hidden during training.
            Headline numbers use the observed interfaces.
        baseline: optional ``(windows, N_f, len(observed))`` last-value forecast.
        smoothed, measured: optional aligned arrays for smoothing statistics.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    truth_columns = [int(c) for c in truth_columns]
    pos = {c: k for k, c in enumerate(truth_columns)}
    observed = [int(i) for i in observed]
    hidden = [int(i) for i in hidden]
    missing = [i for i in observed if i not in pos]
    if missing:
        raise DataError(f"no truth at observed interfaces {missing}")
    if truth.shape[:2] != predicted.shape[:2] or truth.shape[2] != len(truth_columns):
        raise DimensionError(f"truth shape {truth.shape} does not match predictions {predicted.shape}")

    obs_p, obs_t = predicted[:, :, observed], truth[:, :, [pos[i] for i in observed]]
    overall, _, excluded = mape_counted(obs_p, obs_t, eps)
    hid = [i for i in hidden if i in pos]

    n_i = predicted.shape[2]
    per_if, tags = [], []
    for i in range(n_i):
        tags.append("observed" if i in observed else "hidden" if i in hidden else "none")
        per_if.append(mape(predicted[:, :, i], truth[:, :, pos[i]], eps) if i in pos else None)

    report = EvalReport(
        rmse=rmse(obs_p, obs_t),
        mape=overall,
        n_windows=int(predicted.shape[0]),
        horizon_mape=horizon_mape(obs_p, obs_t, eps=eps),
        per_interface_mape=per_if,
        interface_tags=tags,
        observed_mape=overall,
        hidden_mape=_opt_mape(predicted[:, :, hid], truth[:, :, [pos[i] for i in hid]], eps),
        excluded=excluded,
        clipped=int(clipped),
        truth_source=truth_source,
    )
    if baseline is not None:
        baseline = np.asarray(baseline, dtype=np.float64)
        report.baseline_mape = mape(baseline, obs_t, eps)
        report.baseline_rmse = rmse(baseline, obs_t)
        report.baseline_horizon_mape = horizon_mape(baseline, obs_t, eps=eps)
    if smoothed is not None:
        report.smoothing = smoothing_stats(smoothed, measured)
    return report
