"""Loop-detector flux data: parsing, cleaning, windowing and synthetic generation.

Measurement CSV layout::

    dx_meters=150.0,dt_seconds=60.0,rho_max_veh_per_m=0.4
    timestamp,0,2,3,5,7,10
    2024-01-01T06:00:00,31.2,28.0,,30.5,29.9,27.1
    ...

Values are vehicle counts per measurement period, an empty field marks a
missing value. Rows are grouped into days by the date of their timestamp and
must be spaced by exactly one period within a day.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import trm
from .errors import ConfigError, CsvFormatError, DataError
from .io_utils import atomic_write_text, fmt

CLIP_EPS = 1e-6
META_KEYS = ("dx_meters", "dt_seconds", "rho_max_veh_per_m")


@dataclass
class Day:
    day_id: str
    start: datetime
    values: np.ndarray  # (T, n_columns), NaN where missing

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def timestamps(self, delta_t_seconds: float) -> list[datetime]:
        return [self.start + timedelta(seconds=k * delta_t_seconds) for k in range(self.n_rows)]


@dataclass
class MeasurementSeries:
    days: list[Day]
    interfaces: tuple[int, ...]
    delta_t_seconds: float
    dx: float
    rho_max: float
    units: str = "counts"  # or "dimensionless"

    @property
    def n_columns(self) -> int:
        return len(self.interfaces)

    def column_index(self, interfaces) -> np.ndarray:
        lookup = {i: k for k, i in enumerate(self.interfaces)}
        missing = [i for i in interfaces if i not in lookup]
        if missing:
            raise DataError(f"no data column for interfaces {missing}")
        return np.array([lookup[i] for i in interfaces], dtype=int)

    def subset_days(self, indices) -> "MeasurementSeries":
        return replace(self, days=[self.days[i] for i in indices])

    def total_rows(self) -> int:
        return sum(d.n_rows for d in self.days)


# --- CSV -----------------------------------------------------------------------


def _parse_meta(line: str, keys=META_KEYS, lineno=1) -> dict[str, float]:
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) != len(keys):
        raise CsvFormatError(f"expected {len(keys)} metadata fields {keys}, got {len(parts)}", lineno)
    meta = {}
    for part, key in zip(parts, keys):
        name, sep, value = part.partition("=")
        if not sep or name.strip() != key:
            raise CsvFormatError(f"expected '{key}=<value>', got {part!r}", lineno)
        try:
            meta[key] = float(value) if key != "p_t" else int(value)
        except ValueError:
            raise CsvFormatError(f"bad numeric value for {key}: {value!r}", lineno) from None
    return meta


def _parse_time(text: str, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise CsvFormatError(f"bad ISO-8601 timestamp {text!r}", lineno) from None


def _group_days(stamps, rows, delta_t, first_line):
    """Split consecutive rows into days; checks ordering and spacing."""
    days: list[Day] = []
    step = timedelta(seconds=delta_t)
    current, start, prev = [], None, None
    for k, (ts, row) in enumerate(zip(stamps, rows)):
        lineno = first_line + k
        if prev is not None and ts <= prev:
            raise CsvFormatError("timestamps must be strictly increasing", lineno)
        if prev is not None and ts.date() == prev.date():
            if ts - prev != step:
                raise CsvFormatError(f"gap of {ts - prev} within a day, expected {step}", lineno)
        else:
            if current:
                days.append(Day(start.date().isoformat(), start, np.array(current, dtype=np.float64)))
            current, start = [], ts
        current.append(row)
        prev = ts
    if current:
        days.append(Day(start.date().isoformat(), start, np.array(current, dtype=np.float64)))
    return days


def load_csv(path) -> MeasurementSeries:
    """Parse a measurement file; missing values become NaN, never zero."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if len(lines) < 2:
        raise CsvFormatError("file must have two header lines", len(lines) + 1)
    meta = _parse_meta(lines[0])
    header = next(csv.reader([lines[1]]))
    if not header or header[0].strip() != "timestamp":
        raise CsvFormatError("second header line must start with 'timestamp'", 2)
    try:
        interfaces = tuple(int(h) for h in header[1:])
    except ValueError:
        raise CsvFormatError("interface indices must be integers", 2) from None
    if not interfaces:
        raise CsvFormatError("no interface columns", 2)
    if any(b <= a for a, b in zip(interfaces, interfaces[1:])) or interfaces[0] < 0:
        raise CsvFormatError("interface indices must be non-negative and strictly increasing", 2)
    stamps, rows = [], []
    for k, rec in enumerate(csv.reader(lines[2:])):
        lineno = k + 3
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != len(header):
            raise CsvFormatError(f"expected {len(header)} fields, got {len(rec)}", lineno)
        stamps.append(_parse_time(rec[0], lineno))
        row = []
        for field_ in rec[1:]:
            field_ = field_.strip()
            if not field_:
                row.append(math.nan)
                continue
            try:
                v = float(field_)
            except ValueError:
                raise CsvFormatError(f"bad count {field_!r}", lineno) from None
            if not math.isfinite(v) or v < 0:
                raise CsvFormatError(f"counts must be finite and non-negative, got {field_!r}", lineno)
            row.append(v)
        rows.append(row)
    days = _group_days(stamps, rows, meta["dt_seconds"], 3)
    return MeasurementSeries(days, interfaces, meta["dt_seconds"], meta["dx_meters"], meta["rho_max_veh_per_m"])


def _meta_line(dx, dt, rho_max, extra=()):
    parts = [f"dx_meters={fmt(dx)}", f"dt_seconds={fmt(dt)}", f"rho_max_veh_per_m={fmt(rho_max)}"]
    parts += [f"{k}={v}" for k, v in extra]
    return ",".join(parts)


def write_csv(series: MeasurementSeries, path, config: trm.TrmConfig | None = None) -> None:
    """Write counts; a dimensionless series needs ``config`` to be scaled back."""
    if series.units != "counts":
        if config is None:
            raise ConfigError("writing a dimensionless series needs the TRM config")
        series = denormalize_series(series, config)
    buf = io.StringIO()
    buf.write(_meta_line(series.dx, series.delta_t_seconds, series.rho_max) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", *series.interfaces])
    for day in series.days:
        for ts, row in zip(day.timestamps(series.delta_t_seconds), day.values):
            w.writerow([ts.isoformat(), *(fmt(v) for v in row)])
    atomic_write_text(path, buf.getvalue())


# --- cleaning and scaling -------------------------------------------------------


def interpolate_missing(series: MeasurementSeries) -> MeasurementSeries:
    """Fill gaps by linear interpolation along the road.

    Positions are interface indices (interfaces are equally spaced). Values
    beyond the outermost working detector copy the nearest one.
    """
    pos = np.asarray(series.interfaces, dtype=np.float64)
    days = []
    for day in series.days:
        vals = day.values.copy()
        for t in np.flatnonzero(np.isnan(vals).any(axis=1)):
            row = vals[t]
            ok = ~np.isnan(row)
            if ok.sum() < 2:
                raise DataError(f"day {day.day_id} row {t}: fewer than two working detectors")
            row[~ok] = np.interp(pos[~ok], pos[ok], row[ok])
        days.append(Day(day.day_id, day.start, vals))
    return replace(series, days=days)


def _check_units(series, config: trm.TrmConfig):
    if not math.isclose(series.delta_t_seconds, config.dT) or not math.isclose(series.dx, config.dx):
        raise ConfigError(
            f"data has dx={series.dx}, dT={series.delta_t_seconds}; config has dx={config.dx}, dT={config.dT}"
        )
    if not math.isclose(series.rho_max, config.rho_max):
        raise ConfigError(f"data rho_max={series.rho_max} differs from config rho_max={config.rho_max}")


def normalize(series: MeasurementSeries, config: trm.TrmConfig) -> tuple[MeasurementSeries, int]:
    """Counts per period to dimensionless flux; returns the series and the clip count.

    Values above ``1/2 - 1e-6`` are clipped to it and counted.
    """
    if series.units == "dimensionless":
        return series, 0
    _check_units(series, config)
    scale = trm.flux_scale(config)
    cap = 0.5 - CLIP_EPS
    clipped, days = 0, []
    for day in series.days:
        v = (day.values / series.delta_t_seconds) / scale
        over = v > cap
        clipped += int(over.sum())
        days.append(Day(day.day_id, day.start, np.where(over, cap, v)))
    return replace(series, days=days, units="dimensionless"), clipped


def denormalize(values, config: trm.TrmConfig):
    """Dimensionless flux back to counts per measurement period."""
    return np.asarray(values) * trm.flux_scale(config) * config.dT


def denormalize_series(series: MeasurementSeries, config: trm.TrmConfig) -> MeasurementSeries:
    if series.units == "counts":
        return series
    _check_units(series, config)
    days = [Day(d.day_id, d.start, denormalize(d.values, config)) for d in series.days]
    return replace(series, days=days, units="counts")


# --- windows --------------------------------------------------------------------


@dataclass
class WindowExample:
    past: np.ndarray  # (N_p, N_o)
    target: np.ndarray  # (N_p + N_f, N_o); first N_p rows equal past
    day: int = 0
    start: int = 0


def window_starts(n_rows: int, n_past: int, n_future: int, stride: int = 1) -> range:
    return range(0, max(0, n_rows - (n_past + n_future) + 1), stride)


def window_examples(series: MeasurementSeries, n_past: int, n_future: int, stride: int = 1, interfaces=None):
    """Sliding windows inside each day (never across days).

    Args:
        interfaces: columns fed to the model, defaults to all series columns.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cols = np.arange(series.n_columns) if interfaces is None else series.column_index(interfaces)
    n = n_past + n_future
    out = []
    for d, day in enumerate(series.days):
        vals = day.values[:, cols]
        for s in window_starts(day.n_rows, n_past, n_future, stride):
            target = vals[s : s + n].copy()
            if np.isnan(target).any():
                raise DataError(f"day {day.day_id}: missing values in window at row {s}; interpolate first")
            out.append(WindowExample(target[:n_past].copy(), target, d, s))
    return out


def slice_windows(per_day, examples, n_rows: int) -> np.ndarray:
    """Rows ``start : start + n_rows`` of a per-day array, aligned with ``examples``."""
    return np.stack([per_day[e.day][e.start : e.start + n_rows] for e in examples])


def split_by_days(series: MeasurementSeries, fractions=(0.8, 0.1, 0.1)):
    """Contiguous day-level split; returns one series per fraction."""
    return tuple(series.subset_days(idx) for idx in split_day_indices(len(series.days), fractions))


def split_day_indices(n_days: int, fractions) -> list[list[int]]:
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    raw = [f * n_days for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n_days - sum(counts)]:
        counts[i] += 1
    for f, c in zip(fractions, counts):
        if f > 0 and c == 0:
            raise DataError(f"too few days ({n_days}) for split {fractions}")
    out, i = [], 0
    for c in counts:
        out.append(list(range(i, i + c)))
        i += c
    return out


# --- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic road with smooth space-time reaction rates.

    ``temporal_period`` is in measurement periods and ``spatial_length`` in
    interfaces. ``noise_std`` is relative to the mean noiseless flux.
    """

    geometry: trm.RoadGeometry
    trm: trm.TrmConfig
    n_days: int = 10
    steps_per_day: int = 120
    warmup_steps: int = 30
    rate_min: float = 0.05
    rate_max: float = 0.45
    spatial_length: float = 3.0
    temporal_period: float = 40.0
    n_harmonics: int = 2
    noise_std: float = 0.05
    seed: int = 0
    noise_seed: int | None = None  # defaults to seed
    start: str = "2024-01-01T06:00:00"

    def __post_init__(self):
        if not (0.0 < self.rate_min < self.rate_max < 0.5):
            raise ConfigError(f"rate bounds must satisfy 0 < min < max < 1/2, got ({self.rate_min}, {self.rate_max})")
        if self.n_days < 1 or self.steps_per_day < 1 or self.warmup_steps < 0:
            raise ConfigError("n_days and steps_per_day must be positive, warmup_steps non-negative")
        if self.noise_std < 0 or self.spatial_length <= 0 or self.temporal_period <= 0 or self.n_harmonics < 0:
            raise ConfigError("invalid synthetic field parameters")


@dataclass
class GroundTruthDay:
    day_id: str
    start: datetime
    rates: np.ndarray  # (T, N_i), held over each period
    densities: np.ndarray  # (T, N_s), state at the start of each period
    fluxes: np.ndarray  # (T, N_i), noiseless flux at the first substep of each period


@dataclass
class GroundTruth:
    days: list[GroundTruthDay]
    dx: float
    delta_t_seconds: float
    rho_max: float
    p_t: int

    def subset_days(self, indices) -> "GroundTruth":
        return replace(self, days=[self.days[i] for i in indices])


def _smooth(rng, n, length):
    """Gaussian-smoothed white noise rescaled to unit max-abs."""
    x = np.arange(n)
    kernel = np.exp(-0.5 * ((x[:, None] - x[None, :]) / length) ** 2)
    v = kernel @ rng.standard_normal(n)
    return v / max(np.abs(v).max(), 1e-12)


def rate_field(cfg: SynthConfig, rng: np.random.Generator, n_rows: int, t0: int = 0) -> np.ndarray:
    """Rates ``(n_rows, N_i)`` inside ``(rate_min, rate_max)``.

    A static smooth spatial profile plus low-order travelling sinusoids in
    time with smooth spatial amplitudes and phases.
    """
    ni = cfg.geometry.n_interfaces
    t = np.arange(t0, t0 + n_rows, dtype=np.float64)[:, None]
    z = 0.5 * _smooth(rng, ni, cfg.spatial_length)[None, :]
    for h in range(1, cfg.n_harmonics + 1):
        amp = 0.5 + 0.5 * np.abs(_smooth(rng, ni, cfg.spatial_length))
        phase = rng.uniform(0, 2 * np.pi) + np.pi * _smooth(rng, ni, cfg.spatial_length)
        z = z + amp[None, :] / h * np.sin(2 * np.pi * h * t / cfg.temporal_period + phase[None, :])
    z = z / np.abs(z).max()
    mid, half = 0.5 * (cfg.rate_min + cfg.rate_max), 0.5 * (cfg.rate_max - cfg.rate_min)
    # 0.999 keeps the extremes strictly inside the bounds
    return mid + 0.999 * half * z


def simulate_periods(u0, rates, p_t: int):
    """Roll the TRM over whole periods with rates held for ``p_t`` substeps.

    Returns densities at the start of each period and fluxes at its first substep.
    """
    dens, flux = trm.trm_rollout(u0, np.repeat(rates, p_t, axis=0))
    starts = np.concatenate([np.asarray(u0, dtype=np.float64)[None], dens[p_t - 1 :: p_t][:-1]])
    return starts, flux[::p_t], dens[-1]


def replay_ground_truth(gt: GroundTruth) -> list[np.ndarray]:
    """Noiseless fluxes recomputed from stored rates and initial densities."""
    return [simulate_periods(d.densities[0], d.rates, gt.p_t)[1] for d in gt.days]


def synth_generate(cfg: SynthConfig) -> tuple[MeasurementSeries, GroundTruth]:
    """Seeded synthetic dataset with ground truth.

    Each day draws its own rate field and initial density from a generator
    keyed on ``(seed, day)``, runs a warm-up rollout and then records
    ``steps_per_day`` periods. Measurements at the detector interfaces are the
    noiseless fluxes plus Gaussian noise of standard deviation
    ``noise_std * mean flux``, truncated to ``[0, 1/2 - 1e-6]``.
    """
    geo, tc = cfg.geometry, cfg.trm
    p_t = tc.p_t
    start0 = datetime.fromisoformat(cfg.start)
    gt_days = []
    for d in range(cfg.n_days):
        rng = np.random.default_rng([cfg.seed, d, 0])
        rates_all = rate_field(cfg, rng, cfg.warmup_steps + cfg.steps_per_day, t0=-cfg.warmup_steps)
        u0 = 0.1 + 0.4 * (0.5 + 0.5 * _smooth(rng, geo.n_cells, cfg.spatial_length))
        if cfg.warmup_steps:
            _, _, u0 = simulate_periods(u0, rates_all[: cfg.warmup_steps], p_t)
        rates = rates_all[cfg.warmup_steps :]
        dens, flux, _ = simulate_periods(u0, rates, p_t)
        start = start0 + timedelta(days=d)
        gt_days.append(GroundTruthDay(start.date().isoformat(), start, rates, dens, flux))

    detectors = geo.detector_indices
    mean_flux = float(np.mean([g.fluxes[:, detectors].mean() for g in gt_days]))
    sigma = cfg.noise_std * mean_flux
    cap = 0.5 - CLIP_EPS
    days = []
    for d, g in enumerate(gt_days):
        clean = g.fluxes[:, detectors]
        if sigma > 0:
            noise_seed = cfg.seed if cfg.noise_seed is None else cfg.noise_seed
            rng = np.random.default_rng([noise_seed, d, 1])
            obs = np.clip(clean + sigma * rng.standard_normal(clean.shape), 0.0, cap)
        else:
            obs = clean.copy()
        days.append(Day(g.day_id, g.start, obs))
    series = MeasurementSeries(
        days, tuple(int(i) for i in detectors), tc.dT, tc.dx, tc.rho_max, units="dimensionless"
    )
    gt = GroundTruth(gt_days, tc.dx, tc.dT, tc.rho_max, p_t)
    return series, gt


def write_ground_truth(gt: GroundTruth, path) -> None:
    ni = gt.days[0].rates.shape[1]
    buf = io.StringIO()
    buf.write(_meta_line(gt.dx, gt.delta_t_seconds, gt.rho_max, [("p_t", gt.p_t)]) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["timestamp"]
        + [f"rate_{i}" for i in range(ni)]
        + [f"density_{i}" for i in range(ni - 1)]
        + [f"flux_{i}" for i in range(ni)]
    )
    for day in gt.days:
        for k in range(day.rates.shape[0]):
            ts = day.start + timedelta(seconds=k * gt.delta_t_seconds)
            vals = np.concatenate([day.rates[k], day.densities[k], day.fluxes[k]])
            w.writerow([ts.isoformat(), *(fmt(v) for v in vals)])
    atomic_write_text(path, buf.getvalue())


def load_ground_truth(path) -> GroundTruth:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2:
        raise CsvFormatError("ground-truth file needs two header lines", len(lines) + 1)
    meta = _parse_meta(lines[0], META_KEYS + ("p_t",))
    header = next(csv.reader([lines[1]]))
    ni = sum(1 for h in header if h.startswith("rate_"))
    if header[0] != "timestamp" or len(header) != 1 + 3 * ni - 1 or ni < 2:
        raise CsvFormatError("unexpected ground-truth columns", 2)
    stamps, rows = [], []
    for k, rec in enumerate(csv.reader(lines[2:])):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CsvFormatError(f"expected {len(header)} fields, got {len(rec)}", k + 3)
        stamps.append(_parse_time(rec[0], k + 3))
        try:
            rows.append([float(x) for x in rec[1:]])
        except ValueError:
            raise CsvFormatError("non-numeric ground-truth value", k + 3) from None
    days = []
    for day in _group_days(stamps, rows, meta["dt_seconds"], 3):
        v = day.values
        days.append(GroundTruthDay(day.day_id, day.start, v[:, :ni], v[:, ni : 2 * ni - 1], v[:, 2 * ni - 1 :]))
    return GroundTruth(days, meta["dx_meters"], meta["dt_seconds"], meta["rho_max_veh_per_m"], int(meta["p_t"]))


@dataclass
class PreparedData:
    """Dimensionless, gap-free series plus bookkeeping from the cleaning steps."""

    series: MeasurementSeries
    clipped: int = 0
    filled: int = 0
    notes: list = field(default_factory=list)


def prepare(series: MeasurementSeries, config: trm.TrmConfig) -> PreparedData:
    """Interpolate gaps, then scale to dimensionless flux."""
    filled = int(sum(np.isnan(d.values).sum() for d in series.days))
    if filled:
        series = interpolate_missing(series)
    series, clipped = normalize(series, config)
    return PreparedData(series, clipped, filled)
