"""Physics-aware flux predictor.

Past observations go through an LSTM (the Extractor, initialized by MLP1)
that emits reaction rates for the observed period; an Elman cell (the
Predictor) continues the rates into the future from the Extractor's final
hidden state, driven by zero inputs. The rates are held constant within each
measurement period and drive a TRM rollout started from the densities that
MLP2 infers from the first observation. Sampling the TRM fluxes once per
measurement period yields the smoothed past and the predicted future at
every interface, detector or not.

All functions take either one window ``(N_p, N_o)`` or a batch
``(B, N_p, N_o)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import trm
from .errors import ConfigError, DimensionError
from .neural import (
    Lstm,
    Mlp,
    Srnn,
    count_params,
    init_lstm,
    init_mlp,
    init_srnn,
    lstm_cell,
    mlp_forward,
    srnn_cell,
)


# sigmoid outputs saturate to exactly 1.0 in floating point; scaling by the
# largest double below 1/2 keeps every rate strictly inside the CFL range
RATE_SCALE = float(np.nextafter(0.5, 0.0))


@dataclass(frozen=True)
class PipelineConfig:
    geometry: trm.RoadGeometry
    trm: trm.TrmConfig
    n_past: int
    n_future: int
    reg_weight: float = 1.0

    def __post_init__(self):
        if self.n_past < 1 or self.n_future < 1:
            raise ConfigError("n_past and n_future must be at least 1")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be non-negative")
        if self.geometry.dx != self.trm.dx:
            raise ConfigError(f"geometry dx={self.geometry.dx} differs from TRM dx={self.trm.dx}")

    @property
    def n_interfaces(self) -> int:
        return self.geometry.n_interfaces

    @property
    def n_observed(self) -> int:
        return self.geometry.n_observed

    @property
    def n_steps(self) -> int:
        """Measurement periods covered by one window."""
        return self.n_past + self.n_future

    @property
    def n_substeps(self) -> int:
        """Length of the TRM input sequence, ``(N_p + N_f - 1) P_t + 1``."""
        return (self.n_steps - 1) * self.trm.p_t + 1


@dataclass
class PipelineParams:
    """Trainable blocks plus a fixed input standardization.

    ``input_shift`` and ``input_scale`` (one entry per observed column) map
    observations to ``(x - shift) / scale`` before they reach MLP1, the
    Extractor and MLP2. They are not trained and not counted; any such
    affine map can be folded into the first-layer weights, so the model
    family is unchanged. ``None`` means the identity.
    """

    mlp1: Mlp
    extractor: Lstm
    mlp2: Mlp
    predictor: Srnn
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    BLOCKS = ("mlp1", "extractor", "mlp2", "predictor")

    @classmethod
    def init(cls, config: PipelineConfig, seed: int) -> "PipelineParams":
        rng = np.random.default_rng(seed)
        ni, no = config.n_interfaces, config.n_observed
        return cls(
            mlp1=init_mlp(rng, [no, 2 * ni, 2 * ni]),
            extractor=init_lstm(rng, no, ni),
            mlp2=init_mlp(rng, [no, ni - 1, ni - 1]),
            predictor=init_srnn(rng, ni, ni, ni),
        )

    @classmethod
    def zeros(cls, config: PipelineConfig) -> "PipelineParams":
        p = cls.init(config, 0)
        return p.unflatten(np.zeros(p.size))

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def arrays(self) -> list:
        return [a for name in self.BLOCKS for a in getattr(self, name).arrays()]

    def with_arrays(self, arrays) -> "PipelineParams":
        out, i = {}, 0
        for name in self.BLOCKS:
            block = getattr(self, name)
            n = len(block.arrays())
            out[name] = block.with_arrays(list(arrays[i : i + n]))
            i += n
        return replace(self, **out)

    def with_input_norm(self, shift, scale) -> "PipelineParams":
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ConfigError("input scale must be positive")
        return replace(self, input_shift=np.asarray(shift, dtype=np.float64), input_scale=scale)

    def scale_inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.input_shift is not None:
            x = x - self.input_shift
        if self.input_scale is not None:
            x = x / self.input_scale
        return x

    @property
    def size(self) -> int:
        return sum(count_params(b) for b in self.blocks().values())

    def counts(self) -> dict[str, int]:
        return {name: count_params(b) for name, b in self.blocks().items()}

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(ad.value_of(a)) for a in self.arrays()])

    def unflatten(self, theta) -> "PipelineParams":
        """Rebuild from a flat vector; slices of a traced vector stay traced."""
        expected = self.size
        if np.size(ad.value_of(theta)) != expected:
            raise DimensionError(f"expected {expected} parameters, got {np.size(ad.value_of(theta))}")
        out, i = [], 0
        for a in self.arrays():
            shape = ad.value_of(a).shape
            n = int(np.prod(shape, dtype=np.int64))
            if isinstance(theta, ad.Var):
                piece = ad.reshape(ad.take(theta, slice(i, i + n)), shape)
            else:
                piece = np.asarray(theta[i : i + n]).reshape(shape)
            out.append(piece)
            i += n
        return self.with_arrays(out)

    def leaves(self, tape: ad.Tape) -> tuple["PipelineParams", list]:
        """Copy whose arrays are leaves on ``tape``."""
        leaves = [tape.leaf(ad.value_of(a)) for a in self.arrays()]
        return self.with_arrays(leaves), leaves


@dataclass
class PredictionOutput:
    rates: np.ndarray  # (..., N_p + N_f, N_i)
    densities: np.ndarray  # (..., K + 1, N_s): state when each substep flux is computed
    fluxes_sub: np.ndarray  # (..., K + 1, N_i)
    smoothed: np.ndarray  # (..., N_p, N_i)
    predicted: np.ndarray  # (..., N_f, N_i)
    p_t: int = field(default=1)


def input_statistics(past, floor: float = 1e-6):
    """Per-column mean and (floored) population std of observation windows ``(B, N_p, N_o)``."""
    x = np.asarray(past, dtype=np.float64).reshape(-1, np.shape(past)[-1])
    return x.mean(axis=0), np.maximum(x.std(axis=0), floor)


def _as_batch(past, config: PipelineConfig):
    past = np.asarray(past, dtype=np.float64)
    single = past.ndim == 2
    if single:
        past = past[None]
    if past.ndim != 3 or past.shape[1:] != (config.n_past, config.n_observed):
        raise DimensionError(f"past must be (B, {config.n_past}, {config.n_observed}), got {past.shape}")
    return past, single


def extract_rates(params: PipelineParams, past, config: PipelineConfig):
    """Rates over the observed period and the final LSTM state.

    Returns ``(rates, (c, h))`` with ``rates`` a list of ``N_p`` arrays of
    shape ``(B, N_i)``, each ``h_k / 2`` (see :data:`RATE_SCALE`).
    """
    past = np.asarray(past, dtype=np.float64)
    ni = config.n_interfaces
    state = mlp_forward(params.mlp1, past[:, 0, :])
    c, h = ad.take(state, (Ellipsis, slice(0, ni))), ad.take(state, (Ellipsis, slice(ni, 2 * ni)))
    rates = []
    for k in range(past.shape[1]):
        c, h = lstm_cell(params.extractor, c, h, past[:, k, :])
        rates.append(ad.mul(h, RATE_SCALE))
    return rates, (c, h)


def predict_rates(params: PipelineParams, lstm_state, n_future: int):
    """Continue the rates ``n_future`` steps from the LSTM hidden state."""
    _, h = lstm_state
    s = h
    zeros = np.zeros(ad.value_of(h).shape[:-1] + (params.predictor.input_size,))
    rates = []
    for _ in range(n_future):
        s, y = srnn_cell(params.predictor, s, zeros)
        rates.append(ad.mul(y, RATE_SCALE))
    return rates


def init_density(params: PipelineParams, first_obs):
    """Normalized cell densities at the start of the window."""
    return mlp_forward(params.mlp2, np.asarray(first_obs, dtype=np.float64))


def upsample_rates(rates, p_t: int):
    """Hold each row for ``p_t`` substeps: row ``k`` of the output is ``rates[k // p_t]``.

    Accepts an array ``(T, ...)`` or a list of rows and returns the same kind,
    with ``(T - 1) p_t + 1`` rows.
    """
    n = len(rates)
    if n == 0:
        return rates[:0] if isinstance(rates, np.ndarray) else []
    idx = np.arange((n - 1) * p_t + 1) // p_t
    if isinstance(rates, np.ndarray):
        return rates[idx]
    return [rates[i] for i in idx]


def trace(params: PipelineParams, past, config: PipelineConfig, check: bool = True):
    """Full forward pass; returns lists ``(rates, densities, fluxes)``.

    ``past`` is raw observations; the input standardization is applied here.

    ``densities[k]`` is the state used to compute ``fluxes[k]``.
    """
    past, _ = _as_batch(past, config)
    past = params.scale_inputs(past)
    extracted, state = extract_rates(params, past, config)
    rates = extracted + predict_rates(params, state, config.n_future)
    sub = upsample_rates(rates, config.trm.p_t)
    u = init_density(params, past[:, 0, :])
    densities, fluxes = [], []
    last = len(sub) - 1
    for k, c in enumerate(sub):
        densities.append(u)
        if k < last:
            u, f = trm.trm_step(u, c, check=check, step=k)
        else:
            f = trm.trm_fluxes(u, c, check=check)
        fluxes.append(f)
    return rates, densities, fluxes


def flux_rows(fluxes, config: PipelineConfig):
    """Fluxes sampled once per measurement period (substeps ``k P_t``)."""
    return fluxes[:: config.trm.p_t]


def forward(params: PipelineParams, past, config: PipelineConfig) -> PredictionOutput:
    past_b, single = _as_batch(past, config)
    rates, densities, fluxes = trace(params, past_b, config)
    stack = lambda xs: np.stack([ad.value_of(x) for x in xs], axis=1)  # noqa: E731
    rates, densities, fluxes = stack(rates), stack(densities), stack(fluxes)
    rows = fluxes[:, :: config.trm.p_t]
    out = PredictionOutput(
        rates=rates,
        densities=densities,
        fluxes_sub=fluxes,
        smoothed=rows[:, : config.n_past],
        predicted=rows[:, config.n_past :],
        p_t=config.trm.p_t,
    )
    if single:
        for name in ("rates", "densities", "fluxes_sub", "smoothed", "predicted"):
            setattr(out, name, getattr(out, name)[0])
    return out


def window_loss_terms(rows, target, rates, n_past: int, observed_idx) -> dict:
    """Data and regularization terms for a batch.

    Args:
        rows: per-period predicted fluxes, list of ``N_p + N_f`` arrays
            ``(B, N_i)``.
        target: ``(B, N_p + N_f, N_o)`` measurements at observed interfaces.
        rates: list of ``N_p + N_f`` rate arrays ``(B, N_i)``.
        observed_idx: interface index of each target column.

    Returns:
        ``{"past", "future", "reg"}``, each a batch-averaged scalar.
    """
    target = np.asarray(target, dtype=np.float64)
    n_ex, n_rows = target.shape[0], target.shape[1]
    if n_rows != len(rows):
        raise DimensionError(f"{len(rows)} predicted rows for {n_rows} target rows")
    observed_idx = np.asarray(observed_idx)
    contiguous = observed_idx.size and np.all(np.diff(observed_idx) == 1)
    key = (Ellipsis, slice(observed_idx[0], observed_idx[-1] + 1)) if contiguous else (Ellipsis, observed_idx)
    sq = [ad.sum(ad.square(ad.sub(ad.take(r, key), target[:, k, :]))) for k, r in enumerate(rows)]
    n_future = n_rows - n_past
    past = ad.mul(_total(sq[:n_past]), 1.0 / (n_ex * n_past))
    future = ad.mul(_total(sq[n_past:]), 1.0 / (n_ex * n_future))
    n_cells = ad.value_of(rates[0]).shape[-1] - 1
    diffs = [
        ad.sum(ad.square(ad.sub(ad.take(c, (Ellipsis, slice(1, None))), ad.take(c, (Ellipsis, slice(None, -1))))))
        for c in rates
    ]
    reg = ad.mul(_total(diffs), 1.0 / (n_ex * len(rates) * n_cells))
    return {"past": past, "future": future, "reg": reg}


def _total(xs):
    acc = xs[0]
    for x in xs[1:]:
        acc = ad.add(acc, x)
    return acc


def batch_arrays(examples):
    """Stack window examples (or pass through a ``(past, target)`` pair)."""
    if isinstance(examples, tuple) and len(examples) == 2 and isinstance(examples[0], np.ndarray):
        return examples
    if len(examples) == 0:
        raise ValueError("empty batch")
    past = np.stack([e.past for e in examples])
    target = np.stack([e.target for e in examples])
    return past, target


def loss_terms(params: PipelineParams, examples, config: PipelineConfig) -> dict:
    past, target = batch_arrays(examples)
    if past.shape[0] == 0:
        raise ValueError("empty batch")
    rates, _, fluxes = trace(params, past, config)
    rows = flux_rows(fluxes, config)
    terms = window_loss_terms(rows, target, rates, config.n_past, config.geometry.observed_indices)
    terms["total"] = ad.add(ad.add(terms["past"], terms["future"]), ad.mul(terms["reg"], config.reg_weight))
    return terms


def loss(params: PipelineParams, examples, config: PipelineConfig):
    """Mean squared flux error over past and future rows plus the weighted regularizer."""
    return loss_terms(params, examples, config)["total"]


def loss_and_grad(params: PipelineParams, examples, config: PipelineConfig) -> tuple[float, np.ndarray]:
    """Loss value and its gradient as a flat vector aligned with ``params.flatten()``."""
    tape = ad.Tape()
    traced, leaves = params.leaves(tape)
    value = loss(traced, examples, config)
    grads = ad.backward(value, leaves)
    return float(value.value), np.concatenate([g.ravel() for g in grads])


def baseline_last_value(past, n_future: int) -> np.ndarray:
    """Repeat the last observed row ``n_future`` times."""
    past = np.asarray(past, dtype=np.float64)
    last = past[..., -1:, :]
    return np.repeat(last, n_future, axis=-2)
