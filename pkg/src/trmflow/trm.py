"""Traffic Reaction Model: explicit finite-volume scheme for the LWR equation.

Densities are stored normalized, ``u = rho / rho_max`` in [0, 1], and the
reaction rates ``c`` are dimensionless and must stay below 1/2. A road with
``N_i`` interfaces has ``N_s = N_i - 1`` cells; interface 0 is the upstream
boundary and interface ``N_i - 1`` the downstream one. The boundary rates
carry the upstream density (road treated as full beyond the first interface)
and the downstream free space (road treated as empty past the last one).

The per-step functions accept traced values from :mod:`trmflow.autodiff`, so
a rollout can sit inside a differentiable pipeline. Validation always runs on
the concrete values and raises instead of clamping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CflViolation, ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class RoadGeometry:
    n_interfaces: int
    dx: float
    observed: tuple[bool, ...]
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(bool(b) for b in self.observed))
        object.__setattr__(self, "hidden", tuple(int(i) for i in self.hidden))
        if self.n_interfaces < 2:
            raise ConfigError("a road needs at least two interfaces")
        if not self.dx > 0:
            raise ConfigError("dx must be positive")
        if len(self.observed) != self.n_interfaces:
            raise ConfigError(f"observed mask has {len(self.observed)} entries, expected {self.n_interfaces}")
        if not any(self.observed):
            raise ConfigError("at least one interface must be observed")
        for i in self.hidden:
            if not 0 <= i < self.n_interfaces:
                raise ConfigError(f"hidden interface {i} out of range")
            if self.observed[i]:
                raise ConfigError(f"interface {i} cannot be both observed and hidden")

    @classmethod
    def from_indices(cls, n_interfaces, dx, observed, hidden=()):
        mask = [False] * n_interfaces
        for i in observed:
            if not 0 <= i < n_interfaces:
                raise ConfigError(f"observed interface {i} out of range")
            mask[i] = True
        return cls(n_interfaces, dx, tuple(mask), tuple(sorted(hidden)))

    @property
    def n_cells(self) -> int:
        return self.n_interfaces - 1

    @property
    def n_observed(self) -> int:
        return sum(self.observed)

    @property
    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)

    @property
    def detector_indices(self) -> np.ndarray:
        """Interfaces that carry a detector, whether used for training or withheld."""
        return np.array(sorted(set(self.observed_indices.tolist()) | set(self.hidden)), dtype=int)


def compute_substeps(v_max: float, dT: float, dx: float) -> int:
    """Smallest integer strictly greater than ``2 v_max dT / dx``."""
    if not (v_max > 0 and dT > 0 and dx > 0):
        raise DomainError("v_max, dT and dx must be positive")
    bound = 2.0 * v_max * dT / dx
    return math.floor(bound) + 1


@dataclass(frozen=True)
class TrmConfig:
    """Discretization and physical bounds.

    ``p_t`` defaults to the smallest admissible substep count; an explicit
    value must still satisfy ``p_t > 2 v_max dT / dx``.
    """

    rho_max: float
    dx: float
    dT: float
    v_max: float
    p_t: int | None = field(default=None)

    def __post_init__(self):
        for name in ("rho_max", "dx", "dT", "v_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.p_t is None:
            object.__setattr__(self, "p_t", compute_substeps(self.v_max, self.dT, self.dx))
        p_t = self.p_t
        if int(p_t) != p_t or p_t < 1:
            raise ConfigError("p_t must be a positive integer")
        object.__setattr__(self, "p_t", int(p_t))
        if not self.p_t > 2.0 * self.v_max * self.dT / self.dx:
            raise ConfigError(
                f"p_t={self.p_t} violates p_t > 2 v_max dT / dx = {2.0 * self.v_max * self.dT / self.dx:.6g}"
            )

    @property
    def dt(self) -> float:
        return self.dT / self.p_t

    @property
    def f_max_bound(self) -> float:
        """Upper bound on the maximal flux implied by the speed limit."""
        return self.v_max * self.rho_max / 4.0


@dataclass(frozen=True)
class CflReport:
    passed: bool
    dt_over_dx: float
    bound: float

    def __bool__(self):
        return self.passed


def check_cfl(config: TrmConfig, f_max: float) -> CflReport:
    """Test ``dt/dx < rho_max / (8 f_max)``; reports both sides."""
    if f_max < 0:
        raise DomainError("f_max must be non-negative")
    lhs = config.dt / config.dx
    rhs = math.inf if f_max == 0 else config.rho_max / (8.0 * f_max)
    return CflReport(lhs < rhs, lhs, rhs)


def flux_scale(config: TrmConfig) -> float:
    """Vehicles per second represented by one unit of dimensionless flux."""
    return config.rho_max * config.dx / config.dt


def reaction_rate(f_max, config: TrmConfig):
    """Rate of a constant maximal flux held over one substep: ``4 f_max dt / (rho_max dx)``."""
    return 4.0 * np.asarray(f_max, dtype=np.float64) * config.dt / (config.rho_max * config.dx)


def greenshields_flux(u, f_max):
    """``4 f_max u (1 - u)`` for a normalized density ``u``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise DomainError("normalized density must lie in [0, 1]")
    if np.any(np.asarray(f_max) < 0):
        raise DomainError("f_max must be non-negative")
    return 4.0 * f_max * u * (1.0 - u)


def numerical_flux(u_left, u_right):
    """Inter-cell transfer kernel ``u_left (1 - u_right)``."""
    ul = np.asarray(u_left, dtype=np.float64)
    ur = np.asarray(u_right, dtype=np.float64)
    for v in (ul, ur):
        if np.any((v < 0) | (v > 1)) or np.any(np.isnan(v)):
            raise DomainError("normalized density must lie in [0, 1]")
    return ul * (1.0 - ur)


def _validate(u, c, step=None):
    uv, cv = ad.value_of(u), ad.value_of(c)
    if uv.shape[-1] + 1 != cv.shape[-1]:
        raise DimensionError(f"{uv.shape[-1]} cells need {uv.shape[-1] + 1} rates, got {cv.shape[-1]}")
    if not np.all((uv >= 0.0) & (uv <= 1.0)):
        bad = uv[~((uv >= 0.0) & (uv <= 1.0))]
        raise DomainError(f"density outside [0, 1]: {bad.ravel()[:3]}" + ("" if step is None else f" at step {step}"))
    if not np.all((cv >= 0.0) & (cv < 0.5)):
        bad = cv[~((cv >= 0.0) & (cv < 0.5))]
        raise CflViolation(f"reaction rates must lie in [0, 1/2), got {bad.ravel()[:3]}", step)


def _pad(u):
    ones = np.ones(u.shape[:-1] + (1,), dtype=u.dtype)
    return np.concatenate([ones, u], axis=-1), np.concatenate([u, 0 * ones], axis=-1)


def _flux_forward(u, c):
    left, right = _pad(u)
    return (c * left) * (1.0 - right)


def _flux_vjp(g, out, u, c):
    left, right = _pad(u)
    gc = g * left * (1.0 - right)
    gcu = g * c
    # u_k enters left[k + 1] and right[k]
    gu = gcu[..., 1:] * (1.0 - right[..., 1:]) - gcu[..., :-1] * left[..., :-1]
    return ad._unbroadcast(gu, u.shape), ad._unbroadcast(gc, c.shape)


def _update_forward(u, f):
    return (u + f[..., :-1]) - f[..., 1:]


def _update_vjp(g, out, u, f):
    z = np.zeros(g.shape[:-1] + (1,), dtype=g.dtype)
    gf = np.concatenate([g, z], axis=-1) - np.concatenate([z, g], axis=-1)
    return ad._unbroadcast(g, u.shape), ad._unbroadcast(gf, f.shape)


ad.register("trm_flux", _flux_forward, _flux_vjp)
ad.register("trm_update", _update_forward, _update_vjp)


def trm_fluxes(u, c, check: bool = True):
    """Numerical fluxes at every interface for densities ``u`` and rates ``c``.

    Works on the last axis, so leading batch dimensions are allowed.
    Returns ``c * [1, u] * [1 - u, 1]``: upstream boundary ``c_0 (1 - u_1)``,
    interior ``c_k u_k (1 - u_{k+1})`` and downstream ``c_last u_last``.
    Recorded as a single tape node; :func:`trm_fluxes_composite` spells the
    same computation out in elementary primitives.
    """
    if check:
        _validate(u, c)
    return ad.apply("trm_flux", (u, c))


def trm_fluxes_composite(u, c):
    uv = ad.value_of(u)
    ones = np.ones(uv.shape[:-1] + (1,))
    left = ad.concat([ones, u], axis=-1)
    right = ad.concat([u, np.zeros_like(ones)], axis=-1)
    return ad.mul(ad.mul(c, left), ad.sub(1.0, right))


def trm_step(u, c, check: bool = True, step: int | None = None, fused: bool = True):
    """Advance one substep; returns ``(u_next, fluxes)``.

    ``u_next = u + f[:-1] - f[1:]``, so the change in total mass equals the
    upstream inflow minus the downstream outflow.
    """
    if check:
        _validate(u, c, step)
    if fused:
        f = ad.apply("trm_flux", (u, c))
        return ad.apply("trm_update", (u, f)), f
    f = trm_fluxes_composite(u, c)
    u_next = ad.sub(ad.add(u, ad.take(f, (Ellipsis, slice(None, -1)))), ad.take(f, (Ellipsis, slice(1, None))))
    return u_next, f


def rollout_steps(u0, rate_seq, check: bool = True):
    """Iterate :func:`trm_step`; returns lists of post-step densities and fluxes."""
    densities, fluxes = [], []
    u = u0
    for k, c in enumerate(rate_seq):
        u, f = trm_step(u, c, check=check, step=k)
        densities.append(u)
        fluxes.append(f)
    return densities, fluxes


def trm_rollout(u0, rate_seq, check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Untraced rollout returning stacked arrays.

    Returns:
        ``(densities, fluxes)`` of shapes ``(K, N_s)`` and ``(K, N_i)`` where
        ``K = len(rate_seq)``; row ``k`` holds the state after step ``k`` and
        the fluxes used during it.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    rate_seq = np.asarray(rate_seq, dtype=np.float64)
    n_cells = u0.shape[-1]
    if rate_seq.size == 0:
        return np.zeros((0, n_cells)), np.zeros((0, n_cells + 1))
    if rate_seq.ndim != u0.ndim + 1:
        raise DimensionError("rate_seq must have one more axis than u0")
    densities, fluxes = rollout_steps(u0, rate_seq, check=check)
    return np.stack(densities), np.stack(fluxes)
