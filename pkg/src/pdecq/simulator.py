"""Method-of-lines integration of ``u_t = f(u, u_x, ...)`` with CQ monitoring.

Spatial derivatives use fourth-order finite differences (centered, wrapping
on periodic grids, one-sided near the ends of non-periodic ones).  Time
stepping is classical RK4.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .curves import MixtureCurve
from .symbolic import DiffExpr, evaluate, is_total_derivative, nth_total_derivative, parse, partial, var

__all__ = [
    "Grid1D",
    "SimulationTrace",
    "BreakReport",
    "StabilityError",
    "WindowError",
    "fd_weights",
    "derivative_jet",
    "stable_dt",
    "evolve",
    "monitor_cq",
    "relative_drift",
    "break_time",
    "observed_break_time",
    "decay_exponent",
    "break_report",
    "verify_infinite_cqs",
]

ACCURACY = 4
# RK4 stability region reaches about 2.8 along both the imaginary and the negative real axis
RK4_RADIUS = 2.5


class StabilityError(ValueError):
    """Time step too large for the explicit scheme."""


class WindowError(ValueError):
    """Not enough samples in the requested fitting window."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid.  Periodic grids exclude the right endpoint."""

    x_min: float
    x_max: float
    N: int
    periodic: bool = False

    def __post_init__(self):
        if self.N < 16:
            raise ValueError("grid needs N >= 16 points")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.N, endpoint=not self.periodic)

    @property
    def dx(self) -> float:
        span = self.x_max - self.x_min
        return span / self.N if self.periodic else span / (self.N - 1)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "N": self.N, "periodic": self.periodic}


# -- finite differences -------------------------------------------------------


def fd_weights(offsets: Sequence[float], order: int) -> np.ndarray:
    """Weights of the ``order``-th derivative at 0 from samples at ``offsets``.

    Fornberg's recursion, unit spacing.
    """
    z = np.asarray(offsets, dtype=float)
    n = z.size
    if order >= n:
        raise ValueError("need more points than the derivative order")
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    for i in range(1, n):
        c2 = 1.0
        for j in range(i):
            c3 = z[i] - z[j]
            c2 *= c3
            for k in range(min(i, order), -1, -1):
                prev = c[i - 1, k - 1] if k > 0 else 0.0
                c[i, k] = c1 * (k * prev - z[i - 1] * c[i - 1, k]) / c2
            for k in range(min(i, order), -1, -1):
                prev = c[j, k - 1] if k > 0 else 0.0
                c[j, k] = (z[i] * c[j, k] - k * prev) / c3
        c1 = c2
    return c[:, order]


def _central_offsets(order: int) -> np.ndarray:
    half = (order - 1) // 2 + ACCURACY // 2
    return np.arange(-half, half + 1)


@lru_cache(maxsize=64)
def _operator(N: int, periodic: bool, order: int) -> sp.csr_matrix:
    """Unit-spacing difference matrix for one derivative order."""
    offsets = _central_offsets(order)
    w = fd_weights(offsets, order)
    half = offsets[-1]
    rows, cols, vals = [], [], []
    idx = np.arange(N)
    if periodic:
        for o, wk in zip(offsets, w):
            rows.append(idx)
            cols.append((idx + o) % N)
            vals.append(np.full(N, wk))
    else:
        inner = idx[half : N - half]
        for o, wk in zip(offsets, w):
            rows.append(inner)
            cols.append(inner + o)
            vals.append(np.full(inner.size, wk))
        width = order + ACCURACY
        for i in np.concatenate([idx[:half], idx[N - half :]]):
            start = min(max(i - width // 2, 0), N - width)
            c = np.arange(start, start + width)
            rows.append(np.full(width, i))
            cols.append(c)
            vals.append(fd_weights(c - i, order))
    # coo -> csr sums the entries that wrap onto the same column
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    ).tocsr()


def _spectral_radius(order: int) -> float:
    """max over wavenumbers of the interior stencil's symbol."""
    offsets = _central_offsets(order)
    w = fd_weights(offsets, order)
    theta = np.linspace(0, np.pi, 2049)
    return float(np.abs(np.exp(1j * np.outer(theta, offsets)) @ w).max())


def derivative_jet(u, grid: Grid1D, max_order: int) -> np.ndarray:
    """Columns ``u, u_x, ..., d^max_order u`` on the grid, shape ``(N, max_order + 1)``."""
    u = np.asarray(u, dtype=float)
    jet = np.empty((u.size, max_order + 1))
    jet[:, 0] = u
    for n in range(1, max_order + 1):
        jet[:, n] = (_operator(grid.N, grid.periodic, n) @ u) / grid.dx**n
    return jet


def stable_dt(pde: DiffExpr, u, grid: Grid1D) -> float:
    """Largest RK4 step for the equation linearized about ``u``.

    Each order contributes ``max|df/du_n| * rho_n / dx^n`` with ``rho_n`` the
    spectral radius of the difference stencil.
    """
    order = max(pde.max_order(), 0)
    jet = derivative_jet(u, grid, order)
    rate = 0.0
    for n in range(order + 1):
        d = partial(pde, n)
        if d.is_zero():
            continue
        a = np.abs(np.broadcast_to(evaluate(d, jet), (grid.N,))).max()
        rate += a * _spectral_radius(n) / grid.dx**n if n else a
    return math.inf if rate == 0 else RK4_RADIUS / rate


# -- time integration ---------------------------------------------------------


@dataclass
class SimulationTrace:
    """Snapshots ``fields[k]`` of ``u`` at ``times[k]`` plus named time series."""

    grid: Grid1D
    times: np.ndarray
    fields: np.ndarray
    observables: dict[str, np.ndarray] = field(default_factory=dict)
    pde: str = ""
    blowup_time: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.fields = np.asarray(self.fields, dtype=float)
        if self.fields.ndim != 2 or self.fields.shape[0] != self.times.size:
            raise ValueError("fields must hold one snapshot per time")
        if self.fields.shape[1] != self.grid.N:
            raise ValueError(f"snapshots have {self.fields.shape[1]} points, grid has {self.grid.N}")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def to_csv(self, path) -> Path:
        """Long format ``t, x, u``."""
        path = Path(path)
        x = self.grid.x
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u"])
            for t, u in zip(self.times, self.fields):
                for xi, ui in zip(x, u):
                    w.writerow([repr(float(t)), repr(float(xi)), repr(float(ui))])
        return path

    def observables_dict(self) -> dict:
        return {
            "pde": self.pde,
            "grid": self.grid.to_dict(),
            "blowup_time": self.blowup_time,
            "times": self.times.tolist(),
            "observables": {k: np.asarray(v).tolist() for k, v in self.observables.items()},
            "meta": self.meta,
        }

    def save(self, path_stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and the ``<stem>.json`` sidecar."""
        stem = Path(path_stem)
        csv_path = self.to_csv(stem.with_suffix(".csv"))
        json_path = stem.with_suffix(".json")
        json_path.write_text(json.dumps(self.observables_dict(), indent=2))
        return csv_path, json_path


def _spectral_filter(u: np.ndarray) -> np.ndarray:
    """Zero the top third of Fourier modes."""
    U = np.fft.rfft(u)
    cut = int(np.ceil(2 * U.size / 3))
    U[cut:] = 0
    return np.fft.irfft(U, n=u.size)


def _initial_values(u0, grid: Grid1D) -> np.ndarray:
    if isinstance(u0, MixtureCurve):
        return u0(grid.x)
    if callable(u0):
        return np.asarray(u0(grid.x), dtype=float)
    u = np.asarray(u0, dtype=float)
    if u.shape != (grid.N,):
        raise ValueError(f"initial values need shape ({grid.N},), got {u.shape}")
    return u.copy()


def evolve(
    pde: DiffExpr | str,
    u0,
    grid: Grid1D,
    t_end: float,
    dt: float,
    save_every: float | None = None,
    spectral_filter: bool = False,
    viscosity: float = 0.0,
    adaptive: bool = False,
    check_stability: bool = True,
    blowup_factor: float = 1e6,
) -> SimulationTrace:
    """Integrate ``u_t = pde`` from ``u0`` to ``t_end``.

    Parameters
    ----------
    pde
        Right-hand side as an expression in ``u, u_x, ...``.
    u0
        Grid values, a :class:`MixtureCurve` or a callable of ``x``.
    dt
        Step size; with ``adaptive`` it is an upper bound and each step is
        limited by :func:`stable_dt` at the current state.
    save_every
        Snapshot spacing (default ``dt``).  Snapshots land exactly on
        multiples of it.
    spectral_filter
        Zero the top third of Fourier modes after every step.
    viscosity
        Adds ``viscosity * u_xx`` to the right-hand side.  A small value
        selects the dissipative weak solution past a gradient catastrophe.
    blowup_factor
        Stop when ``max|u|`` exceeds this multiple of its initial value.

    Non-finite values or blow-up truncate the trace at the last good
    snapshot and set ``blowup_time``.
    """
    if isinstance(pde, str):
        pde = parse(pde)
    if viscosity < 0:
        raise ValueError("viscosity must be non-negative")
    label = str(pde)
    if viscosity:
        pde = pde + var(2) * viscosity
    if t_end <= 0 or dt <= 0:
        raise ValueError("t_end and dt must be positive")
    save_every = dt if save_every is None else save_every
    if save_every <= 0:
        raise ValueError("save_every must be positive")
    u = _initial_values(u0, grid)
    order = max(pde.max_order(), 2)
    if check_stability and not adaptive:
        limit = stable_dt(pde, u, grid)
        if dt > limit:
            raise StabilityError(f"dt={dt:g} exceeds the RK4 stability estimate {limit:.3g}; lower dt or pass check_stability=False")

    def rhs(v):
        jet = derivative_jet(v, grid, order)
        return np.broadcast_to(evaluate(pde, jet), v.shape).astype(float)

    scale = max(np.abs(u).max(), 1e-300)
    n_save = int(math.floor(t_end / save_every + 1e-9))
    times = [0.0]
    snaps = [u.copy()]
    t = 0.0
    blowup = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_save + 1):
            target = k * save_every
            while t < target - 1e-12 * save_every:
                h = min(dt, target - t)
                if adaptive:
                    h = min(h, 0.9 * stable_dt(pde, u, grid))
                k1 = rhs(u)
                k2 = rhs(u + 0.5 * h * k1)
                k3 = rhs(u + 0.5 * h * k2)
                k4 = rhs(u + h * k3)
                u = u + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
                if spectral_filter:
                    u = _spectral_filter(u)
                t += h
                if not np.all(np.isfinite(u)) or np.abs(u).max() > blowup_factor * scale:
                    blowup = t
                    break
            if blowup is not None:
                break
            times.append(target)
            snaps.append(u.copy())
    fields = np.array(snaps)
    trace = SimulationTrace(
        grid,
        np.array(times),
        fields,
        pde=label,
        blowup_time=blowup,
        meta={
            "dt": dt,
            "save_every": save_every,
            "spectral_filter": spectral_filter,
            "viscosity": viscosity,
            "adaptive": adaptive,
        },
    )
    _add_extrema(trace)
    return trace


def _add_extrema(trace: SimulationTrace) -> None:
    jets = [derivative_jet(f, trace.grid, 2) for f in trace.fields]
    for n, key in enumerate(("max_abs_u", "max_abs_u_x", "max_abs_u_xx")):
        trace.observables[key] = np.array([np.abs(j[:, n]).max() for j in jets])


# -- monitoring ---------------------------------------------------------------


def monitor_cq(trace: SimulationTrace, h: DiffExpr | str, name: str | None = None) -> np.ndarray:
    """Grid sum of ``h`` on every snapshot; stored under ``name`` in the trace."""
    if isinstance(h, str):
        h = parse(h)
    order = max(h.max_order(), 0)
    vals = np.array(
        [np.sum(np.broadcast_to(evaluate(h, derivative_jet(f, trace.grid, order)), (trace.grid.N,))) for f in trace.fields]
    )
    trace.observables[name or f"H[{h}]"] = vals
    return vals


def relative_drift(series, floor: float = 1e-8, scale: float | None = None) -> np.ndarray:
    """``|H(t) - H(0)| / max(|H(0)|, floor, scale)``.

    ``scale`` is an optional magnitude reference for integrands whose
    integral starts at zero.
    """
    series = np.asarray(series, dtype=float)
    ref = max(abs(series[0]), floor, scale or 0.0)
    return np.abs(series - series[0]) / ref


# -- breaking -----------------------------------------------------------------


def break_time(u0, grid: Grid1D | None = None) -> float | None:
    """First crossing of characteristics for ``u_t = u_x^3``.

    Minimum positive value of ``-1 / (6 u_x u_xx)``; ``None`` when no point
    gives a positive time.  ``u0`` is either a :class:`MixtureCurve`
    (analytic derivatives, needs ``grid``) or grid values.
    """
    if isinstance(u0, MixtureCurve):
        if grid is None:
            raise ValueError("a grid is needed to sample a curve")
        jet = u0.jet(grid.x, 2)
    else:
        if grid is None:
            raise ValueError("a grid is needed for grid values")
        u = _initial_values(u0, grid)
        jet = derivative_jet(u, grid, 2)
        # curvature at round-off level is not curvature
        noise = 1e3 * np.finfo(float).eps * max(np.abs(u).max(), 1e-300) / grid.dx**2
        jet[np.abs(jet[:, 2]) <= noise, 2] = 0.0
    prod = jet[:, 1] * jet[:, 2]
    neg = prod < 0
    if not np.any(neg):
        return None
    return float(np.min(-1.0 / (6.0 * prod[neg])))


def observed_break_time(trace: SimulationTrace, factor: float = 5.0, key: str = "max_abs_u_xx") -> float | None:
    """First time ``max|u_xx|`` exceeds ``factor`` times its initial value.

    For ``u_t = u_x^3`` the slope ``u_x`` obeys a Burgers-type law: it stays
    bounded and develops a jump, so the curvature is what blows up.  A
    blow-up that truncated the trace counts as a break.
    """
    if key not in trace.observables:
        _add_extrema(trace)
    g = np.asarray(trace.observables[key])
    hit = np.flatnonzero(g > factor * g[0])
    if hit.size:
        return float(trace.times[hit[0]])
    return trace.blowup_time


def decay_exponent(trace: SimulationTrace, t_b: float, key: str = "max_abs_u", min_span: float = 10.0) -> tuple[float, tuple[float, float]]:
    """Least-squares slope of ``log(max|u|)`` against ``log t`` on ``[2 t_b, end]``.

    Returns the slope and the fitting window.  Raises :class:`WindowError`
    when the trace ends before ``min_span * t_b`` or the window holds fewer
    than three samples.
    """
    if t_b is None or t_b <= 0:
        raise WindowError("a positive break time is needed")
    t = trace.times
    if t[-1] < min_span * t_b:
        raise WindowError(f"trace ends at t={t[-1]:g}, needs at least {min_span * t_b:g}")
    y = np.asarray(trace.observables[key], dtype=float)
    mask = (t >= 2 * t_b) & (y > 0)
    if mask.sum() < 3:
        raise WindowError("fewer than three samples in the fitting window")
    slope, _ = np.polyfit(np.log(t[mask]), np.log(y[mask]), 1)
    return float(slope), (float(2 * t_b), float(t[-1]))


@dataclass
class BreakReport:
    t_b_analytic: float | None
    t_b_observed: float | None
    decay_exponent: float | None = None
    fit_window: tuple[float, float] | None = None
    blowup_time: float | None = None

    @property
    def breaks(self) -> bool:
        return self.t_b_analytic is not None

    def to_dict(self) -> dict:
        return {
            "t_b_analytic": self.t_b_analytic,
            "t_b_observed": self.t_b_observed,
            "no_break": self.t_b_analytic is None,
            "decay_exponent": self.decay_exponent,
            "fit_window": list(self.fit_window) if self.fit_window else None,
            "blowup_time": self.blowup_time,
        }


def break_report(trace: SimulationTrace, u0=None, fit: bool = False) -> BreakReport:
    """Analytic and observed break times, plus the decay fit when ``fit``."""
    u0 = trace.fields[0] if u0 is None else u0
    tb = break_time(u0, trace.grid)
    report = BreakReport(tb, observed_break_time(trace), blowup_time=trace.blowup_time)
    if fit and tb is not None:
        report.decay_exponent, report.fit_window = decay_exponent(trace, tb)
    return report


# -- the u_x^n family ---------------------------------------------------------


def verify_infinite_cqs(
    n_list: Sequence[int],
    u0=None,
    grid: Grid1D | None = None,
    dt: float | None = None,
    trace: SimulationTrace | None = None,
) -> list[dict]:
    """Check that ``u_x^n`` is conserved by ``u_t = u_x^3``.

    Symbolically the conservation integrand ``n u_x^(n-1) D_x(u_x^3)``
    must equal ``D_x(3n/(n+2) u_x^(n+2))``.  Numerically the grid sum of
    ``u_x^n`` is monitored up to the analytic break time; odd powers, whose
    integral can start at zero, are measured against the grid sum of
    ``|u_x|^n``.
    """
    ns = [int(n) for n in n_list]
    if any(n < 1 for n in ns):
        raise ValueError("only n >= 1 is supported")
    f = var(1) ** 3
    if trace is None:
        grid = grid or Grid1D(-15.0, 15.0, 601)
        u0 = u0 if u0 is not None else MixtureCurve(np.array([1.0]), np.array([0.0]), np.array([1.5]))
        tb = break_time(u0, grid)
        t_end = 0.95 * tb if tb is not None else 1.0
        trace = evolve(f, u0, grid, t_end, dt or t_end / 400, save_every=t_end / 20)
    else:
        tb = break_time(trace.fields[0], trace.grid)
    out = []
    for n in ns:
        h = var(1) ** n
        integrand = partial(h, 1) * nth_total_derivative(f, 1)
        anti = var(1) ** (n + 2) * (3 * n) / (n + 2)
        symbolic_ok = is_total_derivative(integrand, anti)
        series = monitor_cq(trace, h)
        mag = float(np.sum(np.abs(derivative_jet(trace.fields[0], trace.grid, 1)[:, 1]) ** n))
        pre = trace.times <= (tb if tb is not None else trace.times[-1])
        drift = float(relative_drift(series[pre], scale=mag).max())
        out.append({"n": n, "symbolic": bool(symbolic_ok), "antiderivative": str(anti), "max_drift": drift})
    return out
