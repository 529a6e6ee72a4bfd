"""Random Gaussian-mixture test curves with analytic derivative jets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigurationError",
    "EnsembleConfig",
    "MixtureCurve",
    "CurveEnsemble",
    "gaussian_jet",
    "mixture_jet",
    "sample_ensemble",
    "load_ensemble",
]


class ConfigurationError(ValueError):
    """An ensemble configuration that cannot satisfy its invariants."""


@dataclass(frozen=True)
class EnsembleConfig:
    P: int = 200
    N_g: int = 10
    N_p: int = 1000
    x_range: tuple[float, float] = (-15.0, 15.0)
    mu_range: tuple[float, float] = (-3.0, 3.0)
    sigma: float = 1.5
    A_range: tuple[float, float] = (-5.0, 5.0)
    max_order: int = 6
    n_fields: int = 1
    boundary_tol: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        d = dict(d)
        for key in ("x_range", "mu_range", "A_range"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True)
class MixtureCurve:
    amplitudes: np.ndarray
    means: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.widths) <= 0):
            raise ConfigurationError("all mixture widths must be strictly positive")

    def jet(self, x, max_order: int) -> np.ndarray:
        return mixture_jet(self.amplitudes, self.means, self.widths, x, max_order)

    def __call__(self, x) -> np.ndarray:
        return self.jet(x, 0)[..., 0]


def gaussian_jet(A, mu, sigma, x, max_order: int) -> np.ndarray:
    """Derivatives ``0..max_order`` of ``A exp(-(x-mu)^2 / (2 sigma^2))``.

    Uses the Hermite-type recurrence
    ``d[n+1] = -((x-mu)/sigma^2) d[n] - (n/sigma^2) d[n-1]``.
    The derivative order is the last axis of the result.
    """
    if np.any(np.asarray(sigma) <= 0):
        raise ConfigurationError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    s2 = np.asarray(sigma, dtype=float) ** 2
    z = (x - mu) / s2
    d = [A * np.exp(-0.5 * (x - mu) ** 2 / s2)]
    if max_order >= 1:
        d.append(-z * d[0])
    for n in range(1, max_order):
        d.append(-z * d[n] - (n / s2) * d[n - 1])
    return np.stack(np.broadcast_arrays(*d), axis=-1)


def mixture_jet(amplitudes, means, widths, x, max_order: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape + (max_order + 1,))
    for A, mu, s in zip(amplitudes, means, widths):
        out += gaussian_jet(A, mu, s, x, max_order)
    return out


@dataclass
class CurveEnsemble:
    """``P`` curves per field sampled on a shared grid.

    ``jets[f]`` has shape ``(P, N_p, max_order + 1)``.
    """

    config: EnsembleConfig
    seed: int
    grid: np.ndarray
    curves: list[list[MixtureCurve]]
    jets: list[np.ndarray] = field(repr=False)

    @property
    def P(self) -> int:
        return self.jets[0].shape[0]

    @property
    def max_order(self) -> int:
        return self.jets[0].shape[-1] - 1

    @property
    def n_fields(self) -> int:
        return len(self.jets)

    @property
    def dx(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def scaled(self, factor: float) -> "CurveEnsemble":
        """Same curves with every amplitude multiplied by ``factor``."""
        curves = [
            [MixtureCurve(c.amplitudes * factor, c.means, c.widths) for c in fc] for fc in self.curves
        ]
        return CurveEnsemble(self.config, self.seed, self.grid, curves, [j * factor for j in self.jets])

    def endpoint_magnitude(self) -> float:
        return float(max(np.abs(j[:, [0, -1], :]).max() for j in self.jets))

    def save(self, path) -> Path:
        path = Path(path)
        arrays = {f"jets_{i}": j for i, j in enumerate(self.jets)}
        params = np.array(
            [[[c.amplitudes, c.means, c.widths] for c in fc] for fc in self.curves]
        )
        np.savez(
            path,
            seed=np.array(self.seed),
            config=np.array(json.dumps(self.config.to_dict())),
            grid=self.grid,
            params=params,
            **arrays,
        )
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_ensemble(path) -> CurveEnsemble:
    with np.load(path, allow_pickle=False) as data:
        config = EnsembleConfig.from_dict(json.loads(str(data["config"])))
        params = data["params"]
        jets = [data[f"jets_{i}"] for i in range(config.n_fields)]
        curves = [[MixtureCurve(*p) for p in fp] for fp in params]
        return CurveEnsemble(config, int(data["seed"]), data["grid"], curves, jets)


def _curve_rng(seed: int, field_index: int, curve_index: int) -> np.random.Generator:
    # keyed per (field, curve) so draws do not depend on iteration order
    return np.random.default_rng(np.random.SeedSequence([seed, field_index, curve_index]))


def sample_ensemble(config: EnsembleConfig | None = None, seed: int = 0, **overrides) -> CurveEnsemble:
    """Draw the curve ensemble and precompute jets on an evenly spaced grid."""
    config = replace(config or EnsembleConfig(), **overrides)
    if config.P < 1:
        raise ConfigurationError("P must be >= 1")
    if config.N_p < 2:
        raise ConfigurationError("N_p must be >= 2")
    if config.sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    if config.N_g < 1:
        raise ConfigurationError("N_g must be >= 1")

    grid = np.linspace(config.x_range[0], config.x_range[1], config.N_p)
    curves: list[list[MixtureCurve]] = []
    jets: list[np.ndarray] = []
    for f in range(config.n_fields):
        fc = []
        arr = np.empty((config.P, config.N_p, config.max_order + 1))
        for p in range(config.P):
            rng = _curve_rng(seed, f, p)
            A = rng.uniform(*config.A_range, size=config.N_g)
            mu = rng.uniform(*config.mu_range, size=config.N_g)
            c = MixtureCurve(A, mu, np.full(config.N_g, float(config.sigma)))
            fc.append(c)
            arr[p] = c.jet(grid, config.max_order)
        curves.append(fc)
        jets.append(arr)

    ens = CurveEnsemble(config, int(seed), grid, curves, jets)
    worst = ens.endpoint_magnitude()
    if worst >= config.boundary_tol:
        raise ConfigurationError(
            f"endpoint jet magnitude {worst:.3g} exceeds boundary_tol={config.boundary_tol:g}; "
            f"sigma={config.sigma} is too large for x_range={config.x_range} "
            f"(or widen x_range / shrink mu_range)"
        )
    return ens
