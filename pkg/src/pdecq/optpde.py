"""Optimize PDE coefficients to maximize a smoothed count of conserved quantities.

``G`` is linear in the PDE coefficients, ``G(c) = G_0 + sum_j c_j G_j``, so the
per-term matrices are assembled once and every loss evaluation costs one SVD.
Singular-value gradients use ``d sigma_i / d c_j = u_i^T G_j v_i``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .cqfinder import assemble_g
from .curves import CurveEnsemble
from .symbolic import DiffExpr

log = logging.getLogger(__name__)

__all__ = [
    "SIGMA_FLOOR",
    "LossConfig",
    "Diagnostics",
    "LinearFamily",
    "smoothed_ncq",
    "smoothed_ncq_grad",
    "spherical_to_cartesian",
    "cartesian_to_spherical",
    "spherical_jacobian",
    "random_angles",
    "initial_angles",
    "vanishing_count",
    "angular_distance",
    "cosine_lr",
    "effective_singular_values",
    "loss_value",
    "loss_and_gradient",
    "optimize",
    "RestartResult",
    "SearchResult",
    "run_search",
    "load_search",
]

SIGMA_FLOOR = 1e-300
OPTIMIZERS = ("sgd", "adam", "normalized")


# -- smoothed count -----------------------------------------------------------


def _sigmoid_args(sigma, A, B):
    s = np.maximum(np.asarray(sigma, dtype=float), SIGMA_FLOOR)
    return (np.log(s) - A) / B, s


def smoothed_ncq(sigma, A: float = 0.0, B: float = 1.0) -> float:
    """``sum_i 1 / (1 + exp((log sigma_i - A) / B))``."""
    if B <= 0:
        raise ValueError("B must be positive")
    z, _ = _sigmoid_args(sigma, A, B)
    return float(np.sum(expit(-z)))


def smoothed_ncq_grad(sigma, A: float = 0.0, B: float = 1.0) -> np.ndarray:
    """Elementwise derivative of :func:`smoothed_ncq` with respect to ``sigma``."""
    z, s = _sigmoid_args(sigma, A, B)
    n = expit(-z)
    return -n * (1.0 - n) / (B * s)


# -- spherical coordinates ----------------------------------------------------


def spherical_to_cartesian(phi) -> np.ndarray:
    """Unit vector from ``n - 1`` hyperspherical angles.

    ``c_1 = cos phi_1``, ``c_k = sin phi_1 ... sin phi_{k-1} cos phi_k`` and
    ``c_n = sin phi_1 ... sin phi_{n-1}``.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.size == 0:
        return np.ones(1)
    s = np.sin(phi)
    co = np.cos(phi)
    prefix = np.concatenate([[1.0], np.cumprod(s)])
    return prefix * np.concatenate([co, [1.0]])


def cartesian_to_spherical(c) -> tuple[float, np.ndarray]:
    """``(r, phi)`` via ``phi_k = atan2(||c_{k+1:}||, c_k)`` and ``atan2`` for the last."""
    c = np.asarray(c, dtype=float)
    r = float(np.linalg.norm(c))
    if r == 0:
        raise ValueError("cannot convert the zero vector to spherical coordinates")
    n = c.size
    if n == 1:
        return r, np.zeros(0)
    tail = np.sqrt(np.cumsum((c[::-1] ** 2))[::-1])  # tail[k] = ||c[k:]||
    phi = np.arctan2(tail[1 : n - 1], c[: n - 2])
    last = math.atan2(c[n - 1], c[n - 2])
    if last < 0:
        last += 2 * math.pi
    return r, np.concatenate([phi, [last]])


def spherical_jacobian(phi) -> np.ndarray:
    """``d c / d phi`` as an ``n x (n-1)`` matrix."""
    phi = np.asarray(phi, dtype=float)
    m = phi.size
    if m == 0:
        return np.zeros((1, 0))
    s = np.sin(phi)
    co = np.cos(phi)
    tail = np.concatenate([co, [1.0]])
    # row j: the sin factors with the j-th replaced by its derivative cos
    swapped = np.tile(s, (m, 1))
    swapped[np.arange(m), np.arange(m)] = co
    prefix = np.concatenate([np.ones((m, 1)), np.cumprod(swapped, axis=1)], axis=1)  # m x (m+1)
    J = (prefix * tail).T  # J[k, j] valid for k > j
    k_idx = np.arange(m + 1)[:, None]
    j_idx = np.arange(m)[None, :]
    J = np.where(k_idx > j_idx, J, 0.0)
    plain = np.concatenate([[1.0], np.cumprod(s)])
    J[np.arange(m), np.arange(m)] = -plain[:m] * s
    return J


def random_angles(n: int, rng: np.random.Generator) -> np.ndarray:
    """Angles uniform in their ranges (not uniform on the sphere)."""
    if n <= 1:
        return np.zeros(0)
    phi = rng.uniform(0.0, math.pi, size=n - 1)
    phi[-1] = rng.uniform(0.0, 2 * math.pi)
    return phi


def angular_distance(a, b, antipodal: bool = True) -> float:
    """Angle between directions ``a`` and ``b`` (``+-b`` when ``antipodal``)."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    d = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if antipodal:
        d = abs(d)
    return math.acos(d)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    A: float = 0.0
    B: float = 1000.0
    epochs: int = 25000
    learning_rate: float = 1e-3
    T_max: int = 5000
    eta_min: float = 0.0
    optimizer: str = "sgd"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # singular values below this fraction of sigma_max are round-off
    noise_floor: float = 1e-13

    def __post_init__(self):
        if self.B <= 0:
            raise ValueError("B must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.T_max < 1:
            raise ValueError("T_max must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def cosine_lr(t: int, config: LossConfig) -> float:
    """Cosine annealing restarted every ``T_max`` steps."""
    frac = (t % config.T_max) / config.T_max
    return config.eta_min + 0.5 * (config.learning_rate - config.eta_min) * (1 + math.cos(math.pi * frac))


# -- the parametrized family --------------------------------------------------


@dataclass
class Diagnostics:
    degenerate_clusters: int = 0
    floored: int = 0


@dataclass
class LinearFamily:
    """``G(c) = offset + sum_j c_j mats[j]`` with ``c`` from the parameters.

    ``parametrization="sphere"`` maps ``n - 1`` angles to a unit ``c``;
    ``"free"`` uses the parameters as ``c`` directly (for example one
    viscosity coefficient added to a fixed equation).
    """

    mats: np.ndarray  # n x P x K
    offset: np.ndarray | None = None
    parametrization: str = "sphere"
    terms: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.mats = np.asarray(self.mats, dtype=float)
        if self.parametrization not in ("sphere", "free"):
            raise ValueError("parametrization must be 'sphere' or 'free'")

    @classmethod
    def from_bases(
        cls,
        pde_basis: Sequence[DiffExpr],
        cq_basis: Sequence[DiffExpr],
        ensemble: CurveEnsemble,
        fixed: DiffExpr | None = None,
        parametrization: str = "sphere",
    ) -> "LinearFamily":
        mats = np.stack([assemble_g(f, cq_basis, ensemble) for f in pde_basis])
        offset = assemble_g(fixed, cq_basis, ensemble) if fixed is not None else None
        return cls(mats, offset, parametrization, [str(f) for f in pde_basis])

    @property
    def n_terms(self) -> int:
        return self.mats.shape[0]

    @property
    def n_params(self) -> int:
        return self.n_terms - 1 if self.parametrization == "sphere" else self.n_terms

    @property
    def K(self) -> int:
        return self.mats.shape[2]

    def coefficients(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        if self.parametrization == "sphere":
            return spherical_to_cartesian(params)
        return params

    def jacobian(self, params) -> np.ndarray:
        if self.parametrization == "sphere":
            return spherical_jacobian(params)
        return np.eye(self.n_terms)

    def reference_norm(self, c) -> float:
        """``sum_j |c_j| ||G_j||``, the size ``G(c)`` would have without cancellation."""
        norms = np.linalg.norm(self.mats, axis=(1, 2))
        ref = float(np.abs(np.asarray(c, dtype=float)) @ norms)
        if self.offset is not None:
            ref += float(np.linalg.norm(self.offset))
        return ref

    def matrix(self, c) -> np.ndarray:
        G = np.tensordot(np.asarray(c, dtype=float), self.mats, axes=1)
        if self.offset is not None:
            G = G + self.offset
        return G


def _singular_triplets(G: np.ndarray):
    """Thin SVD padded to ``K`` singular values (zeros when ``P < K``)."""
    P, K = G.shape
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    if s.size < K:
        _, _, Vt_full = np.linalg.svd(G, full_matrices=True)
        s = np.concatenate([s, np.zeros(K - s.size)])
        U = np.concatenate([U, np.zeros((P, K - U.shape[1]))], axis=1)
        Vt = Vt_full
    return U, s, Vt.T


def effective_singular_values(s: np.ndarray, noise_floor: float) -> np.ndarray:
    """Clamp round-off-level singular values to ``noise_floor * sigma_max``.

    Structurally zero singular values (for example trivial CQs, present for
    every PDE) otherwise sit at random round-off magnitudes that ``log``
    amplifies into noise in both the loss and its gradient.
    """
    return np.maximum(s, noise_floor * s.max()) if s.size else s


def vanishing_count(s, reference_norm: float, epsilon: float = 1e-4) -> int:
    """Number of normalized singular values below ``epsilon``.

    When ``||G||`` is itself below ``epsilon * reference_norm`` the matrix is
    numerically zero and every basis element counts as conserved.
    """
    s = np.asarray(s, dtype=float)
    norm = float(np.linalg.norm(s))
    if norm == 0 or norm < epsilon * reference_norm:
        return int(s.size)
    return int(np.sum(s / norm < epsilon))


def loss_value(params, family: LinearFamily, config: LossConfig) -> float:
    c = family.coefficients(np.asarray(params, dtype=float))
    s = np.linalg.svd(family.matrix(c), compute_uv=False)
    s = np.concatenate([s, np.zeros(family.K - s.size)])
    return -smoothed_ncq(effective_singular_values(s, config.noise_floor), config.A, config.B)


def loss_and_gradient(params, family: LinearFamily, config: LossConfig, diagnostics: Diagnostics | None = None):
    """Loss ``-smoothed_ncq(sigma(G(c)))`` and its gradient in the parameters.

    Singular values within ``1e-10 * sigma_max`` of each other share the
    averaged derivative of their cluster; values clamped to the noise floor
    follow ``sigma_max``.
    """
    params = np.asarray(params, dtype=float)
    c = family.coefficients(params)
    G = family.matrix(c)
    U, s, V = _singular_triplets(G)
    s_eff = effective_singular_values(s, config.noise_floor)
    loss = -smoothed_ncq(s_eff, config.A, config.B)
    if params.size == 0:
        return loss, np.zeros(0)
    n = family.n_terms
    # d sigma_i / d c_j = u_i^T G_j v_i
    GV = (family.mats.reshape(-1, family.K) @ V).reshape(n, -1, family.K)
    dsig = np.einsum("jpi,pi->ji", GV, U)  # n x K
    tol = 1e-10 * max(s.max(), SIGMA_FLOOR)
    i = 0
    clusters = 0
    while i < s.size:
        j = i + 1
        while j < s.size and abs(s[j - 1] - s[j]) <= tol:
            j += 1
        if j - i > 1:
            dsig[:, i:j] = dsig[:, i:j].mean(axis=1, keepdims=True)
            clusters += 1
        i = j
    clamped = s < s_eff
    if np.any(clamped):
        top = int(np.argmax(s))
        dsig[:, clamped] = config.noise_floor * dsig[:, [top]]
    if diagnostics is not None:
        diagnostics.degenerate_clusters += clusters
        diagnostics.floored += int(np.sum(clamped))
    dL_ds = -smoothed_ncq_grad(s_eff, config.A, config.B)
    dL_dc = dsig @ dL_ds
    grad = family.jacobian(params).T @ dL_dc
    return loss, grad


# -- single restart -----------------------------------------------------------


@dataclass
class RestartResult:
    index: int
    initial_params: np.ndarray
    final_params: np.ndarray
    final_coefficients: np.ndarray
    losses: np.ndarray
    final_loss: float
    final_ncq: float
    final_count: int
    failed: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "initial_params": [float(v) for v in self.initial_params],
            "final_params": [float(v) for v in self.final_params],
            "final_coefficients": [float(v) for v in self.final_coefficients],
            "losses": [float(v) for v in self.losses],
            "final_loss": float(self.final_loss),
            "final_ncq": float(self.final_ncq),
            "final_count": int(self.final_count),
            "failed": bool(self.failed),
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RestartResult":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            int(d["index"]),
            arr("initial_params"),
            arr("final_params"),
            arr("final_coefficients"),
            arr("losses"),
            float(d["final_loss"]),
            float(d["final_ncq"]),
            int(d["final_count"]),
            bool(d.get("failed", False)),
            d.get("message", ""),
        )


def optimize(
    init_params,
    family: LinearFamily,
    config: LossConfig,
    index: int = 0,
    epsilon: float = 1e-4,
    record_params: bool = False,
):
    """Gradient descent on the parameters with cosine-annealed learning rate.

    Returns a :class:`RestartResult` whose ``losses`` has ``epochs + 1``
    entries (before every step and after the last).  A non-finite loss
    stops the restart and marks it failed.  With ``record_params`` the
    parameter trajectory is returned as a second value.
    """
    params = np.array(init_params, dtype=float)
    init = params.copy()
    losses = np.empty(config.epochs + 1)
    history = [params.copy()] if record_params else None
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    b1, b2 = config.betas
    failed, message = False, ""
    for t in range(config.epochs):
        loss, grad = loss_and_gradient(params, family, config)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            failed, message = True, f"non-finite loss at epoch {t}"
            losses = losses[: t + 1]
            losses[t] = loss
            break
        losses[t] = loss
        lr = cosine_lr(t, config)
        if config.optimizer == "sgd":
            step = grad
        elif config.optimizer == "normalized":
            norm = np.linalg.norm(grad)
            step = grad / norm if norm > 0 else grad
        else:
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad**2
            mhat = m / (1 - b1 ** (t + 1))
            vhat = v / (1 - b2 ** (t + 1))
            step = mhat / (np.sqrt(vhat) + config.adam_eps)
        params = params - lr * step
        if record_params:
            history.append(params.copy())
    else:
        losses[-1], _ = loss_and_gradient(params, family, config)
    c = family.coefficients(params)
    s = np.linalg.svd(family.matrix(c), compute_uv=False)
    s = np.concatenate([s, np.zeros(family.K - s.size)])
    count = vanishing_count(s, family.reference_norm(c), epsilon)
    result = RestartResult(
        index,
        init,
        params,
        c,
        losses,
        float(losses[-1]),
        smoothed_ncq(effective_singular_values(s, config.noise_floor), config.A, config.B),
        count,
        failed,
        message,
    )
    if record_params:
        return result, np.array(history)
    return result


# -- multi-restart search -----------------------------------------------------


@dataclass
class SearchResult:
    restarts: list[RestartResult]
    metadata: dict

    def successful(self) -> list[RestartResult]:
        return [r for r in self.restarts if not r.failed]

    def coefficient_matrix(self) -> np.ndarray:
        ok = self.successful()
        return np.array([r.final_coefficients for r in ok]) if ok else np.zeros((0, 0))


def restart_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _restart_file(out_dir: Path, index: int) -> Path:
    return out_dir / f"restart_{index:05d}.json"


INITS = ("angles", "sphere")


def initial_angles(n: int, rng: np.random.Generator, init: str = "angles") -> np.ndarray:
    """Starting angles: uniform in angle space, or uniform on the sphere.

    Uniform angles put most of the weight on the first few coordinates,
    so the result depends on basis order; ``"sphere"`` does not.
    """
    if init == "angles":
        return random_angles(n, rng)
    if init == "sphere":
        g = rng.standard_normal(n)
        while not np.any(g):
            g = rng.standard_normal(n)
        return cartesian_to_spherical(g)[1]
    raise ValueError(f"init must be one of {INITS}")


def _run_one(args):
    family, config, seed, index, epsilon, init_kind = args
    init = initial_angles(family.n_terms, restart_rng(seed, index), init_kind)
    try:
        return optimize(init, family, config, index=index, epsilon=epsilon)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        c = family.coefficients(init)
        return RestartResult(index, init, init, c, np.zeros(0), float("nan"), float("nan"), 0, True, str(exc))


def run_search(
    n_restarts: int,
    family: LinearFamily,
    config: LossConfig,
    seed: int,
    out_dir=None,
    workers: int = 1,
    epsilon: float = 1e-4,
    metadata: dict | None = None,
    init: str = "angles",
) -> SearchResult:
    """Independent restarts from random starting points (see :func:`initial_angles`).

    Restart ``i`` draws its initial point from ``SeedSequence([seed, i])``,
    so results do not depend on scheduling.  With ``out_dir`` every finished
    restart is written atomically as ``restart_XXXXX.json`` and existing
    files are reused, which makes an interrupted search resumable.
    """
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    if family.parametrization != "sphere":
        raise ValueError("run_search needs a spherical family")
    if init not in INITS:
        raise ValueError(f"init must be one of {INITS}")
    meta = {
        "seed": int(seed),
        "n_restarts": int(n_restarts),
        "init": init,
        "epsilon": float(epsilon),
        "config": config.to_dict(),
        "terms": list(family.terms),
        **(metadata or {}),
    }
    results: dict[int, RestartResult] = {}
    todo = list(range(n_restarts))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        meta_text = json.dumps(meta, indent=2, sort_keys=True)
        meta_file = out_dir / "search.json"
        if meta_file.exists() and json.loads(meta_file.read_text()) != json.loads(meta_text):
            raise ValueError(f"{out_dir} holds a search with a different configuration")
        _atomic_write(meta_file, meta_text)
        for i in list(todo):
            f = _restart_file(out_dir, i)
            if f.exists():
                results[i] = RestartResult.from_dict(json.loads(f.read_text()))
                todo.remove(i)
        if len(todo) < n_restarts:
            log.info("resuming: %d of %d restarts already complete", n_restarts - len(todo), n_restarts)

    def store(res: RestartResult):
        results[res.index] = res
        if res.failed:
            log.warning("restart %d failed: %s", res.index, res.message)
        if out_dir is not None:
            _atomic_write(_restart_file(out_dir, res.index), json.dumps(res.to_dict(), sort_keys=True))

    jobs = [(family, config, seed, i, epsilon, init) for i in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(_run_one, jobs):
                store(res)
    else:
        for job in jobs:
            store(_run_one(job))
    return SearchResult([results[i] for i in range(n_restarts)], meta)


def load_search(directory) -> SearchResult:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"search directory {directory} does not exist")
    meta_file = directory / "search.json"
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    restarts = [
        RestartResult.from_dict(json.loads(f.read_text()))
        for f in sorted(directory.glob("restart_*.json"))
    ]
    return SearchResult(restarts, meta)
