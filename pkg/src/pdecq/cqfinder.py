"""Conserved-quantity discovery for polynomial PDEs and PDE systems.

For ``u_t = f(u')`` and a candidate density ``h = sum_i theta_i b_i``, the
time derivative of ``H = int h dx`` is linear in ``theta``.  Sampling that
condition on a curve ensemble gives a ``P x K`` matrix ``G`` whose
(numerical) null space holds the conserved densities.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm, expm_frechet
from scipy.optimize import minimize

from .curves import CurveEnsemble
from .symbolic import (
    DEFAULT_FIELDS,
    DiffExpr,
    DimensionError,
    evaluate,
    nth_total_derivative,
    partial,
)

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_EPSILON",
    "NumericError",
    "SparsifyWarning",
    "PdeSystem",
    "SpectrumResult",
    "TrivialResult",
    "CqSolution",
    "CqReport",
    "as_system",
    "conservation_integrand",
    "assemble_g",
    "integral_matrix",
    "null_space",
    "sparsify",
    "detect_trivial",
    "reduce_trivial",
    "find_cqs",
    "display_expression",
]

DEFAULT_EPSILON = 1e-4


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class SparsifyWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PdeSystem:
    """Right-hand sides ``f^1..f^n`` of ``u^k_t = f^k``, one per field."""

    rhs: tuple[DiffExpr, ...]
    fields: tuple[str, ...] = DEFAULT_FIELDS

    def __post_init__(self):
        if not self.rhs:
            raise ValueError("a PDE system needs at least one equation")

    @property
    def n_fields(self) -> int:
        return len(self.rhs)

    def max_order(self) -> int:
        return max(f.max_order() for f in self.rhs)

    def to_string(self) -> str:
        names = self.fields
        return "; ".join(
            f"{names[k]}_t = {f.to_string(names)}" for k, f in enumerate(self.rhs)
        )


def as_system(pde) -> PdeSystem:
    if isinstance(pde, PdeSystem):
        return pde
    if isinstance(pde, DiffExpr):
        return PdeSystem((pde,))
    return PdeSystem(tuple(pde))


def conservation_integrand(pde, b: DiffExpr) -> DiffExpr:
    """``g = sum_k sum_n  d b / d u^k_{nx} * D_x^n f^k``."""
    system = as_system(pde)
    g = DiffExpr()
    for k, f in enumerate(system.rhs):
        top = b.max_order(k)
        dnf = f
        for n in range(top + 1):
            if n:
                dnf = nth_total_derivative(dnf, 1)
            db = partial(b, n, field=k)
            if not db.is_zero():
                g = g + db * dnf
    return g


def _ensemble_jets(ensemble: CurveEnsemble, n_fields: int):
    if ensemble.n_fields < n_fields:
        raise DimensionError(
            f"system has {n_fields} fields but the ensemble only {ensemble.n_fields}"
        )
    return {k: ensemble.jets[k] for k in range(n_fields)}


def _grid_sums(
    exprs: Sequence[DiffExpr], ensemble: CurveEnsemble, n_fields: int, with_magnitude: bool = False
):
    jets = _ensemble_jets(ensemble, n_fields)
    out = np.empty((ensemble.P, len(exprs)))
    mag = np.empty_like(out)
    for i, e in enumerate(exprs):
        vals = np.broadcast_to(evaluate(e, jets), (ensemble.P, ensemble.grid.size))
        out[:, i] = np.sum(vals, axis=1)
        if with_magnitude:
            mag[:, i] = np.sum(np.abs(vals), axis=1)
    return (out, mag) if with_magnitude else out


def _n_fields(system: PdeSystem | None, cq_basis: Sequence[DiffExpr]) -> int:
    n = 1 + max((max(b.fields(), default=0) for b in cq_basis), default=0)
    return max(n, system.n_fields) if system is not None else n


def assemble_g(
    pde, cq_basis: Sequence[DiffExpr], ensemble: CurveEnsemble, with_magnitude: bool = False
):
    """``G[p, i]`` = grid sum of the conservation integrand of ``b_i`` on curve ``p``.

    The constant ``dx`` is dropped; it rescales ``G`` without changing its
    null space.  With ``with_magnitude`` the grid sums of ``|g_i|`` are
    returned as well; they measure how much cancellation produced each entry.
    """
    system = as_system(pde)
    need = max(b.max_order() for b in cq_basis) + max(system.max_order(), 0)
    if ensemble.max_order < need:
        raise DimensionError(
            f"ensemble carries derivatives up to order {ensemble.max_order}, "
            f"need {need} (CQ basis order + PDE order)"
        )
    integrands = [conservation_integrand(system, b) for b in cq_basis]
    return _grid_sums(integrands, ensemble, _n_fields(system, cq_basis), with_magnitude)


def integral_matrix(cq_basis: Sequence[DiffExpr], ensemble: CurveEnsemble, with_magnitude: bool = False):
    """``S[p, i]`` = grid sum of ``b_i`` on curve ``p`` (used for trivial detection)."""
    return _grid_sums(list(cq_basis), ensemble, _n_fields(None, cq_basis), with_magnitude)


def column_scales(magnitude: np.ndarray) -> np.ndarray:
    """Per-column equilibration factors; all-zero columns keep scale 1."""
    d = np.linalg.norm(magnitude, axis=0)
    d[d == 0] = 1.0
    return d


# -- spectrum -----------------------------------------------------------------


@dataclass
class SpectrumResult:
    singular_values: np.ndarray  # ascending, length K
    normalized: np.ndarray  # sum of squares == 1
    solutions: np.ndarray  # K x M, orthonormal columns
    epsilon: float
    left_vectors: np.ndarray | None = field(default=None, repr=False)
    right_vectors: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return self.solutions.shape[1]

    @property
    def n_uncertain(self) -> int:
        """Count of normalized values inside the band ``[epsilon/10, epsilon]``."""
        s = self.normalized
        return int(np.sum((s >= self.epsilon / 10) & (s <= self.epsilon)))

    @property
    def gap_ratio(self) -> float:
        """Smallest non-vanishing over largest vanishing normalized value."""
        M = self.M
        s = self.normalized
        if M == 0 or M == s.size:
            return float("inf")
        return float(s[M] / max(s[M - 1], np.finfo(float).tiny))


def null_space(
    G: np.ndarray, epsilon: float = DEFAULT_EPSILON, reference_norm: float | None = None
) -> SpectrumResult:
    """SVD of ``G``; columns of ``V`` whose normalized singular value is below
    ``epsilon`` form the solutions.

    Singular values are normalized so that their squares sum to one.  If
    ``reference_norm`` is given and ``||G||_F < epsilon * reference_norm``,
    ``G`` is treated as exactly zero (every direction is a solution); this
    keeps the normalization from inflating pure round-off.
    """
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise NumericError("conservation matrix contains non-finite entries")
    P, K = G.shape
    U, s, Vt = np.linalg.svd(G, full_matrices=True)
    sig = np.zeros(K)
    sig[: s.size] = s
    order = np.arange(K)[::-1]
    sig = sig[order]
    V = Vt.T[:, order]
    # left singular vectors for the nonzero part, aligned with ascending order
    Ufull = np.zeros((P, K))
    r = min(P, K)
    Ufull[:, :r] = U[:, :r]
    Ufull = Ufull[:, order]
    norm = np.sqrt(np.sum(sig**2))
    normalized = sig / norm if norm > 0 else np.zeros(K)
    if norm == 0 or (reference_norm is not None and norm < epsilon * reference_norm):
        normalized = np.zeros(K)
        M = K
    else:
        M = int(np.sum(normalized < epsilon))
    return SpectrumResult(sig, normalized, V[:, :M].copy(), epsilon, Ufull, V)


# -- sparsification -----------------------------------------------------------


def _skew(params: np.ndarray, m: int) -> np.ndarray:
    S = np.zeros((m, m))
    iu = np.triu_indices(m, 1)
    S[iu] = params
    return S - S.T


def _canonical_columns(Theta: np.ndarray) -> np.ndarray:
    out = Theta.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        k = int(np.argmax(np.abs(col) > 0.5 * np.abs(col).max())) if np.any(col) else 0
        if col[k] < 0:
            out[:, j] = -col
    keys = [tuple(np.round(-np.abs(out[:, j]), 6)) for j in range(out.shape[1])]
    first = [int(np.argmax(np.abs(out[:, j]) > 1e-8)) for j in range(out.shape[1])]
    idx = sorted(range(out.shape[1]), key=lambda j: (first[j], keys[j]))
    return out[:, idx]


def sparsify(Theta: np.ndarray, n_starts: int = 8, seed: int = 0, maxiter: int = 500) -> np.ndarray:
    """Rotate ``Theta`` by an orthogonal ``R`` that minimizes ``||Theta R||_1``.

    ``R = expm(S)`` with ``S`` skew-symmetric, optimized with L-BFGS on a
    smoothed absolute value whose smoothing is tightened in stages.  The
    identity is always one of the starts, so the result is never worse than
    the input.
    """
    Theta = np.asarray(Theta, dtype=float)
    K, M = Theta.shape
    if M == 0:
        return Theta.copy()
    if M == 1:
        return _canonical_columns(Theta)
    n_par = M * (M - 1) // 2
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(M, 1)

    def objective(params, R0, delta):
        S = _skew(params, M)
        E = expm(S)
        X = Theta @ R0 @ E
        val = np.sum(np.sqrt(X**2 + delta**2))
        dX = X / np.sqrt(X**2 + delta**2)
        dE = (Theta @ R0).T @ dX
        # adjoint of the exponential's Frechet derivative
        L = expm_frechet(S.T, dE, compute_expm=False)
        gS = L - L.T
        return val, gS[iu]

    best_R, best_val = np.eye(M), np.abs(Theta).sum()
    converged_any = False
    for start in range(n_starts):
        if start == 0:
            R = np.eye(M)
        else:
            Q, Rq = np.linalg.qr(rng.standard_normal((M, M)))
            R = Q * np.sign(np.diag(Rq))
        for delta in (1e-2, 1e-4, 1e-7):
            res = minimize(
                objective,
                np.zeros(n_par),
                args=(R, delta),
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": maxiter},
            )
            R = R @ expm(_skew(res.x, M))
            converged_any |= bool(res.success)
        # re-orthonormalize against drift
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        val = np.abs(Theta @ R).sum()
        if val < best_val - 1e-12:
            best_val, best_R = val, R
    if not converged_any:
        warnings.warn("sparsification did not converge; returning best iterate", SparsifyWarning)
    out = Theta @ best_R
    out[np.abs(out) < 1e-12] = 0.0
    return _canonical_columns(out)


# -- trivial detection --------------------------------------------------------


@dataclass
class TrivialResult:
    flags: np.ndarray  # per input column
    M_T: int
    trivial_basis: np.ndarray  # K x M_T, columns span the trivial subspace
    singular_values: np.ndarray  # of the equilibrated T, ascending, scaled by sqrt(K)


def detect_trivial(
    Theta: np.ndarray,
    cq_basis: Sequence[DiffExpr],
    ensemble: CurveEnsemble,
    epsilon: float = DEFAULT_EPSILON,
    S: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrivialResult:
    """Find combinations of the solutions whose grid integral vanishes on every curve.

    ``T = S @ Theta`` with ``S[p, i]`` the grid sum of ``b_i``.  Columns of
    ``S`` are equilibrated by the grid sums of ``|b_i|`` and singular values
    of ``T`` are measured against ``sqrt(K)``, the Frobenius norm of the
    equilibrated magnitude matrix, so a fully trivial solution set is still
    recognized.  ``S`` may be passed as the ``(S, |S|)`` pair from
    :func:`integral_matrix`.
    """
    Theta = np.asarray(Theta, dtype=float)
    K, M = Theta.shape
    if S is None:
        S = integral_matrix(cq_basis, ensemble, with_magnitude=True)
    S, S_mag = S
    if M == 0:
        return TrivialResult(np.zeros(0, bool), 0, np.zeros((K, 0)), np.zeros(0))
    d = column_scales(S_mag)
    Ss = S / d
    # same subspace expressed in equilibrated coordinates
    Qs = _orthonormal(Theta * d[:, None])
    T = Ss @ Qs
    _, s, Vt = np.linalg.svd(T, full_matrices=True)
    m = Qs.shape[1]
    sig = np.zeros(m)
    sig[: s.size] = s[:m]
    order = np.arange(m)[::-1]
    sig = sig[order] / np.sqrt(K)
    V = Vt.T[:, order]
    M_T = int(np.sum(sig < epsilon))
    W = (Qs @ V[:, :M_T]) / d[:, None]
    W = _orthonormal(W)
    thetas = Theta / np.linalg.norm(Theta * d[:, None], axis=0)
    col_res = np.linalg.norm(Ss @ (thetas * d[:, None]), axis=0) / np.sqrt(K)
    return TrivialResult(col_res < epsilon, M_T, W, sig)


def _pivot_priority(term: DiffExpr):
    (m,) = term.terms
    top = m.max_order()
    top_exp = max((e for (_, o), e in m.powers if o == top), default=0)
    # a total derivative's top-order term is linear in its highest derivative
    return (top_exp != 1, -top, -m.degree())


def reduce_trivial(vectors: np.ndarray, trivial: np.ndarray, cq_basis: Sequence[DiffExpr]):
    """Remove trivial parts by zeroing one pivot coordinate per trivial direction.

    Pivots are basis terms linear in their highest derivative, preferring
    higher orders (for example ``u u_xx`` is eliminated in favour of
    ``u_x^2``).  Returns ``(reduced, pivots)``.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float).T).T
    if trivial.shape[1] == 0 or vectors.size == 0:
        return vectors.copy(), []
    ranked = sorted(range(len(cq_basis)), key=lambda i: (_pivot_priority(cq_basis[i]), i))
    pivots: list[int] = []
    tol = 1e-8 * max(1.0, np.abs(trivial).max())
    for i in ranked:
        cand = pivots + [i]
        if np.linalg.matrix_rank(trivial[cand, :], tol=tol) == len(cand):
            pivots = cand
        if len(pivots) == trivial.shape[1]:
            break
    A = trivial[pivots, :]
    coeffs = np.linalg.lstsq(A, vectors[pivots, :], rcond=None)[0]
    reduced = vectors - trivial @ coeffs
    reduced[pivots, :] = 0.0
    return reduced, pivots


# -- reports ------------------------------------------------------------------


def display_expression(coeffs, cq_basis: Sequence[DiffExpr], fields=DEFAULT_FIELDS, normalize=True) -> str:
    """Human-facing form: scaled to unit max, ``|c| < 0.05`` shown as 0, 2 decimals."""
    c = np.asarray(coeffs, dtype=float)
    if normalize and np.abs(c).max() > 0:
        c = c / np.abs(c).max()
    parts = []
    for ci, b in zip(c, cq_basis):
        if abs(ci) < 0.05:
            continue
        term = b.to_string(fields)
        parts.append((ci, term))
    if not parts:
        return "0"
    text = ""
    for k, (ci, term) in enumerate(parts):
        mag = f"{abs(ci):.2f}"
        body = term if mag == "1.00" else f"{mag}*{term}"
        if k == 0:
            text = ("-" if ci < 0 else "") + body
        else:
            text += (" - " if ci < 0 else " + ") + body
    return text


@dataclass
class CqSolution:
    coeffs: np.ndarray
    trivial: bool
    residual: float
    expression: str
    reduced_coeffs: np.ndarray | None = None
    reduced_expression: str | None = None

    def to_dict(self) -> dict:
        d = {
            "coeffs": [float(c) for c in self.coeffs],
            "expression": self.expression,
            "trivial": bool(self.trivial),
            "residual": float(self.residual),
        }
        if self.reduced_coeffs is not None:
            d["reduced_coeffs"] = [float(c) for c in self.reduced_coeffs]
            d["reduced_expression"] = self.reduced_expression
        return d


@dataclass
class CqReport:
    pde: str
    basis: list[str]
    epsilon: float
    spectrum: SpectrumResult
    solutions: list[CqSolution]
    M_T: int
    trivial_singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def M(self) -> int:
        return self.spectrum.M

    @property
    def n_nontrivial(self) -> int:
        return self.M - self.M_T

    @property
    def singular_values(self) -> np.ndarray:
        return self.spectrum.singular_values

    def nontrivial(self) -> list[CqSolution]:
        return [s for s in self.solutions if not s.trivial]

    def trivial(self) -> list[CqSolution]:
        return [s for s in self.solutions if s.trivial]

    def to_dict(self) -> dict:
        return {
            "pde": self.pde,
            "basis": list(self.basis),
            "epsilon": float(self.epsilon),
            "singular_values": [float(s) for s in self.spectrum.singular_values],
            "normalized_singular_values": [float(s) for s in self.spectrum.normalized],
            "solutions": [s.to_dict() for s in self.solutions],
            "M": int(self.M),
            "M_T": int(self.M_T),
            "n_nontrivial": int(self.n_nontrivial),
            "n_uncertain": int(self.spectrum.n_uncertain),
            "gap_ratio": float(self.spectrum.gap_ratio) if np.isfinite(self.spectrum.gap_ratio) else None,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _orthonormal(cols: np.ndarray) -> np.ndarray:
    if cols.shape[1] == 0:
        return cols
    u, s, vt = np.linalg.svd(cols, full_matrices=False)
    keep = s > 1e-10 * max(s.max(), 1e-300)
    return u[:, keep]


def find_cqs(
    pde,
    cq_basis: Sequence[DiffExpr],
    ensemble: CurveEnsemble,
    epsilon: float = DEFAULT_EPSILON,
    fields: Sequence[str] = DEFAULT_FIELDS,
    seed: int = 0,
    equilibrate: bool = True,
) -> CqReport:
    """assemble_g -> null_space -> sparsify -> detect_trivial.

    With ``equilibrate`` (default) each column of ``G`` is divided by the
    norm of the grid sums of ``|g_i|`` before the SVD, which puts basis
    terms of very different magnitude (``u^4`` next to ``u_xx^2``) on equal
    footing; solutions are mapped back to raw coefficients.  Trivial
    solutions are reported first; non-trivial ones have their trivial part
    removed (:func:`reduce_trivial`) and are sparsified within that quotient.
    """
    system = as_system(pde)
    G, G_mag = assemble_g(system, cq_basis, ensemble, with_magnitude=True)
    K = len(cq_basis)
    d = column_scales(G_mag) if equilibrate else np.ones(K)
    spec = null_space(G / d, epsilon, reference_norm=np.linalg.norm(G_mag / d))
    Theta = _orthonormal(spec.solutions / d[:, None]) if spec.M else spec.solutions
    Theta = sparsify(Theta, seed=seed) if spec.M else Theta
    S = integral_matrix(cq_basis, ensemble, with_magnitude=True)
    triv = detect_trivial(Theta, cq_basis, ensemble, epsilon, S=S)

    trivial_cols = sparsify(triv.trivial_basis, seed=seed) if triv.M_T else np.zeros((K, 0))
    n_nontrivial = spec.M - triv.M_T
    if n_nontrivial > 0:
        Pt = trivial_cols @ trivial_cols.T if triv.M_T else np.zeros((K, K))
        comp = _orthonormal((np.eye(K) - Pt) @ Theta)[:, :n_nontrivial]
        reduced, _ = reduce_trivial(comp, trivial_cols, cq_basis)
        nontrivial_cols = sparsify(_orthonormal(reduced), seed=seed)
    else:
        nontrivial_cols = np.zeros((K, 0))

    gnorm = np.linalg.norm(G, 2)
    if spec.M == K and not np.any(spec.normalized):
        # G is round-off; measure residuals against the integrand magnitude
        gnorm = np.linalg.norm(G_mag, 2)

    def residual(theta):
        return float(np.linalg.norm(G @ theta) / gnorm) if gnorm > 0 else 0.0

    names = list(fields)
    solutions: list[CqSolution] = []
    for j in range(trivial_cols.shape[1]):
        th = trivial_cols[:, j]
        solutions.append(CqSolution(th, True, residual(th), display_expression(th, cq_basis, names)))
    for j in range(nontrivial_cols.shape[1]):
        th = nontrivial_cols[:, j]
        expr = display_expression(th, cq_basis, names)
        solutions.append(CqSolution(th, False, residual(th), expr, th, expr))
    return CqReport(
        pde=system.to_string(),
        basis=[b.to_string(names) for b in cq_basis],
        epsilon=epsilon,
        spectrum=spec,
        solutions=solutions,
        M_T=triv.M_T,
        trivial_singular_values=triv.singular_values,
    )
