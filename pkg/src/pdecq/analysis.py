"""Post-processing of multi-restart searches.

PCA of the final coefficient vectors, support-set clustering after a
coefficient cutoff, the ``x = a x'`` rescaling sweep, small-denominator
rationalization and CQ verification of candidate families.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .cqfinder import CqReport, find_cqs
from .curves import CurveEnsemble
from .optpde import SearchResult
from .symbolic import DiffExpr

__all__ = [
    "SolutionSet",
    "PcaResult",
    "Cluster",
    "RationalCandidate",
    "FamilyEntry",
    "FamilyCatalog",
    "pca_project",
    "sign_normalize",
    "threshold_families",
    "derivative_counts",
    "scaling_transform",
    "scaling_sweep",
    "rationalize",
    "combine",
    "verify_family",
    "build_catalog",
]


@dataclass
class SolutionSet:
    """Unit-norm coefficient vectors, one row per restart."""

    matrix: np.ndarray
    losses: np.ndarray
    ncq: np.ndarray
    counts: np.ndarray
    terms: list[str] = field(default_factory=list)
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        norms = np.linalg.norm(self.matrix, axis=1)
        if self.matrix.size and np.any(np.abs(norms - 1) > 1e-10):
            raise ValueError("solution rows must have unit norm")
        if self.indices is None:
            self.indices = np.arange(self.matrix.shape[0])

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_search(cls, search: SearchResult) -> "SolutionSet":
        ok = search.successful()
        terms = list(search.metadata.get("terms", []))
        if not ok:
            n = len(terms)
            return cls(np.zeros((0, n)), np.zeros(0), np.zeros(0), np.zeros(0, int), terms, np.zeros(0, int))
        mat = np.array([r.final_coefficients for r in ok])
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        return cls(
            mat,
            np.array([r.final_loss for r in ok]),
            np.array([r.final_ncq for r in ok]),
            np.array([r.final_count for r in ok]),
            terms,
            np.array([r.index for r in ok]),
        )


# -- PCA ----------------------------------------------------------------------


@dataclass
class PcaResult:
    projections: np.ndarray  # n x k
    components: np.ndarray  # k x d, orthonormal rows
    explained: np.ndarray  # fractions, descending
    mean: np.ndarray
    degenerate: bool

    def reconstruct(self) -> np.ndarray:
        return self.projections @ self.components + self.mean


def pca_project(X, k: int | None = 3) -> PcaResult:
    """Mean-centred PCA via the SVD.

    ``k=None`` keeps every component.  A set with zero spread is flagged
    ``degenerate`` and projects to the origin.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if n == 0:
        raise ValueError("no solutions to project")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=True)
    k = min(d, n) if k is None else k
    var = np.zeros(d)
    var[: s.size] = s**2
    total = var.sum()
    degenerate = bool(total <= 1e-24 * max(1.0, float(np.abs(X).max()) ** 2))
    comps = Vt[:k]
    explained = np.zeros(k) if degenerate else var[:k] / total
    proj = np.zeros((n, k)) if degenerate else Xc @ comps.T
    return PcaResult(proj, comps, explained, mean, degenerate)


# -- thresholding ---------------------------------------------------------------


def sign_normalize(v) -> np.ndarray:
    """Flip so the largest-magnitude entry (lowest index on ties) is positive."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        return v.copy()
    k = int(np.argmax(np.abs(v)))
    return v if v[k] > 0 else -v


@dataclass
class Cluster:
    support: tuple[int, ...]
    members: list[int]
    representative: np.ndarray

    @property
    def count(self) -> int:
        return len(self.members)

    def terms(self, names: Sequence[str]) -> list[str]:
        return [names[i] for i in self.support]


def threshold_families(X, cutoff: float = 0.1) -> list[Cluster]:
    """Group rows by their support after zeroing ``|c| < cutoff``.

    Rows are sign-normalized first, so ``v`` and ``-v`` share a cluster.
    Clusters are ranked by size, then by support.  The representative is the
    normalized mean of the thresholded, sign-normalized members.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    rows = {}
    for i, row in enumerate(X):
        t = np.where(np.abs(row) < cutoff, 0.0, row)
        t = sign_normalize(t)
        key = tuple(int(j) for j in np.flatnonzero(t))
        groups[key].append(i)
        rows[i] = t
    clusters = []
    for key, members in groups.items():
        # sum in a fixed order so the representative does not depend on row order
        stacked = np.array(sorted((tuple(rows[i]) for i in members)))
        rep = stacked.mean(axis=0)
        norm = np.linalg.norm(rep)
        clusters.append(Cluster(key, sorted(members), rep / norm if norm > 0 else rep))
    clusters.sort(key=lambda c: (-c.count, len(c.support), c.support))
    return clusters


# -- rescaling x = a x' -------------------------------------------------------------


def derivative_counts(basis: Sequence[DiffExpr]) -> np.ndarray:
    """Total derivative count of each single-monomial basis term."""
    out = []
    for b in basis:
        terms = b.terms
        counts = {t.derivative_count() for t in terms}
        if len(counts) != 1:
            raise ValueError(f"basis term {b} mixes derivative counts")
        out.append(counts.pop())
    return np.array(out, dtype=int)


def scaling_transform(coeffs, counts, a: float, normalize: bool = True) -> np.ndarray:
    """Multiply each coefficient by ``a ** count``; renormalize when asked."""
    if a == 0:
        raise ValueError("a must be non-zero")
    c = np.asarray(coeffs, dtype=float) * float(a) ** np.asarray(counts)
    if normalize:
        n = np.linalg.norm(c)
        c = c / n if n > 0 else c
    return c


def scaling_sweep(coeffs, counts, a_values) -> np.ndarray:
    """Unit vectors ``scaling_transform(coeffs, counts, a)`` for each ``a``."""
    return np.array([scaling_transform(coeffs, counts, a) for a in a_values])


# -- rationalization -------------------------------------------------------------


@dataclass
class RationalCandidate:
    coeffs: list[Fraction]
    residual: float

    def as_floats(self) -> np.ndarray:
        return np.array([float(f) for f in self.coeffs])

    def expression(self, basis: Sequence[DiffExpr]) -> DiffExpr:
        return combine(self.coeffs, basis)

    def to_dict(self, names: Sequence[str] | None = None) -> dict:
        d = {"coeffs": [str(f) for f in self.coeffs], "residual": self.residual}
        if names is not None:
            d["terms"] = {names[i]: str(f) for i, f in enumerate(self.coeffs) if f}
        return d


def _angle(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float(np.pi / 2)
    return float(np.arccos(min(1.0, abs(a @ b) / (na * nb))))


def rationalize(coeffs, max_denominator: int = 12, cutoff: float = 0.1, n_candidates: int = 5) -> list[RationalCandidate]:
    """Nearby coefficient vectors with small-denominator rational entries.

    Entries below ``cutoff`` (relative to the largest) are dropped; each
    surviving entry in turn is scaled to 1 and the rest are rounded with
    ``Fraction.limit_denominator``.  Candidates are ranked by the angle to
    the input.  These are suggestions for a human; nothing is committed.
    """
    c = np.asarray(coeffs, dtype=float)
    if not np.any(c):
        return []
    c = sign_normalize(c)
    big = np.abs(c).max()
    support = np.flatnonzero(np.abs(c) >= cutoff * big)
    seen = {}
    # on equal angles prefer scaling by the larger entry
    for k in sorted(support, key=lambda j: (-abs(c[j]), j)):
        scaled = c / c[k]
        fr = [Fraction(0)] * c.size
        for j in support:
            fr[j] = Fraction(float(scaled[j])).limit_denominator(max_denominator)
        if c[k] < 0:
            fr = [-f for f in fr]
        key = tuple(fr)
        if key in seen or not any(fr):
            continue
        seen[key] = (_angle(np.array([float(f) for f in fr]), c), len(seen))
    ranked = sorted(seen.items(), key=lambda kv: (round(kv[1][0], 9), kv[1][1]))
    return [RationalCandidate(list(k), r) for k, (r, _) in ranked[:n_candidates]]


def combine(coeffs, basis: Sequence[DiffExpr]) -> DiffExpr:
    """``sum_i coeffs[i] * basis[i]`` with exact rational arithmetic."""
    out = DiffExpr()
    for c, b in zip(coeffs, basis):
        if c:
            f = c if isinstance(c, Fraction) else Fraction(float(c)).limit_denominator(10**12)
            out = out + b * f
    return out


def verify_family(coeffs, pde_basis: Sequence[DiffExpr], cq_basis: Sequence[DiffExpr], ensemble: CurveEnsemble, **kwargs) -> CqReport:
    """Run the CQ finder on ``u_t = sum_i coeffs[i] pde_basis[i]``."""
    pde = coeffs if isinstance(coeffs, DiffExpr) else combine(coeffs, pde_basis)
    return find_cqs(pde, cq_basis, ensemble, **kwargs)


# -- catalog ----------------------------------------------------------------------------


@dataclass
class FamilyEntry:
    support: list[str]
    count: int
    representative: list[float]
    candidates: list[dict]
    expression: str | None = None
    verified: bool = False
    n_nontrivial: int | None = None
    report: dict | None = None

    def to_dict(self) -> dict:
        return {
            "support": self.support,
            "count": self.count,
            "representative": self.representative,
            "candidates": self.candidates,
            "expression": self.expression,
            "verified": self.verified,
            "n_nontrivial": self.n_nontrivial,
            "report": self.report,
        }


@dataclass
class FamilyCatalog:
    families: list[FamilyEntry]
    sweeps: dict[str, list[dict]] = field(default_factory=dict)
    pca: dict | None = None

    def to_dict(self) -> dict:
        return {"families": [f.to_dict() for f in self.families], "sweeps": self.sweeps, "pca": self.pca}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(indent=2))
        return path


def write_projection_csv(path, solutions: SolutionSet, pca: PcaResult, labels: Sequence[int]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        k = pca.projections.shape[1]
        w.writerow(["restart", *[f"pc{i + 1}" for i in range(k)], "loss", "count", "cluster"])
        for row in range(len(solutions)):
            w.writerow(
                [
                    int(solutions.indices[row]),
                    *[repr(float(v)) for v in pca.projections[row]],
                    repr(float(solutions.losses[row])),
                    int(solutions.counts[row]),
                    int(labels[row]),
                ]
            )
    return path


def build_catalog(
    solutions: SolutionSet,
    pde_basis: Sequence[DiffExpr] | None = None,
    cq_basis: Sequence[DiffExpr] | None = None,
    ensemble: CurveEnsemble | None = None,
    cutoff: float = 0.1,
    n_verify: int = 5,
    a_values: Sequence[float] = (-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0),
    k: int = 3,
) -> tuple[FamilyCatalog, PcaResult, np.ndarray]:
    """Cluster, rationalize and (for the ``n_verify`` largest clusters) verify.

    Returns the catalog, the PCA of the solution set and a cluster label per
    row.  Verification needs the bases and ensemble; without them families
    stay unverified.
    """
    names = solutions.terms or [f"f{i}" for i in range(solutions.matrix.shape[1])]
    pca = pca_project(solutions.matrix, k)
    clusters = threshold_families(solutions.matrix, cutoff)
    labels = np.zeros(len(solutions), dtype=int)
    for ci, cl in enumerate(clusters):
        labels[cl.members] = ci
    counts = derivative_counts(pde_basis) if pde_basis is not None else None
    families, sweeps = [], {}
    for ci, cl in enumerate(clusters):
        cands = rationalize(cl.representative, cutoff=cutoff)
        entry = FamilyEntry(
            [names[i] for i in cl.support],
            cl.count,
            [float(v) for v in cl.representative],
            [c.to_dict(names) for c in cands],
        )
        if pde_basis is not None and cands:
            entry.expression = str(cands[0].expression(pde_basis))
        if ci < n_verify and cands and pde_basis is not None and cq_basis is not None and ensemble is not None:
            report = verify_family(cands[0].coeffs, pde_basis, cq_basis, ensemble)
            entry.n_nontrivial = report.n_nontrivial
            entry.verified = report.n_nontrivial >= 1
            entry.report = report.to_dict()
        if counts is not None and cl.support:
            label = entry.expression or "+".join(entry.support)
            curve = scaling_sweep(cl.representative, counts, a_values)
            pts = (curve - pca.mean) @ pca.components.T
            sweeps[label] = [{"a": float(a), "pc": [float(v) for v in p]} for a, p in zip(a_values, pts)]
        families.append(entry)
    pca_info = {"explained": [float(v) for v in pca.explained], "degenerate": pca.degenerate}
    return FamilyCatalog(families, sweeps, pca_info), pca, labels
