"""Named CQ bases, PDE bases and benchmark equations."""

from __future__ import annotations

from .cqfinder import PdeSystem
from .symbolic import DiffExpr, parse

BURGERS_KDV = [
    "u",
    "u^2",
    "u^2*u_xx",
    "u^3",
    "u_x^2",
    "u_x^2*u",
    "u_x^3",
    "u_xx^2",
    "u_xx^2*u",
    "u_xx^2*u_x",
    "u_xx^3",
    "u_xx*u",
    "u_xx*u_x*u",
]

NLSE = [
    "u",
    "u^3",
    "u_x^3",
    "u_xx^2",
    "u_xx^3",
    "v^2",
    "u_x^2",
    "v_x^2",
    "u^4",
    "v^4",
    "u^2*v^2",
    "u^2",
]

# cubic polynomials in (u, u_x, u_xx, u_xxx), in the published order
CUBIC34 = [
    "u", "u^2", "u^2*u_x", "u^2*u_xx", "u^2*u_xxx", "u^3", "u_x", "u_x^2", "u_x^2*u",
    "u_x^2*u_xx", "u_x^2*u_xxx", "u_x^3", "u_x*u", "u_xx", "u_xx^2", "u_xx^2*u",
    "u_xx^2*u_x", "u_xx^2*u_xxx", "u_xx^3", "u_xx*u", "u_xx*u_x", "u_xx*u_x*u",
    "u_xxx", "u_xxx^2", "u_xxx^2*u", "u_xxx^2*u_x", "u_xxx^2*u_xx", "u_xxx^3",
    "u_xxx*u", "u_xxx*u_x", "u_xxx*u_x*u", "u_xxx*u_xx", "u_xxx*u_xx*u", "u_xxx*u_xx*u_x",
]

CUBIC33 = [t for t in CUBIC34 if t != "u_x"]

CQ_BASES = {"burgers-kdv": BURGERS_KDV, "nlse": NLSE}
PDE_BASES = {"cubic34": CUBIC34, "cubic33": CUBIC33}

PDES = {
    "burgers": "u*u_x",
    "kdv": "u_xxx - 6*u*u_x",
    "cubic-family": "(u_x + u_xxx)^3",
    "ux3": "u_x^3",
    "advection": "u_x",
    "diffusion": "u_xx",
}

NLSE_SYSTEM = ("-1/2*v_xx + v*(u^2 + v^2)", "1/2*u_xx - u*(u^2 + v^2)")


def parse_basis(terms) -> list[DiffExpr]:
    return [parse(t) for t in terms]


def cq_basis(name: str) -> list[DiffExpr]:
    try:
        return parse_basis(CQ_BASES[name])
    except KeyError:
        raise KeyError(f"unknown CQ basis {name!r}; choose from {sorted(CQ_BASES)}") from None


def pde_basis(name: str) -> list[DiffExpr]:
    try:
        return parse_basis(PDE_BASES[name])
    except KeyError:
        raise KeyError(f"unknown PDE basis {name!r}; choose from {sorted(PDE_BASES)}") from None


def nlse_system() -> PdeSystem:
    return PdeSystem(tuple(parse(t) for t in NLSE_SYSTEM))


def resolve_basis(spec: str | list[str], presets=None) -> list[DiffExpr]:
    """A preset name, or comma-separated expressions."""
    presets = presets or {**CQ_BASES, **PDE_BASES}
    if isinstance(spec, str):
        if spec in presets:
            return parse_basis(presets[spec])
        spec = [s for s in spec.split(",") if s.strip()]
    return parse_basis(spec)
