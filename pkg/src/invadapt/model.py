"""Model data for the three-species cancer-invasion system.

Fields: u = cancer-cell density, v = extracellular-matrix density,
w = matrix-degrading-enzyme concentration.  The u-equation carries
nonlinear diffusion and a haptotaxis term up the ECM gradient; the
v-equation is an ODE in space; the w-equation diffuses with constant
coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

__all__ = [
    "DiffusionCoefficient",
    "Sensitivity",
    "ModelParams",
    "ReactionTerms",
    "ManufacturedCase",
    "parameter_set",
    "initial_conditions",
    "reaction_terms",
    "manufactured_case",
]


@dataclass(frozen=True)
class DiffusionCoefficient:
    """Cell diffusion coefficient d1(u, v, w) with optional partials."""

    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    d_u: Optional[Callable] = None
    d_v: Optional[Callable] = None
    d_w: Optional[Callable] = None
    constant: Optional[float] = None  # set when fn is a constant

    @classmethod
    def const(cls, value: float) -> "DiffusionCoefficient":
        z = lambda u, v, w: np.zeros_like(np.asarray(u, dtype=float))
        return cls(fn=lambda u, v, w: np.full_like(np.asarray(u, dtype=float), value),
                   d_u=z, d_v=z, d_w=z, constant=value)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    @property
    def has_derivatives(self) -> bool:
        return all(d is not None for d in (self.d_u, self.d_v, self.d_w))


@dataclass(frozen=True)
class Sensitivity:
    """Haptotactic sensitivity chi(v) with optional derivative."""

    fn: Callable[[np.ndarray], np.ndarray]
    d_v: Optional[Callable] = None
    constant: Optional[float] = None

    @classmethod
    def const(cls, value: float) -> "Sensitivity":
        return cls(fn=lambda v: np.full_like(np.asarray(v, dtype=float), value),
                   d_v=lambda v: np.zeros_like(np.asarray(v, dtype=float)),
                   constant=value)

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


@dataclass(frozen=True)
class ModelParams:
    """All scalar coefficients of the system plus coefficient hooks."""

    d1: DiffusionCoefficient
    d2: float
    chi: Sensitivity
    lam: float
    rho: float
    eta: float
    alpha: float
    beta: float
    eps_ic: float = 0.01

    def __post_init__(self):
        if self.d2 <= 0:
            raise ValueError("d2 must be positive")
        for name in ("lam", "rho", "eta", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def with_overrides(self, **kw) -> "ModelParams":
        if "d1" in kw and not isinstance(kw["d1"], DiffusionCoefficient):
            kw["d1"] = DiffusionCoefficient.const(float(kw["d1"]))
        if "chi" in kw and not isinstance(kw["chi"], Sensitivity):
            kw["chi"] = Sensitivity.const(float(kw["chi"]))
        return replace(self, **kw)


def parameter_set(which: int) -> ModelParams:
    """The two published experiment parameter sets."""
    base = ModelParams(
        d1=DiffusionCoefficient.const(0.0001),
        d2=0.0005,
        chi=Sensitivity.const(0.005),
        lam=0.75,
        eta=10.0,
        rho=1.5,
        beta=0.1,
        alpha=0.25,
        eps_ic=0.01,
    )
    if which == 1:
        return base
    if which == 2:
        return base.with_overrides(rho=0.0, alpha=0.1, beta=0.0, chi=0.00005)
    raise ValueError(f"unknown parameter set {which!r} (expected 1 or 2)")


# ----------------------------------------------------------------------
# initial conditions
# ----------------------------------------------------------------------

def initial_profile(points: np.ndarray, eps: float = 0.01):
    """(u0, v0, w0) at arbitrary points: a sharp cell bump at the origin."""
    pts = np.asarray(points, dtype=float)
    r2 = np.sum(pts * pts, axis=-1)
    u0 = np.where(r2 <= 0.25**2, np.exp(-r2 / eps), 0.0)
    return u0, 1.0 - 0.5 * u0, 0.5 * u0


def initial_conditions(mesh, params: ModelParams):
    """Nodal interpolation of the initial bump onto a mesh."""
    from .fem import StateFields

    u0, v0, w0 = initial_profile(mesh.vertices, params.eps_ic)
    return StateFields(mesh.mesh_id, u0, v0, w0)


# ----------------------------------------------------------------------
# reaction terms
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ReactionTerms:
    """Pointwise reaction values and their first partial derivatives."""

    g1: np.ndarray       # chi(v) * u, the haptotactic flux coefficient
    g2: np.ndarray       # lam * u * (1 - u - v)
    f_v: np.ndarray      # rho * v * (1 - u - v) - eta * v * w
    f_w: np.ndarray      # alpha * u * (1 - w) - beta * w
    g1_u: np.ndarray
    g1_v: np.ndarray
    g2_u: np.ndarray
    g2_v: np.ndarray
    f_v_u: np.ndarray
    f_v_v: np.ndarray
    f_v_w: np.ndarray
    f_w_u: np.ndarray
    f_w_w: np.ndarray


def reaction_terms(u, v, w, params: ModelParams) -> ReactionTerms:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    chi = params.chi.fn(v)
    if params.chi.d_v is None:
        raise ValueError("sensitivity hook lacks derivative info; "
                         "use a finite-difference fallback sensitivity")
    chi_p = params.chi.d_v(v)
    lam, rho, eta, alpha, beta = (params.lam, params.rho, params.eta,
                                  params.alpha, params.beta)
    return ReactionTerms(
        g1=chi * u,
        g2=lam * u * (1.0 - u - v),
        f_v=rho * v * (1.0 - u - v) - eta * v * w,
        f_w=alpha * u * (1.0 - w) - beta * w,
        g1_u=chi,
        g1_v=chi_p * u,
        g2_u=lam * (1.0 - 2.0 * u - v),
        g2_v=-lam * u,
        f_v_u=-rho * v,
        f_v_v=rho * (1.0 - u - 2.0 * v) - eta * w,
        f_v_w=-eta * v,
        f_w_u=alpha * (1.0 - w),
        f_w_w=-alpha * u - beta,
    )


# ----------------------------------------------------------------------
# manufactured solution
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form solution plus matching source terms.

    The exact triple solves the system with the sources appended to the
    right-hand sides.  The cosine profile has vanishing normal
    derivatives on every face of the cube, so the zero-flux boundary
    conditions hold exactly.  Sources assume constant d1 and chi hooks.
    """

    name: str
    amplitude: float
    params: ModelParams

    def __post_init__(self):
        if not (self.params.d1.is_constant and self.params.chi.is_constant):
            raise ValueError("manufactured sources require constant "
                             "d1 and chi coefficients")

    # -- closed forms ---------------------------------------------------
    def _shape(self, pts):
        pts = np.asarray(pts, dtype=float)
        c = np.cos(np.pi * pts)
        return c[..., 0] * c[..., 1] * c[..., 2]

    def exact(self, pts, t: float):
        """(u, v, w) at points and time t."""
        u = self.amplitude * np.exp(-t) * self._shape(pts)
        return u, 1.0 - 0.5 * u, 0.5 * u

    def exact_grad_u(self, pts, t: float):
        pts = np.asarray(pts, dtype=float)
        c = np.cos(np.pi * pts)
        s = np.sin(np.pi * pts)
        amp = self.amplitude * np.exp(-t) * np.pi
        g = np.empty_like(pts)
        g[..., 0] = -amp * s[..., 0] * c[..., 1] * c[..., 2]
        g[..., 1] = -amp * c[..., 0] * s[..., 1] * c[..., 2]
        g[..., 2] = -amp * c[..., 0] * c[..., 1] * s[..., 2]
        return g

    def sources(self, pts, t: float):
        """(s_u, s_v, s_w) making the exact triple solve the system."""
        p = self.params
        d1 = p.d1.constant
        chi = p.chi.constant
        u, v, w = self.exact(pts, t)
        gu = self.exact_grad_u(pts, t)
        grad_u_sq = np.sum(gu * gu, axis=-1)
        lap_u = -3.0 * np.pi**2 * u
        u_t = -u
        # v = 1 - u/2, w = u/2 share u's time/space dependence
        s_u = (u_t - d1 * lap_u
               + chi * (-0.5 * grad_u_sq - 0.5 * u * lap_u)
               - p.lam * u * (1.0 - u - v))
        s_v = (-0.5 * u_t
               - p.rho * v * (1.0 - u - v) + p.eta * v * w)
        s_w = (0.5 * u_t - p.d2 * 0.5 * lap_u
               - p.alpha * u * (1.0 - w) + p.beta * w)
        return s_u, s_v, s_w

    def initial_state(self, mesh):
        from .fem import StateFields

        u, v, w = self.exact(mesh.vertices, 0.0)
        return StateFields(mesh.mesh_id, u, v, w)


def manufactured_case(case_id: str = "A",
                      params: ModelParams | None = None) -> ManufacturedCase:
    """Built-in manufactured cases (currently only case "A")."""
    if case_id != "A":
        raise ValueError(f"unknown manufactured case {case_id!r}")
    if params is None:
        params = parameter_set(1)
    return ManufacturedCase(name="A", amplitude=0.1, params=params)
