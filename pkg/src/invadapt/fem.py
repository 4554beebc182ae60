"""P1 conforming Galerkin machinery on a SimplicialMesh.

Assembly is vectorized over elements; sparsity patterns and the
state-independent operators (mass, unit-coefficient stiffness) are
cached per mesh, so repeated nonlinear assembly touches only the
element data arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import SimplicialMesh
from .model import ModelParams, reaction_terms
from .quadrature import tet_rule

__all__ = [
    "StateFields",
    "BlockSystem",
    "AssemblyError",
    "assemble_mass",
    "assemble_diffusion",
    "assemble_haptotaxis",
    "assemble_reaction_residuals",
    "assemble_jacobian",
    "l2_project",
    "norms",
    "l2_norm",
    "h1_seminorm",
    "l2_error",
    "h1_seminorm_error",
]

DEG_LINEAR = 2      # mass / diffusion forms
DEG_NONLINEAR = 4   # cubic reaction and haptotaxis integrands, with margin


class AssemblyError(Exception):
    pass


@dataclass
class StateFields:
    """Nodal coefficient vectors for one time level on one mesh."""

    mesh_id: str
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if not (len(self.u) == len(self.v) == len(self.w)):
            raise ValueError("field lengths differ")
        for name in ("u", "v", "w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in field {name}")

    def check_mesh(self, mesh: SimplicialMesh):
        if self.mesh_id != mesh.mesh_id:
            raise ValueError(
                f"state belongs to mesh {self.mesh_id}, not {mesh.mesh_id}")
        if len(self.u) != mesh.n_vertices:
            raise ValueError("field length does not match mesh vertex count")

    def pack(self) -> np.ndarray:
        return np.concatenate([self.u, self.v, self.w])

    @classmethod
    def unpack(cls, mesh_id: str, x: np.ndarray) -> "StateFields":
        n = len(x) // 3
        return cls(mesh_id, x[:n], x[n:2 * n], x[2 * n:])

    def copy(self) -> "StateFields":
        return StateFields(self.mesh_id, self.u.copy(), self.v.copy(),
                           self.w.copy())


# ----------------------------------------------------------------------
# per-mesh caches
# ----------------------------------------------------------------------

class _Pattern:
    """COO -> CSR scatter plan for one mesh's 4x4 element blocks."""

    def __init__(self, mesh: SimplicialMesh):
        cells = mesh.cells
        E = len(cells)
        rows = np.broadcast_to(cells[:, :, None], (E, 4, 4)).ravel()
        cols = np.broadcast_to(cells[:, None, :], (E, 4, 4)).ravel()
        order = np.lexsort((cols, rows))
        r, c = rows[order], cols[order]
        new = np.ones(len(r), dtype=bool)
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        self.order = order
        self.starts = np.flatnonzero(new)
        self.indices = c[new]
        nnz_per_row = np.bincount(r[new], minlength=mesh.n_vertices)
        self.indptr = np.concatenate([[0], np.cumsum(nnz_per_row)])
        self.shape = (mesh.n_vertices, mesh.n_vertices)

    def csr(self, data: np.ndarray) -> sparse.csr_matrix:
        d = data.ravel()[self.order]
        vals = np.add.reduceat(d, self.starts)
        return sparse.csr_matrix((vals, self.indices, self.indptr),
                                 shape=self.shape)


class _FemCache:
    def __init__(self, mesh: SimplicialMesh):
        self.mesh = mesh
        self.geo = mesh.geometry()
        self.pattern = _Pattern(mesh)
        cells = mesh.cells
        p = self.geo.grads
        # gg[e, i, j] = grad(lambda_i) . grad(lambda_j)
        self.gg = np.einsum("eid,ejd->eij", p, p)
        self._by_degree: dict[int, tuple] = {}
        self._mass = None
        self._stiff = None

    def basis(self, degree: int):
        out = self._by_degree.get(degree)
        if out is None:
            rule = tet_rule(degree)
            phi = rule.points                         # (Q, 4)
            outer = np.einsum("qi,qj->qij", phi, phi)  # (Q, 4, 4)
            out = (rule, phi, outer)
            self._by_degree[degree] = out
        return out

    @property
    def mass(self) -> sparse.csr_matrix:
        if self._mass is None:
            vol = self.geo.volumes
            data = np.einsum("e,ij->eij", vol / 20.0,
                             np.ones((4, 4)) + np.eye(4))
            self._mass = self.pattern.csr(data)
        return self._mass

    @property
    def stiffness(self) -> sparse.csr_matrix:
        if self._stiff is None:
            data = self.gg * self.geo.volumes[:, None, None]
            self._stiff = self.pattern.csr(data)
        return self._stiff

    def qp_coords(self, degree: int) -> np.ndarray:
        """(E, Q, 3) physical coordinates of the quadrature points."""
        _, phi, _ = self.basis(degree)
        p = self.mesh.vertices[self.mesh.cells]      # (E, 4, 3)
        return np.einsum("qi,eid->eqd", phi, p)

    def at_qp(self, field: np.ndarray, degree: int) -> np.ndarray:
        _, phi, _ = self.basis(degree)
        return field[self.mesh.cells] @ phi.T        # (E, Q)

    def grad_of(self, field: np.ndarray) -> np.ndarray:
        return np.einsum("ei,eid->ed", field[self.mesh.cells],
                         self.geo.grads)             # (E, 3)

    def load(self, qp_vals: np.ndarray, degree: int) -> np.ndarray:
        """Nodal vector of integral(f * phi_i) from qp values of f."""
        rule, phi, _ = self.basis(degree)
        contrib = np.einsum("eq,q,qi->ei", qp_vals, rule.weights, phi)
        contrib *= self.geo.volumes[:, None]
        out = np.zeros(self.mesh.n_vertices)
        np.add.at(out, self.mesh.cells, contrib)
        return out

    def weighted_mass_data(self, qp_vals: np.ndarray, degree: int):
        """(E,4,4) element data of integral(c * phi_j * phi_i)."""
        rule, _, outer = self.basis(degree)
        data = np.einsum("eq,q,qij->eij", qp_vals, rule.weights, outer)
        return data * self.geo.volumes[:, None, None]

    def directional_data(self, qp_vals: np.ndarray, direction: np.ndarray,
                         degree: int):
        """(E,4,4) data of integral(c * phi_j * (g . grad(phi_i))).

        ``direction`` is a constant-per-element vector field (E, 3).
        """
        rule, phi, _ = self.basis(degree)
        gdot = np.einsum("ed,eid->ei", direction, self.geo.grads)  # (E, 4)
        sj = np.einsum("eq,q,qj->ej", qp_vals, rule.weights, phi)  # (E, 4)
        data = np.einsum("ei,ej->eij", gdot, sj)
        return data * self.geo.volumes[:, None, None]


def fem_cache(mesh: SimplicialMesh) -> _FemCache:
    cache = mesh._cache.get("fem")
    if cache is None:
        cache = _FemCache(mesh)
        mesh._cache["fem"] = cache
    return cache


def _coeff_qp(fc: _FemCache, coeff, degree: int) -> np.ndarray:
    """Normalize a coefficient spec to an (E, Q) array of qp values."""
    rule, _, _ = fc.basis(degree)
    E, Q = fc.mesh.n_cells, len(rule.weights)
    if coeff is None:
        return np.ones((E, Q))
    if np.isscalar(coeff):
        return np.full((E, Q), float(coeff))
    arr = np.asarray(coeff, dtype=float)
    if arr.shape == (E, Q):
        return arr
    if arr.shape == (E,):
        return np.repeat(arr[:, None], Q, axis=1)
    raise AssemblyError(f"coefficient shape {arr.shape} not understood")


# ----------------------------------------------------------------------
# operators
# ----------------------------------------------------------------------

def assemble_mass(mesh: SimplicialMesh, coeff=None,
                  degree: int = DEG_LINEAR) -> sparse.csr_matrix:
    """Mass operator, optionally weighted by a qp coefficient."""
    fc = fem_cache(mesh)
    if coeff is None:
        return fc.mass.copy()
    c = _coeff_qp(fc, coeff, degree)
    _check_finite_coeff(c)
    return fc.pattern.csr(fc.weighted_mass_data(c, degree))


def assemble_diffusion(mesh: SimplicialMesh, coeff=None,
                       degree: int = DEG_LINEAR) -> sparse.csr_matrix:
    """Stiffness operator integral(c * grad(phi_j) . grad(phi_i))."""
    fc = fem_cache(mesh)
    if coeff is None:
        return fc.stiffness.copy()
    rule, _, _ = fc.basis(degree)
    c = _coeff_qp(fc, coeff, degree)
    _check_finite_coeff(c)
    cbar = c @ rule.weights                         # (E,)
    data = fc.gg * (cbar * fc.geo.volumes)[:, None, None]
    return fc.pattern.csr(data)


def _check_finite_coeff(c: np.ndarray):
    if not np.all(np.isfinite(c)):
        e = int(np.flatnonzero(~np.isfinite(c).all(axis=1))[0])
        raise AssemblyError(f"non-finite coefficient value on element {e}")


def assemble_haptotaxis(mesh: SimplicialMesh, state: StateFields,
                        params: ModelParams,
                        degree: int = DEG_NONLINEAR) -> sparse.csr_matrix:
    """Haptotaxis operator: entry (i,j) = integral(chi(v) phi_j grad(v).grad(phi_i))."""
    state.check_mesh(mesh)
    fc = fem_cache(mesh)
    v_qp = fc.at_qp(state.v, degree)
    chi_qp = params.chi.fn(v_qp)
    _check_finite_coeff(chi_qp)
    gv = fc.grad_of(state.v)
    data = fc.directional_data(chi_qp, gv, degree)
    return fc.pattern.csr(data)


def _state_at_qp(fc: _FemCache, state: StateFields, degree: int):
    return (fc.at_qp(state.u, degree), fc.at_qp(state.v, degree),
            fc.at_qp(state.w, degree))


def assemble_reaction_residuals(mesh: SimplicialMesh, state: StateFields,
                                prev_state: StateFields, tau: float,
                                params: ModelParams, forcing=None,
                                degree: int = DEG_NONLINEAR):
    """Nodal residual (F_u, F_v, F_w) of the fully discrete system.

    ``forcing(points, )`` -> (s_u, s_v, s_w) adds manufactured sources;
    it receives the (E, Q, 3) quadrature coordinates.
    """
    if tau <= 0:
        raise ValueError("time step must be positive")
    state.check_mesh(mesh)
    prev_state.check_mesh(mesh)
    fc = fem_cache(mesh)
    rule, _, _ = fc.basis(degree)
    M = fc.mass
    u_qp, v_qp, w_qp = _state_at_qp(fc, state, degree)
    rt = reaction_terms(u_qp, v_qp, w_qp, params)

    d1_qp = params.d1.fn(u_qp, v_qp, w_qp)
    _check_finite_coeff(d1_qp)
    d1bar = d1_qp @ rule.weights
    gu = fc.grad_of(state.u)
    gv = fc.grad_of(state.v)
    vol = fc.geo.volumes

    # u-equation
    F_u = M @ ((state.u - prev_state.u) / tau)
    diff = (d1bar * vol)[:, None] * np.einsum("ed,eid->ei", gu, fc.geo.grads)
    chi_qp = params.chi.fn(v_qp)
    hap_c = (chi_qp * u_qp) @ rule.weights          # mean of chi(v) u
    hap = (hap_c * vol)[:, None] * np.einsum("ed,eid->ei", gv, fc.geo.grads)
    np.add.at(F_u, mesh.cells, diff - hap)
    F_u -= fc.load(rt.g2, degree)

    # v-equation
    F_v = M @ ((state.v - prev_state.v) / tau) - fc.load(rt.f_v, degree)

    # w-equation
    F_w = (M @ ((state.w - prev_state.w) / tau)
           + params.d2 * (fc.stiffness @ state.w)
           - fc.load(rt.f_w, degree))

    if forcing is not None:
        xq = fc.qp_coords(degree)
        s_u, s_v, s_w = forcing(xq)
        F_u -= fc.load(s_u, degree)
        F_v -= fc.load(s_v, degree)
        F_w -= fc.load(s_w, degree)
    return F_u, F_v, F_w


class BlockSystem:
    """3x3 block sparse operator over the (u, v, w) unknowns."""

    def __init__(self, blocks, n: int):
        self.blocks = blocks      # dict {(i, j): csr}
        self.n = n
        self.shape = (3 * n, 3 * n)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        parts = [x[:n], x[n:2 * n], x[2 * n:]]
        out = np.zeros_like(x)
        for (i, j), B in self.blocks.items():
            out[i * n:(i + 1) * n] += B @ parts[j]
        return out

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal(self) -> np.ndarray:
        n = self.n
        d = np.zeros(3 * n)
        for i in range(3):
            B = self.blocks.get((i, i))
            if B is not None:
                d[i * n:(i + 1) * n] = B.diagonal()
        return d

    def tocsr(self) -> sparse.csr_matrix:
        grid = [[self.blocks.get((i, j)) for j in range(3)] for i in range(3)]
        return sparse.bmat(grid, format="csr")


def assemble_jacobian(mesh: SimplicialMesh, state: StateFields,
                      prev_state: StateFields, tau: float,
                      params: ModelParams,
                      degree: int = DEG_NONLINEAR) -> BlockSystem:
    """Exact derivative of the discrete residual w.r.t. all unknowns."""
    if tau <= 0:
        raise ValueError("time step must be positive")
    state.check_mesh(mesh)
    fc = fem_cache(mesh)
    rule, _, _ = fc.basis(degree)
    vol = fc.geo.volumes
    u_qp, v_qp, w_qp = _state_at_qp(fc, state, degree)
    rt = reaction_terms(u_qp, v_qp, w_qp, params)
    gu = fc.grad_of(state.u)
    gv = fc.grad_of(state.v)

    d1 = params.d1
    if not d1.has_derivatives:
        raise AssemblyError(
            "d1 hook lacks partial derivatives; provide them or use a "
            "finite-difference fallback coefficient")
    d1_qp = d1.fn(u_qp, v_qp, w_qp)
    _check_finite_coeff(d1_qp)
    chi_qp = params.chi.fn(v_qp)

    M_tau = fc.mass / tau

    # -- u row ----------------------------------------------------------
    d1bar = d1_qp @ rule.weights
    data_uu = fc.gg * (d1bar * vol)[:, None, None]
    data_uu += fc.weighted_mass_data(-rt.g2_u, degree)
    data_uu -= fc.directional_data(chi_qp, gv, degree)
    if not d1.is_constant:
        data_uu += fc.directional_data(d1.d_u(u_qp, v_qp, w_qp), gu, degree)
    J_uu = M_tau + fc.pattern.csr(data_uu)

    chiu_bar = (chi_qp * u_qp) @ rule.weights
    data_uv = -fc.gg * (chiu_bar * vol)[:, None, None]
    data_uv -= fc.directional_data(params.chi.d_v(v_qp) * u_qp, gv, degree)
    data_uv += fc.weighted_mass_data(-rt.g2_v, degree)
    if not d1.is_constant:
        data_uv += fc.directional_data(d1.d_v(u_qp, v_qp, w_qp), gu, degree)
    J_uv = fc.pattern.csr(data_uv)

    J_uw = None
    if not d1.is_constant:
        J_uw = fc.pattern.csr(
            fc.directional_data(d1.d_w(u_qp, v_qp, w_qp), gu, degree))

    # -- v row ----------------------------------------------------------
    J_vu = fc.pattern.csr(fc.weighted_mass_data(-rt.f_v_u, degree))
    J_vv = M_tau + fc.pattern.csr(fc.weighted_mass_data(-rt.f_v_v, degree))
    J_vw = fc.pattern.csr(fc.weighted_mass_data(-rt.f_v_w, degree))

    # -- w row ----------------------------------------------------------
    J_wu = fc.pattern.csr(fc.weighted_mass_data(-rt.f_w_u, degree))
    J_ww = (M_tau + params.d2 * fc.stiffness
            + fc.pattern.csr(fc.weighted_mass_data(-rt.f_w_w, degree)))

    blocks = {(0, 0): J_uu, (0, 1): J_uv, (1, 0): J_vu, (1, 1): J_vv,
              (1, 2): J_vw, (2, 0): J_wu, (2, 2): J_ww}
    if J_uw is not None:
        blocks[(0, 2)] = J_uw
    return BlockSystem(blocks, mesh.n_vertices)


# ----------------------------------------------------------------------
# projection and norms
# ----------------------------------------------------------------------

def l2_project(mesh: SimplicialMesh, fn, degree: int = 5) -> np.ndarray:
    """Global L2 projection of a pointwise function onto P1."""
    fc = fem_cache(mesh)
    xq = fc.qp_coords(degree)
    vals = np.asarray(fn(xq), dtype=float)
    b = fc.load(vals, degree)
    M = fc.mass.tocsc()
    unused = ~mesh.used_mask
    if unused.any():
        M = M + sparse.diags(unused.astype(float))
    c = sparse.linalg.spsolve(M, b)
    res = np.linalg.norm(M @ c - b)
    if res > 1e-12 * max(np.linalg.norm(b), 1.0):
        raise AssemblyError(f"mass solve residual {res:.2e} too large")
    return c


def l2_norm(mesh: SimplicialMesh, field: np.ndarray) -> float:
    fc = fem_cache(mesh)
    f = field[mesh.cells]                            # (E, 4)
    s = f.sum(axis=1)
    val = (fc.geo.volumes / 20.0) * ((f * f).sum(axis=1) + s * s)
    return float(np.sqrt(val.sum()))


def h1_seminorm(mesh: SimplicialMesh, field: np.ndarray) -> float:
    fc = fem_cache(mesh)
    g = fc.grad_of(field)
    return float(np.sqrt(np.sum(fc.geo.volumes * np.sum(g * g, axis=1))))


def norms(mesh: SimplicialMesh, field: np.ndarray) -> dict:
    """L2 norm, H1 seminorm and full H1 norm of a P1 nodal field."""
    l2 = l2_norm(mesh, field)
    semi = h1_seminorm(mesh, field)
    return {"l2": l2, "h1_semi": semi, "h1": float(np.hypot(l2, semi))}


def l2_error(mesh: SimplicialMesh, field: np.ndarray, fn,
             degree: int = 5) -> float:
    """L2 distance between a nodal field and a pointwise function."""
    fc = fem_cache(mesh)
    rule, _, _ = fc.basis(degree)
    diff = fc.at_qp(field, degree) - np.asarray(fn(fc.qp_coords(degree)))
    val = (diff * diff) @ rule.weights * fc.geo.volumes
    return float(np.sqrt(val.sum()))


def h1_seminorm_error(mesh: SimplicialMesh, field: np.ndarray, grad_fn,
                      degree: int = 5) -> float:
    """H1-seminorm distance to a function given by its gradient."""
    fc = fem_cache(mesh)
    rule, _, _ = fc.basis(degree)
    gh = fc.grad_of(field)                           # (E, 3)
    gx = np.asarray(grad_fn(fc.qp_coords(degree)))   # (E, Q, 3)
    diff = gh[:, None, :] - gx
    val = np.einsum("eqd,eqd,q->e", diff, diff, rule.weights)
    return float(np.sqrt(np.sum(val * fc.geo.volumes)))
