"""First- and second-order multiscale reconstruction from homogenized fields.

Cell functions are evaluated at the fast variable ``xi = (x/eps) mod 1``;
derivatives of the homogenized fields come from difference quotients on the
structured coarse grid. Edge fields are made nodal by averaging
element-centre values before any differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import mesh_fem as fem
from .errors import InvalidArgumentError, StencilError
from .media import PeriodicMedium


@dataclass
class MultiscaleField:
    order: int
    t: float
    psi_ms: np.ndarray | None = None   # complex, (n_points,)
    E_ms: np.ndarray | None = None     # (n_points, 3)
    H_ms: np.ndarray | None = None     # (n_points, 3)


# ---------------------------------------------------------------------------
# Difference quotients
# ---------------------------------------------------------------------------

def _derivative(grid: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Central differences inside, one-sided third-order stencils at the ends.

    With only three nodes along ``axis`` the end stencils drop to second order.
    """
    n = grid.shape[axis]
    g = np.moveaxis(grid, axis, 0)
    d = np.empty_like(g)
    d[1:-1] = (g[2:] - g[:-2]) / (2 * h)
    if n >= 4:
        d[0] = (-11 * g[0] + 18 * g[1] - 9 * g[2] + 2 * g[3]) / (6 * h)
        d[-1] = (11 * g[-1] - 18 * g[-2] + 9 * g[-3] - 2 * g[-4]) / (6 * h)
    else:
        d[0] = (-3 * g[0] + 4 * g[1] - g[2]) / (2 * h)
        d[-1] = (3 * g[-1] - 4 * g[-2] + g[-3]) / (2 * h)
    return np.moveaxis(d, 0, axis)


def _as_grid(mesh: fem.BoxMesh, values: np.ndarray) -> np.ndarray:
    nx, ny, nz = mesh.divisions
    return values.reshape((nz + 1, ny + 1, nx + 1) + values.shape[1:])


def _grid_axis(k: int) -> int:
    # node numbering is x fastest, so x is the last grid axis
    return 2 - k


def difference_quotients(field, order: int = 1, mesh: fem.BoxMesh | None = None) -> np.ndarray:
    """Nodal gradient ``(n, 3)`` (order 1) or Hessian ``(n, 3, 3)`` (order 2).

    Trailing dimensions of the values are carried through, e.g. nodal
    3-vectors give ``(n, 3, 3)`` gradients with ``[node, component, axis]``.
    """
    if isinstance(field, fem.ScalarField):
        mesh, values = field.mesh, np.asarray(field.values)
    else:
        values = np.asarray(field)
    if mesh is None:
        raise InvalidArgumentError("a mesh is needed for raw nodal values")
    if order not in (1, 2):
        raise InvalidArgumentError("order must be 1 or 2")
    if min(mesh.divisions) < 2:
        raise StencilError(f"difference quotients need >= 3 nodes per axis, mesh has {tuple(mesh.divisions)} divisions")
    grid = _as_grid(mesh, values)
    first = np.stack([_derivative(grid, mesh.h[k], _grid_axis(k)) for k in range(3)], axis=-1)
    if order == 1:
        return first.reshape((mesh.n_nodes,) + values.shape[1:] + (3,))
    # nested application: d_l (d_k f), symmetrized to remove round-off asymmetry
    second = np.stack([_derivative(first, mesh.h[l], _grid_axis(l)) for l in range(3)], axis=-1)
    second = 0.5 * (second + np.swapaxes(second, -1, -2))
    return second.reshape((mesh.n_nodes,) + values.shape[1:] + (3, 3))


def curl_from_nodal(mesh: fem.BoxMesh, W: np.ndarray) -> np.ndarray:
    """Nodal curl of a nodal 3-vector field by difference quotients."""
    D = difference_quotients(W, 1, mesh)  # [node, component, axis]
    return np.stack([D[:, 2, 1] - D[:, 1, 2], D[:, 0, 2] - D[:, 2, 0], D[:, 1, 0] - D[:, 0, 1]], axis=1)


# ---------------------------------------------------------------------------
# Point evaluation helpers
# ---------------------------------------------------------------------------

def interpolation_matrix(mesh: fem.BoxMesh, points: np.ndarray) -> sp.csr_matrix:
    """Sparse ``(n_points, n_nodes)`` trilinear interpolation weights."""
    points = np.atleast_2d(points)
    elem, ref = mesh.locate(points)
    N, _ = fem.q1_basis(ref, mesh.h)
    rows = np.repeat(np.arange(len(points)), 8)
    return sp.csr_matrix((N.ravel(), (rows, mesh.element_nodes[elem].ravel())), shape=(len(points), mesh.n_nodes))


def _apply(P: sp.csr_matrix, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    flat = values.reshape(values.shape[0], -1)
    return (P @ flat).reshape((P.shape[0],) + values.shape[1:])


def trilinear(mesh: fem.BoxMesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of nodal arrays with any trailing shape (real or complex)."""
    return _apply(interpolation_matrix(mesh, points), values)


def _periodic_average(mesh: fem.BoxMesh, values: np.ndarray) -> np.ndarray:
    rep = fem.periodic_map(mesh)
    m = int(np.prod(mesh.divisions))
    count = np.bincount(rep, minlength=m).astype(float)
    flat = values.reshape(len(values), -1)
    acc = np.stack([np.bincount(rep, weights=flat[:, c], minlength=m) for c in range(flat.shape[1])], axis=1)
    return (acc / count[:, None])[rep].reshape(values.shape)


class CellEvaluator:
    """Cell functions and their recovered gradients at arbitrary cell coordinates.

    Gradients of nodal cell functions and values of edge cell functions are
    recovered to nodes (element-centre averaging, opposite faces identified)
    and then interpolated trilinearly, so evaluation is single-valued and
    1-periodic.
    """

    def __init__(self, cells):
        self.cells = cells
        self.mesh = cells.mesh
        self._cache: dict = {}

    def _scalar(self, name):
        if name not in self._cache:
            f = self.cells.fields[name]
            _, G = fem.q1_basis(np.full((1, 3), 0.5), self.mesh.h)
            grad = f.values[self.mesh.element_nodes] @ G[0]
            self._cache[name] = (f.values, _periodic_average(self.mesh, fem._average_to_nodes(self.mesh, grad)))
        return self._cache[name]

    def _vector(self, name):
        if name not in self._cache:
            f = self.cells.fields[name]
            self._cache[name] = _periodic_average(self.mesh, fem.edge_to_nodal(self.mesh, f.values))
        return self._cache[name]

    def scalar(self, names, xi, P=None):
        """Values ``(p, m)`` and gradients ``(p, m, 3)`` of scalar cell functions."""
        P = interpolation_matrix(self.mesh, xi) if P is None else P
        vals = np.stack([self._scalar(n)[0] for n in names], axis=1)
        grads = np.stack([self._scalar(n)[1] for n in names], axis=1)
        return _apply(P, vals), _apply(P, grads)

    def vector(self, names, xi, P=None):
        """Values ``(p, m, 3)`` of edge cell functions."""
        P = interpolation_matrix(self.mesh, xi) if P is None else P
        return _apply(P, np.stack([self._vector(n) for n in names], axis=1))


def _evaluator(cells) -> CellEvaluator:
    ev = getattr(cells, "_evaluator", None)
    if ev is None:
        ev = CellEvaluator(cells)
        try:
            cells._evaluator = ev
        except AttributeError:
            pass
    return ev


def cell_coordinates(points: np.ndarray, eps: float) -> np.ndarray:
    xi = np.mod(np.asarray(points, dtype=float) / eps, 1.0)
    # points on a cell boundary map to 0 (or round-off below 1); both are the same periodic node
    return np.clip(xi, 0.0, 1.0)


def _names(kind, key):
    if kind == "theta1":
        return [f"theta1_{key}_dirichlet_{k}" for k in range(3)]
    if kind == "theta2":
        return [f"theta2_{key}_{k}{l}" for k in range(3) for l in range(3)]
    return [f"{kind}_{key}_{p}" for p in range(3)]


# ---------------------------------------------------------------------------
# Expansions on raw coarse-node data
# ---------------------------------------------------------------------------

class ExpansionPlan:
    """Interpolation weights and cell-function values for one fixed point set.

    Reusing a plan across time steps avoids repeating point location and
    cell-function evaluation.
    """

    def __init__(self, coarse: fem.BoxMesh, cells, eps: float, points: np.ndarray, xi: np.ndarray | None = None):
        self.coarse = coarse
        self.cells = cells
        self.eps = float(eps)
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.P = interpolation_matrix(coarse, self.points)
        self.xi = cell_coordinates(self.points, eps) if xi is None else np.atleast_2d(xi)
        self._Pxi = None
        self._cell: dict = {}

    def _cellvals(self, kind, key):
        k = (kind, key)
        if k not in self._cell:
            ev = _evaluator(self.cells)
            if self._Pxi is None:
                self._Pxi = interpolation_matrix(ev.mesh, self.xi)
            names = _names(kind, key)
            if kind in ("theta1", "theta2"):
                self._cell[k] = ev.scalar(names, self.xi, self._Pxi)
            else:
                self._cell[k] = ev.vector(names, self.xi, self._Pxi)
        return self._cell[k]

    def scalar(self, psi0: np.ndarray, order: int, key: str = "a") -> np.ndarray:
        """``psi0 + eps theta_k d_k psi0 (+ eps^2 theta_kl d_kl psi0)``."""
        _check_order(order)
        eps, P = self.eps, self.P
        out = _apply(P, psi0)
        if order == 0:
            return out
        th, _ = self._cellvals("theta1", key)
        out = out + eps * np.einsum("pk,pk->p", th, _apply(P, difference_quotients(psi0, 1, self.coarse)))
        if order == 2:
            th2, _ = self._cellvals("theta2", key)
            hess = _apply(P, difference_quotients(psi0, 2, self.coarse)).reshape(len(out), 9)
            out = out + eps ** 2 * np.einsum("pm,pm->p", th2, hess)
        return out

    def vector(self, F0: np.ndarray, W: np.ndarray, order: int, key_theta: str, key_Theta: str, sign: float,
               base: np.ndarray | None = None) -> np.ndarray:
        """Vector expansion shared by the electric and magnetic fields.

        ``F0`` is the nodal homogenized field, ``W`` the nodal field multiplied
        by the ``Theta`` correctors (``mu_hat dH/dt`` or ``eta_hat dE/dt``) and
        ``sign`` the sign in front of those terms. ``base`` replaces the
        interpolated ``F0`` as the order-0 value when the homogenized field can
        be evaluated exactly at the points; the correctors always use ``F0``.
        """
        _check_order(order)
        eps, P, coarse = self.eps, self.P, self.coarse
        F = _apply(P, F0)
        out = F.copy() if base is None else np.asarray(base, dtype=float).copy()
        if order == 0:
            return out
        dF = _apply(P, difference_quotients(F0, 1, coarse))                        # [p, k, l] = d_l F_k
        th, gth = self._cellvals("theta1", key_theta)
        # eps grad(theta_k(x/eps) F_k) = (grad_xi theta_k) F_k + eps theta_k grad F_k
        out = out + np.einsum("pki,pk->pi", gth, F) + eps * np.einsum("pk,pki->pi", th, dF)
        Th1 = self._cellvals("Theta1", key_Theta)                                   # [p, col, i]
        out = out + sign * eps * np.einsum("pci,pc->pi", Th1, _apply(P, W))
        if order == 2:
            th2, gth2 = self._cellvals("theta2", key_theta)
            th2 = th2.reshape(-1, 3, 3)
            gth2 = gth2.reshape(-1, 3, 3, 3)
            ddF = _apply(P, difference_quotients(F0, 2, coarse))                    # [p, k, l, i]
            # eps grad(eps theta_kl d_l F_k) = eps (grad_xi theta_kl) d_l F_k + eps^2 theta_kl grad d_l F_k
            out = out + eps * np.einsum("pkli,pkl->pi", gth2, dF) + eps ** 2 * np.einsum("pkl,pkli->pi", th2, ddF)
            Th2 = self._cellvals("Theta2", key_Theta)
            out = out + sign * eps ** 2 * np.einsum("pci,pc->pi", Th2, _apply(P, curl_from_nodal(coarse, W)))
        return out

    def electric(self, E_edges: np.ndarray, order: int, base: np.ndarray | None = None) -> np.ndarray:
        """Electric expansion; order 0 is the edge field itself unless ``base`` is given."""
        E0, W = electric_parts(self.coarse, E_edges)
        if base is None:
            base = fem.interpolate(fem.EdgeField(self.coarse, E_edges), self.points)
        return self.vector(E0, W, order, "eta", "mu", -1.0, base=base)

    def magnetic(self, H: np.ndarray, E_dot: np.ndarray, order: int) -> np.ndarray:
        eta_hat = np.asarray(self.cells.tensors.get("eta_hat", np.eye(3)))
        W = fem.edge_to_nodal(self.coarse, E_dot) @ eta_hat.T
        return self.vector(np.asarray(H), W, order, "mu", "eta", 1.0)


def expand_scalar(coarse: fem.BoxMesh, psi0: np.ndarray, cells, eps: float, order: int,
                  points: np.ndarray, xi: np.ndarray | None = None, key: str = "a") -> np.ndarray:
    return ExpansionPlan(coarse, cells, eps, points, xi).scalar(psi0, order, key)


def expand_vector(coarse: fem.BoxMesh, F0: np.ndarray, W: np.ndarray, cells, eps: float, order: int,
                  points: np.ndarray, key_theta: str, key_Theta: str, sign: float,
                  xi: np.ndarray | None = None, base: np.ndarray | None = None) -> np.ndarray:
    return ExpansionPlan(coarse, cells, eps, points, xi).vector(F0, W, order, key_theta, key_Theta, sign, base)


def _check_order(order):
    if order not in (0, 1, 2):
        raise InvalidArgumentError("order must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# Trajectory-level reconstruction
# ---------------------------------------------------------------------------

def _points_of(eval_mesh):
    if isinstance(eval_mesh, fem.BoxMesh):
        return eval_mesh.node_coords
    return np.atleast_2d(np.asarray(eval_mesh, dtype=float))


def _state(traj, t_index):
    n = len(traj)
    if not -n <= t_index < n:
        raise InvalidArgumentError(f"t_index {t_index} out of range for {n} states")
    return traj[t_index]


def reconstruct_psi(traj, cells, medium: PeriodicMedium, order: int, eval_mesh, t_index: int) -> MultiscaleField:
    s = _state(traj, t_index)
    plan = ExpansionPlan(traj.mesh, cells, medium.epsilon, _points_of(eval_mesh))
    return MultiscaleField(order, s.t, psi_ms=plan.scalar(np.asarray(s.psi, dtype=complex), order))


def electric_parts(mesh: fem.BoxMesh, E: np.ndarray):
    """Nodal ``E`` and nodal ``mu_hat dH/dt = -curl E``."""
    return fem.edge_to_nodal(mesh, E), -fem.edge_curl_to_nodal(mesh, E)


def reconstruct_E_at(coarse: fem.BoxMesh, E_edges: np.ndarray, cells, eps: float, order: int,
                     points: np.ndarray) -> np.ndarray:
    """Electric expansion at points; order 0 is the edge field itself."""
    return ExpansionPlan(coarse, cells, eps, points).electric(E_edges, order)


def reconstruct_E(traj, cells, medium: PeriodicMedium, order: int, eval_mesh, t_index: int) -> MultiscaleField:
    s = _state(traj, t_index)
    E = reconstruct_E_at(traj.mesh, s.E, cells, medium.epsilon, order, _points_of(eval_mesh))
    return MultiscaleField(order, s.t, E_ms=E)


def reconstruct_H(traj, cells, medium: PeriodicMedium, order: int, eval_mesh, t_index: int) -> MultiscaleField:
    s = _state(traj, t_index)
    plan = ExpansionPlan(traj.mesh, cells, medium.epsilon, _points_of(eval_mesh))
    return MultiscaleField(order, s.t, H_ms=plan.magnetic(s.H, s.E_dot, order))


def reconstruct(traj, cells, medium, order, eval_mesh, t_index) -> MultiscaleField:
    """All three fields of one order at one time."""
    s = _state(traj, t_index)
    plan = ExpansionPlan(traj.mesh, cells, medium.epsilon, _points_of(eval_mesh))
    return MultiscaleField(order, s.t, plan.scalar(np.asarray(s.psi, dtype=complex), order),
                           plan.electric(s.E, order), plan.magnetic(s.H, s.E_dot, order))
