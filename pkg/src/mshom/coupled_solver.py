"""Crank-Nicolson time stepping of the coupled Maxwell-Schroedinger system.

The Schroedinger equation ``i psi_t = -div(A grad psi) + (V_c + E.x + V_xc[rho]) psi``
is stepped with Crank-Nicolson on Q1 elements; the electric field obeys the
second-order form ``eta E_tt + curl(mu^-1 curl E) = F - dJ_q/dt`` discretized
with edge elements and the trapezoidal rule on ``(E, E_t)``. Each step runs an
outer fixed-point loop on ``E`` and, when an exchange-correlation model is
active, an inner density (SCF) loop with simple mixing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import mesh_fem as fem
from .errors import (ConvergenceError, CouplingDivergenceError, InvalidArgumentError,
                     SCFDivergenceError)
from .media import PeriodicMedium, SourceSpec, XcSpec, eval_source, eval_xc

log = logging.getLogger(__name__)

GROUND_STATE_MAX_ITER = 500


@dataclass(frozen=True)
class SolverParams:
    dt: float = 0.005
    T: float = 0.1
    outer_tol: float = 1e-6
    inner_tol: float = 1e-6
    outer_max: int = 30
    inner_max: int = 100
    mixing_alpha: float = 0.3
    linear_tol: float = 1e-13

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgumentError("dt must be positive")
        if not self.T >= self.dt * (1 - 1e-12):
            raise InvalidArgumentError("T must be at least dt")
        if not (self.outer_tol > 0 and self.inner_tol > 0 and self.linear_tol > 0):
            raise InvalidArgumentError("tolerances must be positive")
        if self.outer_max < 1 or self.inner_max < 1:
            raise InvalidArgumentError("iteration caps must be >= 1")
        if not 0 < self.mixing_alpha <= 1:
            raise InvalidArgumentError("mixing_alpha must lie in (0, 1]")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(n, 1):
            raise InvalidArgumentError(f"T/dt = {n} is not an integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# States and trajectories
# ---------------------------------------------------------------------------

@dataclass
class HomogenizedState:
    psi: np.ndarray      # complex nodal values
    E: np.ndarray        # edge dofs
    E_dot: np.ndarray    # edge dofs
    H: np.ndarray        # (n_nodes, 3)
    rho: np.ndarray      # nodal
    Jq: np.ndarray       # (n_nodes, 3)
    t: float


@dataclass
class StepDiagnostics:
    step: int
    outer_iterations: int
    outer_history: list
    inner_iterations: list
    inner_histories: list
    gauss_residual: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class HomogenizedTrajectory:
    """Append-only sequence of states on a uniform time grid."""

    FIELDS = ("psi", "E", "E_dot", "H", "rho", "Jq")

    def __init__(self, mesh: fem.BoxMesh, dt: float, meta: dict | None = None):
        self.mesh = mesh
        self.dt = float(dt)
        self.states: list[HomogenizedState] = []
        self.diagnostics: list[StepDiagnostics] = []
        self.meta = dict(meta or {})

    def append(self, state: HomogenizedState, diag: StepDiagnostics | None = None):
        if self.states:
            expected = self.states[-1].t + self.dt
            if abs(state.t - expected) > 1e-9 * max(1.0, abs(expected)):
                raise InvalidArgumentError(f"state at t={state.t} breaks the uniform grid (expected {expected})")
        self.states.append(state)
        if diag is not None:
            self.diagnostics.append(diag)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> HomogenizedState:
        return self.states[i]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def series(self, name: str) -> np.ndarray:
        return np.stack([getattr(s, name) for s in self.states])

    def norms(self) -> np.ndarray:
        """L2 norm of psi at every stored time."""
        M = fem.assemble_mass(self.mesh).matrix
        return np.array([np.sqrt(np.real(np.vdot(s.psi, M @ s.psi))) for s in self.states])

    def save(self, path) -> None:
        path = Path(path)
        m = self.mesh
        np.savez_compressed(
            path, origin=m.origin, extents=m.extents, divisions=m.divisions, dt=self.dt,
            t=self.times, **{f: self.series(f) for f in self.FIELDS},
            diagnostics=np.array(repr([d.to_dict() for d in self.diagnostics])),
            meta=np.array(repr(self.meta)),
        )

    @classmethod
    def load(cls, path) -> "HomogenizedTrajectory":
        import ast
        with np.load(path, allow_pickle=False) as z:
            mesh = fem.BoxMesh(z["origin"], z["extents"], z["divisions"])
            traj = cls(mesh, float(z["dt"]), ast.literal_eval(str(z["meta"])))
            arrays = {f: z[f] for f in cls.FIELDS}
            for n, t in enumerate(z["t"]):
                traj.states.append(HomogenizedState(**{f: arrays[f][n] for f in cls.FIELDS}, t=float(t)))
            traj.diagnostics = [StepDiagnostics(**d) for d in ast.literal_eval(str(z["diagnostics"]))]
        return traj


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------

SourceLike = SourceSpec | Callable[[np.ndarray, float], tuple]


class CoupledOperators:
    """Discrete operators of one Maxwell-Schroedinger problem on a box mesh.

    Coefficients may be constant tensors (homogenized problem) or samplers of
    the physical coordinate (oscillatory reference problem).
    """

    def __init__(self, mesh: fem.BoxMesh, A, vc, eta, inv_mu, N: float,
                 source: SourceLike | None = None, xc: XcSpec | None = None):
        self.mesh = mesh
        pts = mesh.quadrature_points
        self.A_q = np.ascontiguousarray(fem.sample_tensor(A, pts))
        self.eta_q = np.ascontiguousarray(fem.sample_tensor(eta, pts))
        self.vc_q = np.array(fem.sample_scalar(vc, pts))
        self.inv_mu_centre = np.array(fem.sample_tensor(inv_mu, mesh.element_centers))
        self.N = float(N)
        self.source = SourceSpec() if source is None else source
        self.xc = XcSpec() if xc is None else xc

        stiff = fem.assemble_scalar(mesh, self.A_q)
        self.Pn = stiff.prolongation
        self.stiffness = stiff.reduced_matrix
        self.mass_full = fem.assemble_mass(mesh).matrix
        self.mass = (self.Pn.T @ self.mass_full @ self.Pn).tocsr()
        self.lumped = np.asarray(self.mass_full.sum(axis=1)).ravel()

        curl = fem.assemble_curl_curl(mesh, inv_mu)
        self.Pe = curl.prolongation
        self.curl = curl.reduced_matrix
        self.edge_mass = (self.Pe.T @ fem.assemble_mass(mesh, "edge", self.eta_q).matrix @ self.Pe).tocsr()
        self.edge_mass_plain = fem.assemble_mass(mesh, "edge").matrix
        self._maxwell_cache: dict = {}
        self._x_q = pts

    # ----- Schroedinger side -----
    def potential_at_quad(self, E: np.ndarray | None, rho: np.ndarray | None) -> np.ndarray:
        """``V_c - E.zeta + V_xc`` at quadrature points, with ``zeta = -x``."""
        V = self.vc_q.copy()
        if E is not None:
            V += np.einsum("eqi,eqi->eq", fem.edge_at_quad(self.mesh, E), self._x_q)
        if rho is not None and self.xc.kind != "none":
            V += eval_xc(self.xc, fem.nodal_at_quad(self.mesh, rho))
        return V

    def hamiltonian(self, E=None, rho=None) -> sp.csr_matrix:
        Mv = fem.assemble_mass(self.mesh, "nodal", self.potential_at_quad(E, rho)).matrix
        return (self.stiffness + self.Pn.T @ Mv @ self.Pn).tocsr()

    def restrict_nodal(self, v):
        return self.Pn.T @ v

    def density(self, psi: np.ndarray) -> np.ndarray:
        return self.N * np.abs(psi) ** 2

    def l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(abs(np.real(np.vdot(v, self.mass_full @ v)))))

    # ----- Maxwell side -----
    def maxwell_matrix(self, dt: float) -> sp.csr_matrix:
        key = float(dt)
        if key not in self._maxwell_cache:
            self._maxwell_cache[key] = (self.edge_mass + (dt * dt / 4.0) * self.curl).tocsr()
        return self._maxwell_cache[key]

    def source_load(self, t: float) -> np.ndarray:
        if isinstance(self.source, SourceSpec):
            if self.source.formula == "zero":
                return np.zeros(self.mesh.n_edges)
            _, F = eval_source(self.source, self._x_q, t)
        else:
            _, F = self.source(self._x_q, t)
        return fem.edge_load(self.mesh, np.asarray(F, dtype=float))

    def current_load(self, J_nodal: np.ndarray) -> np.ndarray:
        """``(J, w)`` of a nodal 3-vector field against every edge function."""
        Jq = np.stack([fem.nodal_at_quad(self.mesh, J_nodal[:, c]) for c in range(3)], axis=-1)
        return fem.edge_load(self.mesh, Jq)

    def edge_norm(self, e: np.ndarray) -> float:
        return float(np.sqrt(max(e @ (self.edge_mass_plain @ e), 0.0)))

    def energy(self, E: np.ndarray, V: np.ndarray) -> float:
        e, v = self.Pe.T @ E, self.Pe.T @ V
        return 0.5 * float(v @ (self.edge_mass @ v) + e @ (self.curl @ e))

    def h_rate(self, E: np.ndarray) -> np.ndarray:
        """Nodal ``dH/dt = -mu^-1 curl E`` averaged from element centres."""
        _, Cu = fem.edge_basis(np.full((1, 3), 0.5), self.mesh.h)
        c = E[self.mesh.element_edges] @ Cu[0]
        return -fem._average_to_nodes(self.mesh, np.einsum("eij,ej->ei", self.inv_mu_centre, c))

    def gauss_residual(self, E: np.ndarray, rho: np.ndarray) -> float:
        """Relative weak residual of ``div(eta E) = rho`` on interior nodes."""
        etaE = np.einsum("eqij,eqj->eqi", self.eta_q, fem.edge_at_quad(self.mesh, E))
        src = fem.nodal_load(self.mesh, fem.nodal_at_quad(self.mesh, rho))
        r = self.Pn.T @ (-fem.nodal_grad_load(self.mesh, etaE) - src)
        scale = np.linalg.norm(self.Pn.T @ src)
        return float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))


def homogenized_operators(mesh: fem.BoxMesh, tensors, N: float, source=None, xc=None) -> CoupledOperators:
    return CoupledOperators(mesh, tensors.A_hat, tensors.mean_Vc, tensors.eta_hat, tensors.inv_mu_hat,
                            N, source, xc)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def ground_state(mesh: fem.BoxMesh, A_hat, potential_sampler, tol: float = 1e-10,
                 vector_tol: float = 1e-9, max_iter: int = GROUND_STATE_MAX_ITER):
    """Lowest Dirichlet eigenpair of ``-div(A grad) + V`` by shifted inverse iteration.

    Returns ``(energy, ScalarField)`` with ``int |psi|^2 = 1`` and the
    largest-magnitude dof real and positive.
    """
    pts = mesh.quadrature_points
    V_q = np.array(fem.sample_scalar(potential_sampler, pts))
    stiff = fem.assemble_scalar(mesh, A_hat, reaction_sampler=V_q)
    P = stiff.prolongation
    K = stiff.reduced_matrix
    M = (P.T @ fem.assemble_mass(mesh).matrix @ P).tocsr()
    sigma = float(V_q.min()) - 1.0
    shifted = (K - sigma * M).tocsr()
    u = np.ones(K.shape[0])
    u /= np.sqrt(u @ (M @ u))
    lam = float(u @ (K @ u))
    history = []
    for it in range(1, max_iter + 1):
        w = fem.solve_reduced(shifted, M @ u, "spd", tolerance=1e-13, x0=u / max(lam - sigma, 1e-300))
        w /= np.sqrt(w @ (M @ w))
        lam_new = float(w @ (K @ w))
        d = w - u
        dv = float(np.sqrt(d @ (M @ d)))
        rel = abs(lam_new - lam) / max(abs(lam_new), 1e-300)
        history.append(rel)
        u, lam = w, lam_new
        if rel <= tol and dv <= vector_tol:
            break
    else:
        raise ConvergenceError(f"ground state: no convergence in {max_iter} iterations", history[-1], history)
    psi = (P @ u).astype(complex)
    k = int(np.argmax(np.abs(psi)))
    psi *= np.conj(psi[k]) / abs(psi[k])
    psi[k] = abs(psi[k])
    return lam, fem.ScalarField(mesh, psi)


def quantum_current(psi: fem.ScalarField, A, N: float) -> np.ndarray:
    """Nodal ``iN[conj(psi) A grad psi - psi A grad conj(psi)]`` by lumped L2 projection."""
    mesh = psi.mesh
    v = np.asarray(psi.values, dtype=complex)
    p = fem.nodal_at_quad(mesh, v)
    g = fem.nodal_grad_at_quad(mesh, v)
    A_q = A if (isinstance(A, np.ndarray) and A.ndim == 4) else fem.sample_tensor(A, mesh.quadrature_points)
    Ag = np.einsum("eqij,eqj->eqi", A_q, g)
    J = 1j * N * (np.conj(p)[..., None] * Ag - p[..., None] * np.conj(Ag))
    scale = max(1.0, float(np.abs(J.real).max(initial=0.0)))
    assert float(np.abs(J.imag).max(initial=0.0)) <= 1e-12 * scale, "quantum current is not real"
    lumped = np.asarray(fem.assemble_mass(mesh).matrix.sum(axis=1)).ravel()
    return np.stack([fem.nodal_load(mesh, J.real[..., c]) / lumped for c in range(3)], axis=1)


@dataclass
class InnerDiagnostics:
    iterations: int
    history: list = field(default_factory=list)


def schrodinger_cn_step(ops: CoupledOperators, psi_n: np.ndarray, E_half: np.ndarray, rho_guess: np.ndarray,
                        dt: float, inner_tol: float = 1e-6, inner_max: int = 100, mixing_alpha: float = 0.3,
                        linear_tol: float = 1e-13):
    """One Crank-Nicolson step with the SCF density loop.

    The exchange-correlation potential is evaluated at the time-midpoint
    density ``(rho^n + rho^(k))/2``. Returns ``(psi_next, rho_next, InnerDiagnostics)``.
    """
    y_n = ops.restrict_nodal(psi_n)
    rho_n = ops.density(psi_n)
    rho_k = np.array(rho_guess, dtype=float)
    active = ops.xc.kind != "none"
    history = []
    y = y_n
    for k in range(1, inner_max + 1):
        H = ops.hamiltonian(E_half, 0.5 * (rho_n + rho_k) if active else None)
        lhs = (ops.mass + (0.5j * dt) * H).tocsr()
        rhs = ops.mass @ y_n - (0.5j * dt) * (H @ y_n)
        y = fem.solve_reduced(lhs, rhs, "general", tolerance=linear_tol, x0=y)
        psi = ops.Pn @ y
        rho_c = ops.density(psi)
        if not active:
            return psi, rho_c, InnerDiagnostics(1, history)
        num = ops.l2(rho_c - rho_k)
        den = ops.l2(rho_c)
        change = num / den if den > 0 else num
        history.append(change)
        if change <= inner_tol:
            return psi, rho_c, InnerDiagnostics(k, history)
        rho_k = (1.0 - mixing_alpha) * rho_k + mixing_alpha * rho_c
    raise SCFDivergenceError(f"SCF loop did not converge in {inner_max} iterations (last change {history[-1]:.3e})",
                             history[-1], history)


def maxwell_cn_step(ops: CoupledOperators, E_n: np.ndarray, E_dot_n: np.ndarray, Jq_n: np.ndarray,
                    Jq_next: np.ndarray, t_n: float, dt: float, tolerance: float = 1e-12,
                    source_loads: tuple | None = None):
    """Trapezoidal step of ``eta E'' + curl mu^-1 curl E = F - dJ/dt`` in ``(E, E')`` form."""
    Pe = ops.Pe
    if source_loads is None:
        source_loads = (ops.source_load(t_n), ops.source_load(t_n + dt))
    R = 0.5 * (source_loads[0] + source_loads[1])
    if ops.N != 0 and (np.any(Jq_n) or np.any(Jq_next)):
        R = R - ops.current_load((Jq_next - Jq_n) / dt)
    e, v = Pe.T @ E_n, Pe.T @ E_dot_n
    rhs = ops.edge_mass @ (e + dt * v) - (dt * dt / 4.0) * (ops.curl @ e) + (dt * dt / 2.0) * (Pe.T @ R)
    e1 = fem.solve_reduced(ops.maxwell_matrix(dt), rhs, "spd", tolerance=tolerance, x0=e + dt * v)
    v1 = 2.0 * (e1 - e) / dt - v
    return Pe @ e1, Pe @ v1


# ---------------------------------------------------------------------------
# Time loop
# ---------------------------------------------------------------------------

def propagate(ops: CoupledOperators, params: SolverParams, psi0: np.ndarray, E0=None, E_dot0=None,
              trajectory_cls=HomogenizedTrajectory, meta: dict | None = None,
              callback: Callable | None = None) -> HomogenizedTrajectory:
    """Run the outer field-coupling loop from the given initial data."""
    mesh = ops.mesh
    dt = params.dt
    psi = np.asarray(psi0, dtype=complex).copy()
    E = np.zeros(mesh.n_edges) if E0 is None else np.asarray(E0, dtype=float).copy()
    V = np.zeros(mesh.n_edges) if E_dot0 is None else np.asarray(E_dot0, dtype=float).copy()
    rho = ops.density(psi)
    J = quantum_current(fem.ScalarField(mesh, psi), ops.A_q, ops.N) if ops.N != 0 else np.zeros((mesh.n_nodes, 3))
    H = np.zeros((mesh.n_nodes, 3))
    traj = trajectory_cls(mesh, dt, meta)
    traj.append(HomogenizedState(psi, E, V, H, rho, J, 0.0))
    E_prev = rho_prev = None
    for n in range(params.n_steps):
        t_n = n * dt
        loads = (ops.source_load(t_n), ops.source_load(t_n + dt))
        E_k = 2.0 * E - E_prev if E_prev is not None else E.copy()
        rho_guess = rho if rho_prev is None else np.maximum(2.0 * rho - rho_prev, 0.0)
        outer_hist, inner_its, inner_hists = [], [], []
        for k in range(1, params.outer_max + 1):
            E_half = 0.5 * (E + E_k)
            psi_new, rho_new, inner = schrodinger_cn_step(
                ops, psi, E_half, rho_guess, dt, params.inner_tol, params.inner_max,
                params.mixing_alpha, params.linear_tol)
            inner_its.append(inner.iterations)
            inner_hists.append(inner.history)
            rho_guess = rho_new
            if ops.N != 0:
                J_new = quantum_current(fem.ScalarField(mesh, psi_new), ops.A_q, ops.N)
            else:
                J_new = np.zeros_like(J)
            E_new, V_new = maxwell_cn_step(ops, E, V, J, J_new, t_n, dt, source_loads=loads)
            num = ops.edge_norm(E_new - E_k)
            den = ops.edge_norm(E_new)
            change = num / den if den > 0 else num
            outer_hist.append(change)
            E_k = E_new
            if change <= params.outer_tol:
                break
        else:
            raise CouplingDivergenceError(
                f"outer loop did not converge at step {n + 1} (last change {outer_hist[-1]:.3e})",
                step=n + 1, residual=outer_hist[-1], history=outer_hist)
        H = H + 0.5 * dt * (ops.h_rate(E) + ops.h_rate(E_new))
        E_prev, rho_prev = E, rho
        E, V, psi, rho, J = E_new, V_new, psi_new, rho_new, J_new
        g = ops.gauss_residual(E, rho)
        diag = StepDiagnostics(n + 1, len(outer_hist), outer_hist, inner_its, inner_hists, g)
        traj.append(HomogenizedState(psi, E, V, H, rho, J, (n + 1) * dt), diag)
        log.debug("step %d: outer %d inner %s gauss %.2e", n + 1, len(outer_hist), inner_its, g)
        if callback is not None:
            callback(traj)
    return traj


def run(medium: PeriodicMedium, tensors, params: SolverParams, xc: XcSpec | None = None,
        coarse_divisions: int = 8, source: SourceLike | None = None, psi0: np.ndarray | None = None,
        E0=None, E_dot0=None, callback=None) -> HomogenizedTrajectory:
    """Homogenized run on the unit cube; by default starts from the ground state with ``E = E' = 0``."""
    mesh = fem.unit_cube_mesh(coarse_divisions)
    ops = homogenized_operators(mesh, tensors, medium.N, source, xc)
    energy = None
    if psi0 is None:
        energy, gs = ground_state(mesh, tensors.A_hat, tensors.mean_Vc)
        psi0 = gs.values
    meta = {"kind": "homogenized", "coarse_divisions": coarse_divisions, "ground_energy": energy,
            "params": params.to_dict(), "xc": ops.xc.kind, "N": medium.N}
    traj = propagate(ops, params, psi0, E0, E_dot0, meta=meta, callback=callback)
    traj.meta["xc_clamped"] = ops.xc.clamped
    return traj
