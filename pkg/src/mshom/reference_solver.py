"""Fine-mesh solve of the oscillatory problem with the true periodic coefficients."""

from __future__ import annotations

from . import mesh_fem as fem
from .cell_problems import check_alignment
from .coupled_solver import (CoupledOperators, HomogenizedTrajectory, SolverParams, SourceLike,
                             ground_state, propagate)
from .errors import DofCapError, InvalidArgumentError
from .media import PeriodicMedium, XcSpec

DEFAULT_DOF_CAP = 2_000_000


class ReferenceTrajectory(HomogenizedTrajectory):
    """Trajectory of the oscillatory problem on the fine mesh."""

    medium: PeriodicMedium | None = None


def reference_mesh(medium: PeriodicMedium, fine_divisions_per_cell: int,
                   dof_cap: int = DEFAULT_DOF_CAP) -> fem.BoxMesh:
    if fine_divisions_per_cell < 2:
        raise InvalidArgumentError("fine_divisions_per_cell must be >= 2")
    check_alignment(medium, fine_divisions_per_cell)
    n = medium.cells_per_side * fine_divisions_per_cell
    edges = 3 * n * (n + 1) ** 2
    if edges > dof_cap:
        raise DofCapError(f"reference mesh {n}^3 has {edges} edges, above the cap of {dof_cap}; "
                          "lower fine_divisions_per_cell or raise the cap")
    return fem.unit_cube_mesh(n)


def reference_operators(medium: PeriodicMedium, mesh: fem.BoxMesh, source=None, xc=None) -> CoupledOperators:
    return CoupledOperators(
        mesh,
        medium.sampler("A", physical=True),
        medium.sampler("Vc", physical=True),
        medium.sampler("eta", physical=True),
        medium.sampler("mu", inverse=True, physical=True),
        medium.N, source, xc,
    )


def run_reference(medium: PeriodicMedium, fine_divisions_per_cell: int, params: SolverParams,
                  xc: XcSpec | None = None, source: SourceLike | None = None,
                  dof_cap: int = DEFAULT_DOF_CAP, psi0=None, E0=None, E_dot0=None,
                  callback=None) -> ReferenceTrajectory:
    """Reference run from the ground state of the oscillatory Hamiltonian, ``E = E' = 0``."""
    mesh = reference_mesh(medium, fine_divisions_per_cell, dof_cap)
    ops = reference_operators(medium, mesh, source, xc)
    energy = None
    if psi0 is None:
        energy, gs = ground_state(mesh, ops.A_q, ops.vc_q)
        psi0 = gs.values
    meta = {"kind": "reference", "fine_divisions_per_cell": fine_divisions_per_cell,
            "divisions": mesh.divisions[0], "ground_energy": energy, "params": params.to_dict(),
            "xc": ops.xc.kind, "N": medium.N}
    traj = propagate(ops, params, psi0, E0, E_dot0, trajectory_cls=ReferenceTrajectory, meta=meta,
                     callback=callback)
    traj.medium = medium
    traj.meta["xc_clamped"] = ops.xc.clamped
    return traj
