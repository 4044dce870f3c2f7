import numpy as np
import pytest

from mshom import coupled_solver as cs, effective as ef, media, mesh_fem as fem
from mshom.errors import CouplingDivergenceError, InvalidArgumentError, SCFDivergenceError


def const_ops(n=4, N=0.0, source=None, xc=None, vc=0.0):
    m = media.constant_medium(N=N, vc=vc)
    return cs.homogenized_operators(fem.unit_cube_mesh(n), ef.EffectiveTensors.constant(m), N, source, xc)


def random_edge(mesh, seed):
    u = np.random.default_rng(seed).normal(size=mesh.n_edges)
    u[mesh.boundary_edges] = 0.0
    return u


# ----- parameters and trajectories -----

@pytest.mark.parametrize("kw", [{"dt": 0.0}, {"dt": 0.03, "T": 0.1}, {"mixing_alpha": 0.0},
                                {"outer_max": 0}, {"inner_tol": -1.0}, {"T": 0.001}])
def test_params_validation(kw):
    with pytest.raises(InvalidArgumentError):
        cs.SolverParams(**kw)


def test_params_steps():
    assert cs.SolverParams(dt=0.005, T=0.1).n_steps == 20


def test_trajectory_grid_and_round_trip(tmp_path):
    mesh = fem.unit_cube_mesh(2)
    traj = cs.HomogenizedTrajectory(mesh, 0.1, {"kind": "test"})
    z = lambda *s: np.zeros(s)
    for n in range(3):
        psi = np.full(mesh.n_nodes, 1 + 1j * n)
        traj.append(cs.HomogenizedState(psi, z(mesh.n_edges) + n, z(mesh.n_edges), z(mesh.n_nodes, 3),
                                        np.abs(psi) ** 2, z(mesh.n_nodes, 3), 0.1 * n),
                    cs.StepDiagnostics(n, 1, [0.0], [1], [[]], 0.5) if n else None)
    with pytest.raises(InvalidArgumentError):
        traj.append(cs.HomogenizedState(psi, z(mesh.n_edges), z(mesh.n_edges), z(mesh.n_nodes, 3),
                                        z(mesh.n_nodes), z(mesh.n_nodes, 3), 0.35))
    traj.save(tmp_path / "t.npz")
    back = cs.HomogenizedTrajectory.load(tmp_path / "t.npz")
    assert back.mesh.same_as(mesh) and back.dt == 0.1 and back.meta == {"kind": "test"}
    assert np.allclose(back.times, [0.0, 0.1, 0.2])
    for f in cs.HomogenizedTrajectory.FIELDS:
        assert np.array_equal(back.series(f), traj.series(f))
    assert [d.step for d in back.diagnostics] == [1, 2]


# ----- ground state -----

@pytest.fixture(scope="module")
def laplace_ground_state():
    return cs.ground_state(fem.unit_cube_mesh(16), np.eye(3), 0.0)


def test_ground_state_energy(laplace_ground_state):
    lam, psi = laplace_ground_state
    assert abs(lam - 3 * np.pi ** 2) <= 0.02 * 3 * np.pi ** 2
    M = fem.assemble_mass(psi.mesh).matrix
    assert np.real(np.vdot(psi.values, M @ psi.values)) == pytest.approx(1.0, abs=1e-12)


def test_ground_state_constant_shift(laplace_ground_state):
    lam, psi = laplace_ground_state
    lam2, psi2 = cs.ground_state(psi.mesh, np.eye(3), 2.5)
    assert lam2 - lam == pytest.approx(2.5, abs=1e-8)
    assert np.abs(psi2.values - psi.values).max() < 1e-7


def test_ground_state_phase_deterministic():
    mesh = fem.unit_cube_mesh(6)
    a = cs.ground_state(mesh, np.eye(3), lambda x: x[..., 0])[1].values
    b = cs.ground_state(mesh, np.eye(3), lambda x: x[..., 0])[1].values
    assert np.array_equal(a, b)
    k = np.argmax(np.abs(a))
    assert a[k].imag == 0.0 and a[k].real > 0


# ----- quantum current -----

def test_real_wavefunction_carries_no_current():
    mesh = fem.unit_cube_mesh(4)
    x = mesh.node_coords
    J = cs.quantum_current(fem.ScalarField(mesh, np.sin(np.pi * x[:, 0]) + 0j), np.eye(3), 10.0)
    assert np.abs(J).max() == 0.0


def test_plane_wave_current():
    mesh = fem.unit_cube_mesh(16)
    k = np.array([np.pi, 0.0, 0.0])
    psi = fem.ScalarField(mesh, np.exp(1j * mesh.node_coords @ k))
    N = 10.0
    J = cs.quantum_current(psi, np.eye(3), N)
    expected = -2 * N * k
    assert np.abs(J - expected).max() <= 0.05 * np.linalg.norm(expected)


def test_current_gauge_invariant():
    mesh = fem.unit_cube_mesh(4)
    x = mesh.node_coords
    psi = np.exp(1j * (x[:, 0] + 2 * x[:, 1] ** 2)) * (1 + x[:, 2])
    J1 = cs.quantum_current(fem.ScalarField(mesh, psi), np.diag([1.0, 2.0, 3.0]), 3.0)
    J2 = cs.quantum_current(fem.ScalarField(mesh, psi * np.exp(0.7j)), np.diag([1.0, 2.0, 3.0]), 3.0)
    assert np.abs(J1 - J2).max() <= 1e-12 * max(1.0, np.abs(J1).max())


# ----- Schroedinger step -----

def test_crank_nicolson_unitary():
    ops = const_ops(4, vc=1.5)
    mesh = ops.mesh
    rng = np.random.default_rng(0)
    psi = rng.normal(size=mesh.n_nodes) + 1j * rng.normal(size=mesh.n_nodes)
    psi[mesh.boundary_nodes] = 0
    n0 = ops.l2(psi)
    for _ in range(5):
        psi, _, d = cs.schrodinger_cn_step(ops, psi, np.zeros(mesh.n_edges), ops.density(psi), 0.01)
        assert d.iterations == 1
        assert abs(ops.l2(psi) - n0) <= 1e-12 * n0


def test_ground_state_is_stationary():
    ops = const_ops(6, vc=0.875)
    lam, gs = cs.ground_state(ops.mesh, np.eye(3), 0.875)
    dt = 0.01
    psi, _, _ = cs.schrodinger_cn_step(ops, gs.values, np.zeros(ops.mesh.n_edges), ops.density(gs.values), dt)
    cayley = (1 - 0.5j * lam * dt) / (1 + 0.5j * lam * dt)
    # the eigenvector itself is converged to ~1e-9 in the mass norm
    assert np.abs(np.abs(psi) - np.abs(gs.values)).max() < 1e-8
    assert np.abs(psi - cayley * gs.values).max() < 1e-8


def test_scf_cap_raises():
    ops = const_ops(4, N=10.0, xc=media.XcSpec("cube-root"))
    lam, gs = cs.ground_state(ops.mesh, np.eye(3), 0.0)
    with pytest.raises(SCFDivergenceError) as info:
        cs.schrodinger_cn_step(ops, gs.values, np.zeros(ops.mesh.n_edges), np.zeros(ops.mesh.n_nodes), 0.005,
                               inner_max=2)
    assert len(info.value.history) == 2


# ----- Maxwell step -----

def test_maxwell_zero_data_stays_zero():
    ops = const_ops(3, source=media.SourceSpec("zero"))
    z = np.zeros(ops.mesh.n_edges)
    J = np.zeros((ops.mesh.n_nodes, 3))
    E, V = cs.maxwell_cn_step(ops, z, z, J, J, 0.0, 0.01)
    assert not np.any(E) and not np.any(V)


def test_maxwell_energy_conserved():
    ops = const_ops(4, source=media.SourceSpec("zero"))
    E, V = random_edge(ops.mesh, 1), random_edge(ops.mesh, 2)
    J = np.zeros((ops.mesh.n_nodes, 3))
    e0 = ops.energy(E, V)
    for n in range(10):
        before = ops.energy(E, V)
        E, V = cs.maxwell_cn_step(ops, E, V, J, J, n * 0.02, 0.02)
        assert abs(ops.energy(E, V) - before) <= 1e-9 * e0


def test_maxwell_second_order_in_time():
    def source(x, t):
        prof = np.stack([np.sin(np.pi * x[..., 1]), np.cos(np.pi * x[..., 2]), x[..., 0] ** 2], axis=-1)
        return np.sin(3 * t) * prof, 3 * np.cos(3 * t) * prof

    ops = const_ops(4, source=source)
    J = np.zeros((ops.mesh.n_nodes, 3))
    T = 0.4

    def integrate(dt):
        E = V = np.zeros(ops.mesh.n_edges)
        for n in range(int(round(T / dt))):
            E, V = cs.maxwell_cn_step(ops, E, V, J, J, n * dt, dt, tolerance=1e-14)
        return E

    ref = integrate(T / 512)
    errs = [ops.edge_norm(integrate(T / m) - ref) for m in (4, 8, 16)]
    for a, b in zip(errs, errs[1:]):
        assert 4 * 0.8 <= a / b <= 4 * 1.2


# ----- coupled loop -----

def test_decoupled_field_matches_maxwell_only_run():
    ops = const_ops(4, N=0.0)
    params = cs.SolverParams(dt=0.01, T=0.05)
    lam, gs = cs.ground_state(ops.mesh, np.eye(3), 0.0)
    traj = cs.propagate(ops, params, gs.values)
    E = V = np.zeros(ops.mesh.n_edges)
    J = np.zeros((ops.mesh.n_nodes, 3))
    for n in range(params.n_steps):
        E, V = cs.maxwell_cn_step(ops, E, V, J, J, n * params.dt, params.dt)
    assert ops.edge_norm(traj[-1].E - E) <= 1e-10 * ops.edge_norm(E)
    assert np.abs(traj.norms() - 1.0).max() < 1e-10


def test_zero_source_without_electrons_keeps_field_zero():
    ops = const_ops(4, N=0.0, source=media.SourceSpec("zero"))
    lam, gs = cs.ground_state(ops.mesh, np.eye(3), 0.0)
    traj = cs.propagate(ops, cs.SolverParams(dt=0.01, T=0.05), gs.values)
    assert all(not np.any(s.E) for s in traj)
    assert np.abs(traj.norms() - 1.0).max() < 1e-10
    assert all(d.outer_iterations == 1 for d in traj.diagnostics)


def test_outer_cap_raises_with_step():
    ops = const_ops(4, N=10.0)
    lam, gs = cs.ground_state(ops.mesh, np.eye(3), 0.0)
    with pytest.raises(CouplingDivergenceError) as info:
        cs.propagate(ops, cs.SolverParams(dt=0.005, T=0.01, outer_max=1), gs.values)
    assert info.value.step == 1


@pytest.fixture(scope="module")
def desk_run():
    m = media.case_medium("contrast-low")
    from mshom import cell_problems as cp
    cells = cp.solve_all(m, 8)
    return cs.run(m, ef.homogenize_all(m, cells), cs.SolverParams(dt=0.005, T=0.1))


def test_desk_run_outer_loop_cap(desk_run):
    assert len(desk_run) == 21
    assert max(d.outer_iterations for d in desk_run.diagnostics) <= 10
    assert desk_run.meta["ground_energy"] > 0


def test_desk_run_conserves_norm(desk_run):
    n = desk_run.norms()
    assert np.abs(n - n[0]).max() <= 1e-8 * n[0]


def test_desk_run_records_fields(desk_run):
    s = desk_run[-1]
    assert np.abs(s.E).max() > 0 and np.abs(s.H).max() > 0
    assert np.allclose(s.rho, 10.0 * np.abs(s.psi) ** 2)
    assert all(np.isfinite(d.gauss_residual) for d in desk_run.diagnostics)
