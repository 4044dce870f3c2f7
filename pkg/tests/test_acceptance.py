"""Acceptance gate: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
when output capture is on) or directly as ``python tests/test_acceptance.py``.
Tolerances are pinned here and must not be relaxed to make a line pass.
"""

import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from mshom import cell_problems as cp, coupled_solver as cs, effective as ef, media, mesh_fem as fem
from mshom import metrics_io as mio, reconstruction as rc, reference_solver as rs

CASES = ("contrast-low", "contrast-mid", "contrast-high")
DESK = dict(dt=0.005, T=0.1)
RESULTS: dict = {}
_writer = {"line": print}


@pytest.fixture(autouse=True)
def _terminal(pytestconfig):
    tr = pytestconfig.pluginmanager.getplugin("terminalreporter")
    if tr is not None:
        _writer["line"] = lambda s: (tr.ensure_newline(), tr.write_line(s))
    yield


def report(k: int, ok: bool, detail: str):
    RESULTS[k] = ok
    _writer["line"](f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
    return ok


# ----- shared computations -----

@lru_cache(maxsize=None)
def case_cells(case: str, divisions: int = 16):
    m = media.case_medium(case)
    cells = cp.solve_all(m, divisions)
    return m, cells, ef.homogenize_all(m, cells)


@lru_cache(maxsize=None)
def case_compare(case: str):
    """Cell 16, coarse 8, fine 8 per cell (32^3), eps 1/4, N 10."""
    m, cells, tens = case_cells(case)
    p = cs.SolverParams(**DESK)
    hom = cs.run(m, tens, p, coarse_divisions=8)
    ref = rs.run_reference(m, 8, p)
    rec = mio.reconstruction_series(hom, cells, m, ref.mesh)
    return mio.error_table(ref, rec, p.dt, case), hom, ref


def scalar_first_cells(medium, divisions):
    c = cp._Cell(medium, divisions)
    cells = cp.CellFunctionSet(c.mesh)
    for k in range(3):
        cells.fields[f"theta1_a_periodic_{k}"] = cp.solve_scalar_first(medium, "A", k, "periodic", ctx=c)
    return cells


# ----- criteria -----

def test_constant_medium_identity_pipeline():
    t0 = time.perf_counter()
    m = media.constant_medium(epsilon=0.25, N=10.0, vc=1.0)
    cells = cp.solve_all(m, 8)
    cell_sup = max(np.abs(f.values).max() for f in cells.fields.values())
    tens = ef.homogenize_all(m, cells)
    tens_dev = max(np.abs(np.asarray(getattr(tens, n)) - np.eye(3)).max() for n in tens.NAMES)
    p = cs.SolverParams(dt=0.005, T=0.05)
    hom = cs.run(m, tens, p, coarse_divisions=8)
    ref = rs.run_reference(m, 4, p)
    rec = mio.reconstruction_series(hom, cells, m, ref.mesh)
    # orders against each other on the fine mesh, and order 2 against the run at the coarse nodes
    spread = max(np.abs(rec[o][f] - rec[0][f]).max() for o in (1, 2) for f in ("rho", "E"))
    own = max(np.abs(rc.reconstruct(hom, cells, m, 2, hom.mesh, n).psi_ms - hom[n].psi).max()
              for n in range(len(hom)))
    table = mio.error_table(ref, rec, p.dt, "constant")
    worst = max(table.entries("constant"))
    elapsed = time.perf_counter() - t0

    # same comparison with the homogenized run on the reference mesh isolates the coarse-mesh error
    hom_fine = cs.run(m, tens, p, coarse_divisions=16)
    rec_fine = mio.reconstruction_series(hom_fine, cells, m, ref.mesh)
    same_mesh = max(mio.error_table(ref, rec_fine, p.dt, "same").entries("same"))

    ok = (cell_sup <= 1e-8 and tens_dev <= 1e-10 and spread <= 1e-8 and own <= 1e-8 and worst <= 1e-6
          and elapsed <= 120)
    report(1, ok, f"cell sup {cell_sup:.1e}, tensor dev {tens_dev:.1e}, order spread {max(spread, own):.1e}, "
                  f"max table entry {worst:.3e} (<= 1e-6; same-mesh {same_mesh:.1e}), {elapsed:.0f} s")
    assert ok


def test_laminate_oracle():
    t0 = time.perf_counter()
    lam = media.PeriodicMedium.laminate(0, 0.5, a_in=0.1 * np.eye(3), a_out=np.eye(3))
    exact = np.diag([2 * 0.1 / 1.1, 0.55, 0.55])
    errs = {}
    for n in (8, 16, 32):
        A = ef.homogenize_scalar(lam, "A", scalar_first_cells(lam, n), "periodic")
        errs[n] = float(np.max(np.abs(np.diag(A) - np.diag(exact)) / np.diag(exact)))
    floor = 1e-12
    if max(errs.values()) <= floor:
        # the discrete solution is exact: the h^2 bound holds with a vanishing constant
        rate_ok, rate = True, "exact to round-off at 8/16/32"
    else:
        rates = [np.log2(errs[a] / errs[b]) for a, b in ((8, 16), (16, 32))]
        rate_ok, rate = min(rates) >= 1.5, "orders " + ", ".join(f"{r:.2f}" for r in rates)
    elapsed = time.perf_counter() - t0
    ok = errs[32] <= 1e-3 and rate_ok and elapsed <= 60
    report(2, ok, f"rel err at 32 {errs[32]:.1e}, {rate}, {elapsed:.1f} s")
    assert ok


def test_effective_tensor_properties():
    t0 = time.perf_counter()
    worst_asym, min_eig, viol = 0.0, np.inf, -np.inf
    failures = []
    for case in CASES:
        m, _, tens = case_cells(case)
        for name in tens.NAMES:
            T = np.asarray(getattr(tens, name))
            worst_asym = max(worst_asym, tens.asymmetry[name] / max(1.0, np.abs(T).max()))
        cert = ef.certify(tens, m)
        failures += [f"{case}:{c.name}" for c in cert.failures()]
        for name, which, inv in (("A_hat", "A", False), ("eta_hat", "eta", False), ("mu_hat", "mu", False),
                                 ("inv_eta_hat", "eta", True), ("inv_mu_hat", "mu", True)):
            T = np.asarray(getattr(tens, name))
            eig = np.linalg.eigvalsh(T)
            min_eig = min(min_eig, eig.min())
            harm, arith = ef.voigt_reuss(m, which, inv)
            viol = max(viol, float(np.max(np.maximum(harm - np.diag(T), np.diag(T) - arith) / arith)))
    elapsed = time.perf_counter() - t0
    ok = worst_asym <= 1e-10 and min_eig > 0 and viol <= 1e-9 and not failures and elapsed <= 300
    report(3, ok, f"asymmetry {worst_asym:.1e}, min eigenvalue {min_eig:.3e}, bracket slack {viol:.1e}, "
                  f"{elapsed:.0f} s")
    assert ok


def test_unitarity_and_field_energy():
    m, _, tens = case_cells("contrast-low")
    traj = cs.run(m, tens, cs.SolverParams(**DESK), coarse_divisions=8)
    n = traj.norms()
    drift = float(np.abs(n / n[0] - 1).max())

    ops = cs.homogenized_operators(fem.unit_cube_mesh(8), tens, 0.0, media.SourceSpec("zero"))
    s = lambda x: np.sin(np.pi * x)
    E0 = fem.edge_interpolant(ops.mesh, lambda p: np.stack(
        [s(p[:, 1]) * s(p[:, 2]), s(p[:, 0]) * s(p[:, 2]), s(p[:, 0]) * s(p[:, 1])], 1))
    _, gs = cs.ground_state(ops.mesh, tens.A_hat, tens.mean_Vc)
    field = cs.propagate(ops, cs.SolverParams(**DESK), gs.values, E0=E0)
    energy = np.array([ops.energy(st.E, st.E_dot) for st in field])
    per_step = float(np.max(np.abs(np.diff(energy)) / energy[:-1]))
    ok = drift <= 1e-8 and per_step <= 1e-8 and energy[0] > 0
    report(4, ok, f"norm drift {drift:.1e}, field energy change per step {per_step:.1e}")
    assert ok


def test_coupling_with_exchange_correlation():
    t0 = time.perf_counter()
    m, _, tens = case_cells("contrast-low")
    p = cs.SolverParams(outer_tol=1e-6, inner_tol=1e-6, mixing_alpha=0.3, **DESK)
    traj = cs.run(m, tens, p, media.XcSpec("cube-root"), coarse_divisions=8)
    outer = max(d.outer_iterations for d in traj.diagnostics)
    inner = max(max(d.inner_iterations) for d in traj.diagnostics)
    elapsed = time.perf_counter() - t0
    ok = outer <= 15 and inner <= 30 and elapsed <= 600
    report(5, ok, f"max outer {outer}, max inner {inner}, {elapsed:.0f} s")
    assert ok


def test_error_ordering():
    t0 = time.perf_counter()
    table, _, _ = case_compare("contrast-low")
    row = table.rows["contrast-low"]
    order = table.ordered("contrast-low")
    r_h1 = row["rho_H1"][2] / row["rho_H1"][0]
    r_hc = row["E_Hcurl"][2] / row["E_Hcurl"][0]
    elapsed = time.perf_counter() - t0
    ok = all(order.values()) and r_h1 <= 0.7 and r_hc <= 0.7 and elapsed <= 1800
    cols = ", ".join(f"{c} " + "/".join(f"{v:.4f}" for v in row[c]) for c in mio.COLUMNS)
    report(6, ok, f"{cols}; ordered {sum(order.values())}/4, e2/e0 H1 {r_h1:.3f}, Hcurl {r_hc:.3f} (<= 0.7)")
    assert ok


def test_contrast_monotonicity():
    e0 = [case_compare(c)[0].rows[c]["rho_L2"][0] for c in CASES]
    ok = e0[0] < e0[1] < e0[2]
    report(7, ok, "rho L2 e0 " + " < ".join(f"{v:.4f}" for v in e0))
    assert ok


def test_corrector_order_scaling():
    coarse = fem.unit_cube_mesh(8)
    X = coarse.node_coords
    traj = cs.HomogenizedTrajectory(coarse, 0.01)
    z = np.zeros(coarse.n_edges)
    for n in range(2):
        psi = (1 + X[:, 0] ** 2 + X[:, 1] * X[:, 2]) * np.exp(-0.01j * n)
        traj.append(cs.HomogenizedState(psi, z, z, np.zeros((coarse.n_nodes, 3)), np.abs(psi) ** 2,
                                        np.zeros((coarse.n_nodes, 3)), 0.01 * n))
    _, cells, _ = case_cells("contrast-low")
    pts = np.random.default_rng(0).uniform(0.05, 0.95, (20000, 3))
    diffs = []
    for eps in (1 / 4, 1 / 8, 1 / 16):
        m = media.case_medium("contrast-low", epsilon=eps)
        d = [rc.reconstruct_psi(traj, cells, m, 2, pts, 1).psi_ms - rc.reconstruct_psi(traj, cells, m, 1, pts, 1).psi_ms]
        diffs.append(float(np.linalg.norm(d)))
    ratios = [diffs[0] / diffs[1], diffs[1] / diffs[2]]
    ok = all(3.2 <= r <= 4.8 for r in ratios)
    report(8, ok, "psi (order 2 - order 1) ratios under eps halving " + ", ".join(f"{r:.2f}" for r in ratios))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
