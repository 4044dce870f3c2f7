import numpy as np
import pytest

from mshom import cell_problems as cp, effective as ef, media


def scalar_only_cells(medium, divisions, which="A"):
    """Cell set holding just the periodic first-order scalar functions of one coefficient."""
    c = cp._Cell(medium, divisions)
    cells = cp.CellFunctionSet(c.mesh)
    key = {"A": "a", "eta": "eta", "mu": "mu"}[which]
    for k in range(3):
        cells.fields[f"theta1_{key}_periodic_{k}"] = cp.solve_scalar_first(medium, which, k, "periodic", ctx=c)
    return cells


@pytest.fixture(scope="module")
def case_low():
    m = media.case_medium("contrast-low")
    cells = cp.solve_all(m, 8)
    return m, cells, ef.homogenize_all(m, cells)


def test_constant_coefficient_exact():
    m = media.PeriodicMedium.cube(0.5, a_in=2.5 * np.eye(3), a_out=2.5 * np.eye(3),
                                  mu_in=0.2 * np.eye(3), mu_out=0.2 * np.eye(3))
    cells = cp.solve_all(m, 4)
    t = ef.homogenize_all(m, cells)
    assert np.array_equal(t.A_hat, 2.5 * np.eye(3))
    assert np.allclose(t.inv_mu_hat, 5.0 * np.eye(3), rtol=0, atol=1e-14)
    assert t.asymmetry["A_hat"] == 0.0


def test_laminate_means():
    lam = media.PeriodicMedium.laminate(0, 0.5, a_in=0.1 * np.eye(3), a_out=np.eye(3))
    A = ef.homogenize_scalar(lam, "A", scalar_only_cells(lam, 8), "periodic")
    assert A[0, 0] == pytest.approx(2 * 0.1 / 1.1, rel=1e-3)
    assert A[1, 1] == pytest.approx(0.55, rel=1e-3)
    assert A[2, 2] == pytest.approx(0.55, rel=1e-3)


def test_cube_inclusion_tensor_inside_bracket(case_low):
    m, _, t = case_low
    A = t.A_hat
    assert np.abs(A - np.diag(np.diag(A))).max() < 1e-10
    assert np.ptp(np.diag(A)) < 1e-10
    harm, arith = ef.voigt_reuss(m, "A")
    assert harm[0] == pytest.approx(1 / (0.125 / 0.1 + 0.875), rel=1e-12)
    assert arith[0] == pytest.approx(0.8875)
    assert harm[0] < A[0, 0] < arith[0]


def test_inverse_permeability_cubic_and_spd(case_low):
    _, _, t = case_low
    T = t.inv_mu_hat
    assert np.abs(T - np.diag(np.diag(T))).max() < 1e-6 * np.trace(T)
    assert np.ptp(np.diag(T)) < 1e-8 * T[0, 0]
    assert np.linalg.eigvalsh(T).min() > 0


def test_mean_potential():
    assert ef.mean_potential(media.case_medium("contrast-low")) == pytest.approx(0.875)
    assert ef.mean_potential(media.constant_medium(vc=3.0)) == pytest.approx(3.0)
    tiny = media.PeriodicMedium.cube(1e-4, vc_in=0.0, vc_out=1.0)
    assert ef.mean_potential(tiny) == pytest.approx(1.0, abs=1e-11)


def test_certificate_constant_medium():
    m = media.constant_medium()
    t = ef.homogenize_all(m, cp.solve_all(m, 4))
    rep = ef.certify(t, m)
    assert rep.ok and all(c.passed for c in rep.checks)
    assert all(v == 0.0 for v in t.asymmetry.values())


def test_certificate_case(case_low):
    m, _, t = case_low
    assert ef.certify(t, m).ok


def test_corrupted_tensor_fails_symmetry(case_low):
    m, _, t = case_low
    bad = ef.EffectiveTensors.from_dict(t.to_dict())
    bad.A_hat = bad.A_hat.copy()
    bad.A_hat[0, 1] += 1e-3
    rep = ef.certify(bad, m)
    assert not rep.ok
    assert "A_hat.symmetry" in [c.name for c in rep.failures()]


def test_tensors_dict_round_trip(case_low):
    _, _, t = case_low
    back = ef.EffectiveTensors.from_dict(t.to_dict())
    for n in ef.EffectiveTensors.NAMES:
        assert np.array_equal(getattr(back, n), getattr(t, n))
    assert back.mean_Vc == t.mean_Vc


def test_periodic_and_dirichlet_variants_bracket(case_low):
    m, cells, _ = case_low
    for variant in ("periodic", "dirichlet"):
        A = ef.homogenize_scalar(m, "A", cells, variant)
        harm, arith = ef.voigt_reuss(m, "A")
        assert np.all(np.diag(A) > harm) and np.all(np.diag(A) < arith)
