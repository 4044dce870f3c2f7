import numpy as np
import pytest

from mshom import coupled_solver as cs, effective as ef, media, reference_solver as rs
from mshom.errors import DofCapError, InvalidArgumentError, MisalignmentError


def test_constant_medium_reference_equals_homogenized():
    m = media.constant_medium(N=10.0)
    params = cs.SolverParams(dt=0.005, T=0.02)
    ref = rs.run_reference(m, 4, params)
    hom = cs.run(m, ef.EffectiveTensors.constant(m), params, coarse_divisions=16)
    assert ref.mesh.same_as(hom.mesh)
    assert ref.meta["ground_energy"] == pytest.approx(hom.meta["ground_energy"], rel=1e-12)
    for a, b in zip(ref, hom):
        assert np.abs(a.psi - b.psi).max() < 1e-10
        assert np.abs(a.E - b.E).max() <= 1e-10 * max(1.0, np.abs(b.E).max())


def test_coarse_period_runs_and_conserves_norm():
    m = media.case_medium("contrast-low", epsilon=0.5, N=0.0)
    ref = rs.run_reference(m, 8, cs.SolverParams(dt=0.005, T=0.02))
    assert ref.mesh.divisions == (16, 16, 16)
    assert isinstance(ref, rs.ReferenceTrajectory) and ref.medium is m
    n = ref.norms()
    assert np.abs(n - 1.0).max() < 1e-10


def test_misaligned_fine_mesh():
    with pytest.raises(MisalignmentError):
        rs.reference_mesh(media.case_medium("contrast-low"), 3)


def test_too_few_divisions():
    with pytest.raises(InvalidArgumentError):
        rs.reference_mesh(media.case_medium("contrast-low"), 1)


def test_dof_cap():
    m = media.case_medium("contrast-low")
    assert rs.reference_mesh(m, 4).divisions == (16, 16, 16)
    with pytest.raises(DofCapError):
        rs.reference_mesh(m, 4, dof_cap=3 * 16 * 17 ** 2 - 1)


def test_reference_uses_oscillating_coefficients():
    m = media.case_medium("contrast-low")
    mesh = rs.reference_mesh(m, 4)
    ops = rs.reference_operators(m, mesh)
    a = ops.A_q[..., 0, 0]
    assert set(np.round(np.unique(a), 12)) == {0.1, 1.0}
    assert np.mean(a == 0.1) == pytest.approx(0.125)
