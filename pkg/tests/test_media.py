import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mshom import media
from mshom.errors import InvalidArgumentError


def test_case_values_inside_and_outside():
    m = media.case_medium("contrast-low")
    assert np.allclose(media.sample(m, "A", [0.5, 0.5, 0.5]), 0.1 * np.eye(3))
    assert np.allclose(media.sample(m, "mu", [0.01, 0.01, 0.01]), 0.01 * np.eye(3))
    assert media.sample(m, "Vc", [0.5, 0.5, 0.5]) == 0.0
    assert media.sample(m, "Vc", [0.05, 0.5, 0.5]) == 1.0


def test_sample_wraps_periodically():
    m = media.case_medium("contrast-mid")
    xi = np.array([[0.3, 0.6, 0.4], [0.1, 0.9, 0.2]])
    assert np.allclose(media.sample(m, "A", xi), media.sample(m, "A", xi + [2, -1, 3]))


def test_physical_sampler_scales_by_epsilon():
    m = media.case_medium("contrast-low", epsilon=0.25)
    x = np.array([[0.125, 0.125, 0.125], [0.02, 0.02, 0.02]])
    assert np.allclose(m.sampler("A", physical=True)(x)[0], 0.1 * np.eye(3))
    assert np.allclose(m.sampler("A", physical=True)(x)[1], np.eye(3))
    assert np.allclose(m.sampler("mu", inverse=True)(np.array([0.0, 0.0, 0.0])), 100 * np.eye(3))


def test_symmetric_case_certified():
    assert media.validate_symmetry(media.case_medium("contrast-low"))


def test_off_centre_inclusion_violates_mirror_symmetry():
    m = media.PeriodicMedium.cube(0.5, center=(0.4, 0.5, 0.5))
    rep = media.validate_symmetry(m)
    assert not rep
    assert [v[0] for v in rep.violations] == ["mirror"]


def test_off_diagonal_tensor_violates_diagonal_hypothesis():
    a = np.eye(3)
    a[0, 1] = a[1, 0] = 0.1
    rep = media.validate_symmetry(media.PeriodicMedium.cube(0.5, a_out=a))
    assert [v[0] for v in rep.violations] == ["diagonal"]


@pytest.mark.parametrize("kw", [
    {"epsilon": 0.3}, {"epsilon": 0.0}, {"N": -1.0},
    {"a_in": -np.eye(3)}, {"mu_out": np.array([[1.0, 0.5, 0], [0, 1, 0], [0, 0, 1]])},
    {"lower": (0.5, 0.2, 0.2), "upper": (0.4, 0.8, 0.8)},
])
def test_invalid_media(kw):
    with pytest.raises(InvalidArgumentError):
        media.PeriodicMedium(**kw)


def test_unknown_case():
    with pytest.raises(InvalidArgumentError):
        media.case_medium("nope")


def test_contrast_sharpens_across_presets():
    a = [media.CASES[c]["a_in"] for c in ("contrast-low", "contrast-mid", "contrast-high")]
    mu = [media.CASES[c]["mu_out"] for c in ("contrast-low", "contrast-mid", "contrast-high")]
    assert a == sorted(a, reverse=True) and mu == sorted(mu, reverse=True)


def test_inclusion_fraction():
    assert media.case_medium("contrast-low").inclusion_fraction == pytest.approx(0.125)
    assert media.PeriodicMedium.laminate(0, 0.5).inclusion_fraction == pytest.approx(0.5)


# ----- source -----

def test_source_vanishes_at_start():
    f, F = media.eval_source(media.SourceSpec(), np.random.default_rng(0).uniform(size=(5, 3)), 0.0)
    assert np.all(f == 0) and np.all(F == 0)


def test_source_value_at_unit_time():
    f, _ = media.eval_source(media.SourceSpec(amplitude=1000.0), np.zeros(3), 1.0)
    assert np.allclose(f, [2000.0, 2000.0, 2000.0])


def test_source_negative_time():
    with pytest.raises(InvalidArgumentError):
        media.eval_source(media.SourceSpec(), np.zeros(3), -0.1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0, 2))
def test_source_divergence_free(x, t):
    # central differences of a quadratic profile are exact up to round-off
    x = np.array(x)
    h = 1e-3
    spec = media.SourceSpec()
    div = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        div += (media.eval_source(spec, x + e, t)[0][k] - media.eval_source(spec, x - e, t)[0][k]) / (2 * h)
    assert abs(div) < 1e-7


def test_source_time_derivative_matches_difference():
    spec = media.SourceSpec()
    x = np.array([0.2, 0.7, 0.4])
    t, h = 0.37, 1e-6
    fd = (media.eval_source(spec, x, t + h)[0] - media.eval_source(spec, x, t - h)[0]) / (2 * h)
    assert np.allclose(media.eval_source(spec, x, t)[1], fd, rtol=1e-7)


# ----- exchange-correlation -----

def test_xc_values():
    assert media.eval_xc(media.XcSpec("none"), 7.3) == 0.0
    assert media.eval_xc(media.XcSpec("cube-root"), 1 / 3) == pytest.approx(-1.0)
    assert media.eval_xc(media.XcSpec("cube-root"), 9.0) == pytest.approx(-3.0)


def test_xc_clamps_negative_density():
    spec = media.XcSpec("cube-root")
    out = media.eval_xc(spec, np.array([-1e-3, 9.0, -2.0]))
    assert np.allclose(out, [0.0, -3.0, 0.0])
    assert spec.clamped == 2


def test_xc_table():
    spec = media.XcSpec("custom-table", table=([0.0, 1.0], [0.0, -2.0]))
    assert media.eval_xc(spec, 0.25) == pytest.approx(-0.5)
    with pytest.raises(InvalidArgumentError):
        media.XcSpec("custom-table")
    with pytest.raises(InvalidArgumentError):
        media.XcSpec("lda")
