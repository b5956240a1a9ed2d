import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magbloch.problem import (
    CoefficientSpec,
    FluxQuantizationError,
    FourierTerm,
    ProblemError,
    build_problem,
    gauge_transform,
    quantized_flux,
    sample_points,
    symmetrize,
    symmetry_residual,
    validate,
)

X = sample_points(7)


def custom(*terms, **kw):
    return build_problem(CoefficientSpec("custom", terms, **kw))


def test_free_preset(free):
    assert free.b == 0.0
    np.testing.assert_array_equal(free.eval_V(X), 0.0)
    np.testing.assert_array_equal(free.eval_G(X), np.broadcast_to(np.eye(3), (len(X), 3, 3)))


def test_landau_gauge(landau):
    A = landau.eval_A(X)
    np.testing.assert_allclose(A[:, 0], -X[:, 1] / (2 * math.pi), atol=1e-15)
    np.testing.assert_array_equal(A[:, 1:], 0.0)


def test_custom_potential_evaluation():
    p = custom(FourierTerm("V", (0, 0, 1), 1.0))
    assert p.eval_V(np.array([0.0, 0.0, 0.0])) == pytest.approx(1.0)
    assert p.eval_V(np.array([0.0, 0.0, math.pi])) == pytest.approx(-1.0)


@pytest.mark.parametrize("spec, match", [
    (CoefficientSpec(""), "empty"),
    (CoefficientSpec("custom"), "empty custom"),
    (CoefficientSpec("nonsense"), "unknown preset"),
    (CoefficientSpec("free", flux_integer=2), "zero field"),
])
def test_build_rejections(spec, match):
    with pytest.raises(ProblemError, match=match):
        build_problem(spec)


def test_unquantized_field_strength():
    spec = CoefficientSpec("landau", field_strength=0.1)
    with pytest.raises(FluxQuantizationError):
        build_problem(spec)
    report = validate(build_problem(spec, strict=False))
    assert not report.flux_ok and not report.passed


def test_quantized_field_strength_accepted():
    p = build_problem(CoefficientSpec("landau", field_strength=2 / (2 * math.pi)))
    assert p.flux_integer == 2


def test_quantized_flux():
    assert quantized_flux(1 / (2 * math.pi)) == 1
    assert quantized_flux(0.1) is None
    assert quantized_flux(-1 / (2 * math.pi)) is None


def test_fourier_term_validation():
    with pytest.raises(ProblemError):
        FourierTerm("W", (0, 0, 1), 1.0)
    with pytest.raises(ProblemError):
        FourierTerm("V", (0, 0.5, 1), 1.0)
    with pytest.raises(ProblemError):
        FourierTerm("V", (0, 0, 1), 1.0, "tan")
    assert FourierTerm("g21", (1, 0, 0), 1.0).target == "g12"


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ProblemError, match="unknown"):
        CoefficientSpec.from_dict({"preset": "free", "bogus": 1})
    with pytest.raises(ProblemError, match="unknown"):
        CoefficientSpec.from_dict({"preset": "custom", "fourier_terms": [
            {"target": "V", "mode": [0, 0, 1], "amplitude": 1, "colour": "red"}]})


def test_spec_round_trip():
    spec = CoefficientSpec("custom", (FourierTerm("a2", (1, 0, 1), 0.2, "sin"),), 1, True)
    assert CoefficientSpec.from_dict(spec.to_dict()) == spec


# symmetrize ----------------------------------------------------------------

def test_symmetrize_fixed_point():
    p = custom(FourierTerm("V", (1, 0, 1), 0.4), FourierTerm("V", (1, 0, -1), 0.4),
               FourierTerm("g33", (0, 1, 0), 0.2), FourierTerm("a3", (0, 0, 2), 0.1, "sin"))
    q = symmetrize(p)
    np.testing.assert_allclose(q.eval_V(X), p.eval_V(X), atol=1e-15)
    np.testing.assert_allclose(q.eval_G(X), p.eval_G(X), atol=1e-15)


def test_symmetrize_odd_part_cancels():
    q = symmetrize(custom(FourierTerm("V", (0, 0, 1), 1.0, "sin")))
    np.testing.assert_allclose(q.eval_V(X), 0.0, atol=1e-15)


def test_symmetrize_even_part_survives():
    q = symmetrize(custom(FourierTerm("V", (0, 0, 1), 1.0), FourierTerm("V", (0, 0, 1), 1.0, "sin")))
    np.testing.assert_allclose(q.eval_V(X), np.cos(X[:, 2]), atol=1e-15)


term_strategy = st.builds(
    FourierTerm,
    target=st.sampled_from(["V", "a1", "a2", "a3", "g11", "g12", "g13", "g22", "g23", "g33"]),
    mode=st.tuples(*[st.integers(-2, 2)] * 3),
    amplitude=st.floats(-0.1, 0.1, allow_nan=False),
    phase=st.sampled_from(["cos", "sin"]),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(term_strategy, min_size=1, max_size=6))
def test_symmetrize_properties(terms):
    p = build_problem(CoefficientSpec("custom", tuple(terms), flux_integer=1))
    q = symmetrize(p)
    assert symmetry_residual(q, X) <= 1e-12
    r = symmetrize(q)
    for f in ("eval_V", "eval_a", "eval_G"):
        np.testing.assert_allclose(getattr(r, f)(X), getattr(q, f)(X), atol=1e-14)
    # The symmetrized metric is symmetric to 1e-14.
    G = q.eval_G(X)
    assert np.abs(G - np.swapaxes(G, -1, -2)).max() <= 1e-14


# validate ------------------------------------------------------------------

def test_validate_free(free):
    rep = validate(free)
    assert rep.passed and rep.flux == 0
    assert rep.ellipticity_bounds == (1.0, 1.0)


def test_validate_landau(landau):
    rep = validate(landau)
    assert rep.passed and rep.flux == 1


def test_validate_non_elliptic():
    p = custom(FourierTerm("g11", (1, 0, 0), 1.5))
    rep = validate(p)
    assert not rep.passed
    assert any("positive definite at x=" in f for f in rep.failures)


def test_validate_requires_symmetry(asymmetric):
    assert validate(asymmetric).passed
    rep = validate(asymmetric, require_symmetry=True)
    assert not rep.passed and rep.symmetry_residual > 0.1


def test_validate_sample_count():
    with pytest.raises(ProblemError):
        validate(build_problem(CoefficientSpec("free")), samples=1)


def test_suite_is_symmetric(suite):
    for p in suite.values():
        rep = validate(p)
        assert rep.passed and rep.symmetry_residual <= 1e-12


# gauge ---------------------------------------------------------------------

def test_gauge_identity(free):
    assert gauge_transform(free, []).eval_a(X).tolist() == free.eval_a(X).tolist()


def test_gauge_sin_x1(free):
    g = gauge_transform(free, [FourierTerm("V", (1, 0, 0), 1.0, "sin")])
    np.testing.assert_allclose(g.eval_a(X)[:, 0], np.cos(X[:, 0]), atol=1e-15)
    np.testing.assert_array_equal(g.eval_a(X)[:, 1:], 0.0)


def test_gauge_preserves_field(suite):
    """curl(a + grad chi) = curl a, checked by central differences."""
    p = suite["crystal"]
    g = gauge_transform(p, [FourierTerm("V", (1, 2, 1), 0.3, "cos")])
    eps = 1e-5
    x = X[::17]

    def curl(prob):
        J = np.zeros((len(x), 3, 3))
        for d in range(3):
            e = np.zeros(3)
            e[d] = eps
            J[:, :, d] = (prob.eval_a(x + e) - prob.eval_a(x - e)) / (2 * eps)
        return np.stack([J[:, 2, 1] - J[:, 1, 2], J[:, 0, 2] - J[:, 2, 0], J[:, 1, 0] - J[:, 0, 1]], -1)

    np.testing.assert_allclose(curl(g), curl(p), atol=1e-8)


def test_shifts_are_applied(free):
    s = free.with_shifts((0.3, 0.4), 0.6)
    np.testing.assert_allclose(s.eval_V(X), -0.6)
    np.testing.assert_allclose(s.eval_A(X)[:, :2], [[-0.3, -0.4]] * len(X))
