import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentmarkov import links
from latentmarkov.links import LinkError, LinkKind

from conftest import central_difference

simplex = st.integers(2, 6).flatmap(
    lambda l: st.lists(st.floats(0.05, 10.0), min_size=l, max_size=l)
).map(lambda v: np.asarray(v) / np.sum(v))


@pytest.mark.parametrize("family", ["multinomial", "global", "continuation"])
@settings(max_examples=60, deadline=None)
@given(p=simplex)
def test_round_trip(family, p):
    kind = LinkKind(family)
    eta = links.apply_link(kind, p)
    assert eta.shape == (p.size - 1,)
    np.testing.assert_allclose(links.invert_link(kind, eta), p, atol=1e-12)


def test_reference_category_moves_the_zero():
    p = np.array([0.2, 0.5, 0.3])
    eta = links.apply_link(LinkKind("multinomial", reference=1), p)
    np.testing.assert_allclose(eta, np.log([0.2 / 0.5, 0.3 / 0.5]))


def test_global_logits_are_cumulative_log_odds():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    eta = links.apply_link(LinkKind("global"), p)
    np.testing.assert_allclose(eta, [np.log(0.9 / 0.1), np.log(0.7 / 0.3), np.log(0.4 / 0.6)])
    assert np.all(np.diff(eta) < 0)


def test_continuation_logits():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    eta = links.apply_link(LinkKind("continuation"), p)
    np.testing.assert_allclose(eta, [np.log(0.9 / 0.1), np.log(0.7 / 0.2), np.log(0.4 / 0.3)])


@pytest.mark.parametrize("family", ["multinomial", "global", "continuation"])
def test_jacobian_matches_finite_differences(family, rng):
    kind = LinkKind(family)
    p = rng.dirichlet(np.ones(4))
    eta = links.apply_link(kind, p)
    jac = links.link_jacobian(kind, eta)
    num =np.stack([central_difference(lambda e, c=c: links.invert_link(kind, e)[c], eta) for c in range(4)])
    np.testing.assert_allclose(jac, num, atol=1e-8)


def test_global_inverse_flags_non_decreasing_predictors():
    out = links.global_inverse(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert np.all(np.isnan(out[0]))
    assert np.all(np.isfinite(out[1]))
    with pytest.raises(LinkError):
        links.invert_link(LinkKind("global"), [1.0, 2.0])


def test_masked_multinomial_gives_structural_zeros():
    p = links.multinomial_inverse(np.array([0.0, 1.0, 2.0]), np.array([True, False, True]))
    assert p[1] == 0.0
    assert p.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [[0.0, 1.0], [0.5, 0.6], [[0.5, 0.5]]])
def test_apply_link_rejects_invalid_vectors(bad):
    with pytest.raises(LinkError):
        links.apply_link(LinkKind("multinomial"), bad)


def test_unknown_family_and_arity():
    with pytest.raises(LinkError):
        LinkKind("probit")
    with pytest.raises(LinkError):
        links.apply_link(LinkKind("binary-logit"), [0.2, 0.3, 0.5])


def test_rasch_probability():
    assert links.rasch_probability(0.0, 0.0) == pytest.approx(0.5)
    np.testing.assert_allclose(links.rasch_probability([1.0, -1.0], 0.5), 1 / (1 + np.exp([-0.5, 1.5])))
