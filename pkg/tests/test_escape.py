import numpy as np
import pytest

from degzero.escape import (CertificationError, EscapeError, EscapeFunction, NoEscapeFound,
                            blend_derivative_check, certify, radial_source_check, synthesize_lp)
from degzero.foliation import FoliationAtlas
from degzero.symbol import default_model, unperturbed_model


def _min_bracket(k, atlas, n):
    return min(float(np.min(k.bracket(b, *atlas.sample(b, n)[1:], n=n))) for b in range(len(atlas.branches)))


@pytest.fixture(scope="module")
def atlas32():
    return FoliationAtlas.from_symbol(default_model(), grid=32)


@pytest.fixture(scope="module")
def lp32(atlas32):
    return synthesize_lp(atlas32, basis_size=6)


def test_unperturbed_model_has_no_escape_function():
    at = FoliationAtlas.from_symbol(unperturbed_model(), grid=16)
    with pytest.raises(NoEscapeFound) as exc:
        synthesize_lp(at, basis_size=4)
    assert exc.value.best_delta is not None and exc.value.best_delta < 1e-4


def test_lp_margin_positive_and_certified(lp_escape, atlas):
    assert lp_escape.delta > 1.0
    k = EscapeFunction.from_json(lp_escape.to_json())
    m = certify(k, atlas, refinement=4)
    assert m > 0 and k.cert_grid == 4 * atlas.grid
    assert m <= lp_escape.delta + 1e-9


def test_off_grid_bracket_positive(lp_escape, atlas, rng):
    for b, br in enumerate(atlas.branches):
        q = rng.random((2000, 2))
        st = br.lift(q)
        vel, W, a = br.fields(st)
        assert np.min(lp_escape.bracket(b, W, a, q=q)) > 0


def test_doubling_symbol_doubles_bracket(lp32, atlas32):
    at2 = FoliationAtlas.from_symbol(default_model().scaled(2.0), grid=32)
    for b in range(2):
        _, W1, a1 = atlas32.sample(b, 64)
        _, W2, a2 = at2.sample(b, 64)
        np.testing.assert_allclose(lp32.bracket(b, W2, a2, n=64), 2 * lp32.bracket(b, W1, a1, n=64),
                                   rtol=1e-10, atol=1e-10)


def test_scaling_k_scales_margin(lp32, atlas32):
    assert _min_bracket(lp32.scaled(3.0), atlas32, 64) == pytest.approx(3 * _min_bracket(lp32, atlas32, 64),
                                                                          rel=1e-12)


def test_zero_function_fails_certification(atlas32):
    M = 4
    k = EscapeFunction([np.zeros((2 * M + 1, 2 * M + 1), complex) for _ in range(2)])
    with pytest.raises(CertificationError):
        certify(k, atlas32)


def test_margin_invariant_under_grid_translation(lp32):
    # quarter-period shifts map the grid onto itself and permute cos/sin coefficients up to sign,
    # so the box-constrained LP is carried onto itself
    at = FoliationAtlas.from_symbol(default_model().translated((0.25, 0.5)), grid=32)
    k = synthesize_lp(at, basis_size=6)
    assert k.delta == pytest.approx(lp32.delta, rel=1e-6)


def test_sign_constant_on_each_limit_cycle(lp_escape, structure):
    # e (exp(A) - 1) >= delta * int exp(...) along a period forces a fixed sign on each cycle
    signs = {}
    for tag, comps in (("+", structure.K_plus), ("-", structure.K_minus)):
        for c in comps:
            e, _ = lp_escape.value(c.branch, np.mod(c.states[:, :2], 1.0))
            assert np.all(e > 0) or np.all(e < 0)
            signs.setdefault(tag, set()).add(bool(e[0] > 0))
    assert len(signs["+"]) == 1 and len(signs["-"]) == 1 and signs["+"] != signs["-"]


def test_json_roundtrip(lp32):
    k = EscapeFunction.from_json(lp32.to_json())
    assert k.delta == lp32.delta and k.method == "lp"
    for A, B in zip(k.tables, lp32.tables):
        np.testing.assert_array_equal(A, B)
    assert k.to_json() == lp32.to_json()


def test_from_grid_reproduces_trigonometric_polynomial(lp32):
    n = 32
    vals = [lp32.grid_values(b, n)[0] for b in range(2)]
    k = EscapeFunction.from_grid(vals, M=lp32.M)
    for A, B in zip(k.tables, lp32.tables):
        np.testing.assert_allclose(A, B, atol=1e-12)


def test_grid_values_match_pointwise(lp32):
    n = 16
    e, ex, ey = lp32.grid_values(0, n)
    t = np.arange(n) / n
    q = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
    v, g = lp32.value(0, q)
    np.testing.assert_allclose(v, e.ravel(), atol=1e-11)
    np.testing.assert_allclose(g[:, 0], ex.ravel(), atol=1e-9)
    np.testing.assert_allclose(g[:, 1], ey.ravel(), atol=1e-9)


def test_flow_method_certified(flow_escape, atlas):
    kf, S = flow_escape
    assert kf.delta > 0 and kf.method == "flow"
    assert _min_bracket(kf, atlas, 2 * atlas.grid) > 0
    chk = blend_derivative_check(kf, n_samples=16)
    assert chk["passed"] and chk["min_derivative"] >= chk["bound"]


def test_radial_source_growth(lp_escape, atlas, structure):
    k = EscapeFunction.from_json(lp_escape.to_json())
    certify(k, atlas, refinement=4)
    rep = radial_source_check(k, atlas, structure, n_seeds=4)
    assert rep["passed"] and rep["monotone"]
    assert all(f["slope"] >= 0.9 * k.delta for f in rep["fits"])


def test_radial_source_rejects_seed_on_repeller(lp_escape, atlas, structure):
    c = structure.K_minus[0]
    br = atlas.branches[c.branch]
    st = br.lift(np.mod(c.states[0, :2], 1.0))
    with pytest.raises(EscapeError):
        radial_source_check(lp_escape, atlas, structure, seeds=[(c.branch, st)])


def test_radial_source_requires_certified_function(lp32, atlas32, structure):
    k = EscapeFunction([T.copy() for T in lp32.tables], delta=np.nan)
    with pytest.raises(EscapeError):
        radial_source_check(k, atlas32, structure)
