import numpy as np
import pytest
import scipy.sparse as sp

from degzero.quantize import OperatorMatrix, quantize, quantize_semiclassical
from degzero.spectral import (SpectralError, SpectralPreconditionError, count_in, eigendecompose, eigenvalues,
                              essential_spectrum_estimate, find_reflection, local_spacing, phase_volume,
                              quasimode_test, weyl_count)
from degzero.symbol import SymbolSpec, constant_symbol, default_model, default_model_3d, radial_model_3d

TP = 2 * np.pi


def test_identity_and_diagonal():
    w, V = eigendecompose(quantize(constant_symbol(-0.4), 4))
    np.testing.assert_array_equal(w, -0.4)
    np.testing.assert_allclose(V.conj().T @ V, np.eye(81), atol=1e-13)
    d = np.linspace(-1, 1, 25)
    M = OperatorMatrix(sp.diags(d).tocsr().astype(complex), np.zeros((25, 2), int), 2, 2.0, "diag")
    np.testing.assert_array_equal(eigendecompose(M)[0], np.sort(d))


def test_residual_default_model_N32(eig16):
    w, V = eigendecompose(quantize(default_model(), 32), residual_tol=1e-8)
    assert w.size == 65 ** 2


def test_symmetry_split_matches_dense():
    for N in (8, 13):
        M = quantize(default_model(), N)
        assert find_reflection(M) is not None
        np.testing.assert_allclose(eigenvalues(M), np.linalg.eigvalsh(M.dense()), atol=1e-11)
        np.testing.assert_allclose(eigenvalues(M, use_symmetry=False), np.linalg.eigvalsh(M.dense()),
                                   atol=1e-11)


def test_component_split_matches_dense():
    M = quantize_semiclassical(default_model_3d(), 4)
    np.testing.assert_allclose(eigenvalues(M), np.linalg.eigvalsh(M.dense()), atol=1e-12)


def test_spectrum_symmetric_about_zero(eig16):
    # g(x, y + 1/2, phi + pi) = -g makes the spectrum symmetric
    w = eig16[1][0]
    np.testing.assert_allclose(w, -w[::-1], atol=1e-12)


def test_constant_symbol_range_collapses():
    r = essential_spectrum_estimate(constant_symbol(0.25), N_list=(4,), n_sample=16, n_phi=16)
    assert r["h_minus"] == pytest.approx(0.25) and r["h_plus"] == pytest.approx(0.25)
    row = r["by_N"][0]
    assert row["lambda_min"] == pytest.approx(0.25) and row["lambda_max"] == pytest.approx(0.25)


def test_essential_spectrum_fill_improves():
    r = essential_spectrum_estimate(default_model(), N_list=(16, 32))
    a, b = r["by_N"]
    assert b["max_interior_gap"] < a["max_interior_gap"]
    assert b["containment_excess"] <= a["containment_excess"] + 1e-12
    assert max(b["dist_min"], b["dist_max"]) < max(a["dist_min"], a["dist_max"])


def test_quasimode_q_independent_symbol():
    spec = SymbolSpec({(0, 0, 1): -0.5j, (0, 0, -1): 0.5j})  # g = sin(phi)
    p0 = np.array([1.0, 1.0])
    om = np.sin(np.pi / 4)
    r = quasimode_test(spec, om, (0.5, 0.5), p0, [TP * K for K in (2, 4, 8, 16)], N=32, grid=128)
    res = [c["residual"] for c in r["curve"] if c["admissible"]]
    assert len(res) == 4 and res[-1] < res[0] / 4


def test_quasimode_default_model():
    t = [TP * K for K in range(4, 41, 4)]
    r = quasimode_test(default_model(), 0.3, (0.0, 0.0), (1.0, 0.0), t, eps=0.1, N=64)
    assert r["passed"] and r["largest_admissible"]["residual"] <= 0.2
    assert r["fit_exponent"] <= -0.7


def test_quasimode_preconditions():
    spec = default_model()
    with pytest.raises(SpectralPreconditionError):
        quasimode_test(spec, 0.5, (0.0, 0.0), (1.0, 0.0), [TP])
    with pytest.raises(SpectralPreconditionError):
        quasimode_test(spec, 0.3, (0.0, 0.0), (1.0, 0.0), [TP], eps=0.001)
    with pytest.raises(SpectralPreconditionError):
        quasimode_test(spec, 0.3, (0.0, 0.0), (1.0, 0.0), [1.0], N=16)


def test_count_in_closed_interval():
    w = np.array([0.0, 0.5 - 1e-10, 0.5, 1.0 + 5e-10, 1.0 + 1e-8])
    assert count_in(w, (0.5, 1.0)) == 3
    assert count_in(np.array([0.7, 0.7, 0.7]), (0.7, 0.7)) == 3


def test_rank_one_interlacing(rng):
    M = quantize(default_model(), 10)
    A = M.dense()
    v = rng.standard_normal(A.shape[0]) + 1j * rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    B = A + 0.3 * np.outer(v, v.conj())
    wa, wb = np.linalg.eigvalsh(A), np.linalg.eigvalsh(B)
    for J in [(-0.5, 0.2), (0.1, 0.9), (-1.2, -0.3)]:
        assert abs(count_in(wa, J) - count_in(wb, J)) <= 1


def test_local_spacing_matches_dense():
    M = quantize(default_model(), 12)
    dl, near = local_spacing(M, 0.1, k=10)
    w = np.linalg.eigvalsh(M.dense())
    ref = np.sort(w[np.argsort(np.abs(w - 0.1))[:10]])
    np.testing.assert_allclose(near, ref, atol=1e-10)
    assert dl == pytest.approx(np.mean(np.diff(ref)))


def test_phase_volume_outside_range():
    assert phase_volume(radial_model_3d().h1, (1.5, 2.0))["volume"] == 0.0


def test_phase_volume_radial_closed_form():
    G = lambda r: 1 / np.sqrt(1 + r * r)  # noqa: E731
    r1, r2 = 1.0, 3.0
    v = phase_volume(radial_model_3d().h1, (G(r2), G(r1)), n_q=2, n_phi=4)
    assert v["volume"] == pytest.approx(np.pi * (r2 ** 2 - r1 ** 2), rel=1e-10)


def test_phase_volume_richardson_default():
    v = phase_volume(default_model_3d().h1, (0.6, 0.9))
    assert v["rel_diff"] <= 0.01 and v["volume"] > 0


def test_phase_volume_unbounded_detected():
    # h0 of the radial model is 0, so J containing 0 gives an unbounded level set
    with pytest.raises(SpectralError):
        phase_volume(radial_model_3d().h1, (-0.1, 0.1))


def test_weyl_empty_and_monotone():
    spec = default_model_3d()
    r = weyl_count(spec, 8, (1.5, 2.0), volume=0.0)
    assert r.count == 0 and r.prediction == 0.0 and r.rel_error == 0.0
    a = weyl_count(spec, 10, (0.65, 0.85))
    b = weyl_count(spec, 10, (0.6, 0.9))
    assert a.count <= b.count
    with pytest.raises(SpectralPreconditionError):
        weyl_count(spec, 10, (0.2, 0.9))


def test_weyl_radial_counts_lattice_points():
    # H_n is the exact multiplier n / sqrt(n^2 + |2 pi k|^2), so the count is a lattice-point count
    spec = radial_model_3d()
    n = 12
    J = (0.5, 0.9)
    r = weyl_count(spec, n, J)
    k = np.arange(-r.extra["N"], r.extra["N"] + 1)
    K1, K2 = np.meshgrid(k, k)
    vals = n / np.sqrt(n * n + TP ** 2 * (K1 ** 2 + K2 ** 2))
    assert r.count == count_in(vals.ravel(), J)
    G1 = np.sqrt(1 / J[0] ** 2 - 1)
    G0 = np.sqrt(1 / J[1] ** 2 - 1)
    assert r.extra["volume"] == pytest.approx(np.pi * (G1 ** 2 - G0 ** 2), rel=1e-9)
