import numpy as np
import pytest

from degzero.profiles import cutoff_chi
from degzero.quantize import (OperatorMatrix, QuantizeError, laplacian_diagonal, mode_grid, quantize,
                              quantize_semiclassical)
from degzero.spectral import eigenvalues
from degzero.symbol import SymbolSpec, constant_symbol, default_model, default_model_3d, radial_model_3d

TP = 2 * np.pi


def test_constant_symbol_is_multiple_of_identity():
    M = quantize(constant_symbol(0.7), 8)
    D = M.dense()
    np.testing.assert_array_equal(D, 0.7 * np.eye(M.dim))


def test_q_independent_symbol_is_diagonal_multiplier():
    # g = sin(phi) + 0.2 cos(2 phi)
    spec = SymbolSpec({(0, 0, 1): -0.5j, (0, 0, -1): 0.5j, (0, 0, 2): 0.1, (0, 0, -2): 0.1})
    N, r0 = 10, 2.0
    M = quantize(spec, N, r0)
    D = M.dense()
    k = mode_grid(N)
    ang = np.arctan2(k[:, 1], k[:, 0])
    expect = cutoff_chi(TP * np.hypot(k[:, 0], k[:, 1]) / r0) * (np.sin(ang) + 0.2 * np.cos(2 * ang))
    np.testing.assert_allclose(np.diag(D).real, expect, atol=1e-14)
    assert np.count_nonzero(D - np.diag(np.diag(D))) == 0


def test_matrix_elements_follow_left_quantization():
    spec = default_model()
    N = 6
    M = quantize(spec, N)
    D = M.dense()
    k = mode_grid(N)
    i = int(np.flatnonzero((k[:, 0] == 3) & (k[:, 1] == 2))[0])
    j = int(np.flatnonzero((k[:, 0] == 2) & (k[:, 1] == 2))[0])
    # k - k' = (1, 0): coefficient of e^{2 pi i x} in 0.3 cos(2 pi x) cos(phi), symmetrized
    a = 0.15 * np.cos(np.arctan2(2, 2))
    b = 0.15 * np.cos(np.arctan2(2, 3))
    assert D[i, j] == pytest.approx(0.5 * (a + b), abs=1e-14)


def test_hermitian_and_bounded():
    M = quantize(default_model(), 16)
    assert M.hermitian_defect() <= 1e-12
    w = eigenvalues(M)
    lo, hi = default_model().sample_range()
    assert w.min() >= lo - 0.05 and w.max() <= hi + 0.05


def test_asymmetry_decays_with_N():
    a = [quantize(default_model(), N).meta["relative_asymmetry"] for N in (16, 32, 64)]
    assert a[0] > a[1] > a[2]
    assert a[2] <= 1e-2


def test_bandwidth_and_cutoff_errors():
    spec = SymbolSpec({(2, 0, 1): 0.1, (-2, 0, -1): 0.1})
    with pytest.raises(QuantizeError):
        quantize(spec, 1)
    with pytest.raises(QuantizeError):
        quantize(default_model(), 8, r0=0.0)


def test_gauge_covariance_of_translation():
    spec = default_model()
    c = (0.137, 0.58)
    A = quantize(spec.translated(c), 12)
    B = quantize(spec, 12).gauge(c)
    np.testing.assert_allclose(A.dense(), B.dense(), atol=1e-14)
    wa = np.linalg.eigvalsh(A.dense())
    wb = np.linalg.eigvalsh(quantize(spec, 12).dense())
    np.testing.assert_allclose(wa, wb, atol=1e-10)


def test_real_gauge_preserves_spectrum():
    M = quantize(default_model(), 10)
    c, R = M.real_gauge()
    assert c is not None and R.is_real
    np.testing.assert_allclose(np.linalg.eigvalsh(R.dense().real), np.linalg.eigvalsh(M.dense()), atol=1e-12)


def test_banded_storage():
    M = quantize(default_model(), 6)
    ab = M.banded_upper()
    u = M.bandwidth()
    D = M.dense()
    for i, j in [(0, 0), (3, 3 + u), (10, 10 + 1), (5, 5 + 13)]:
        if j < M.dim:
            assert ab[u + i - j, j] == pytest.approx(D[i, j])


def test_npz_and_csv_export(tmp_path):
    M = quantize(default_model(), 6)
    p = tmp_path / "m.npz"
    M.save_npz(p)
    L = OperatorMatrix.load_npz(p)
    assert (L.N, L.r0, L.symbol, L.mode) == (M.N, M.r0, M.symbol, M.mode)
    np.testing.assert_array_equal(L.dense(), M.dense())
    M.save_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert any("N=6" in ln for ln in lines if ln.startswith("#"))
    body = [ln for ln in lines if not ln.startswith("#")]
    assert body[0] == "k1,k2,kp1,kp2,re,im" and len(body) - 1 == M.matrix.nnz


def test_tau_only_symbol_multiplier():
    n = 5
    M = quantize_semiclassical(radial_model_3d(), n)
    k = mode_grid(M.N)
    expect = n / np.sqrt(np.sum((TP * k) ** 2, axis=1) + n * n)
    D = M.dense()
    np.testing.assert_allclose(np.diag(D).real, expect, atol=1e-14)
    assert np.count_nonzero(D - np.diag(np.diag(D))) == 0
    assert M.hermitian_defect() == 0.0 and M.N == 15


def test_semiclassical_range_at_n40():
    spec = default_model_3d()
    M = quantize_semiclassical(spec, 40)
    assert M.hermitian_defect() <= 1e-12
    _, (lo, hi) = spec.ranges()
    w = eigenvalues(M)
    assert w.min() >= lo - 0.05 and w.max() <= hi + 0.05


def test_semiclassical_errors():
    with pytest.raises(QuantizeError):
        quantize_semiclassical(default_model_3d(), 0)
    with pytest.raises(QuantizeError):
        quantize_semiclassical(default_model_3d(), -2)


def test_laplacian_diagonal():
    d = laplacian_diagonal(2)
    k = mode_grid(2)
    i = int(np.flatnonzero((k[:, 0] == 1) & (k[:, 1] == -2))[0])
    assert d[i] == pytest.approx(-(TP ** 2) * 5)
    assert d.max() == 0.0
