"""Spectral diagnostics of quantized operators.

Eigenvalues are computed with the cheapest exact route the matrix allows:
independent blocks (connected components of the sparsity graph) are solved
separately, a lattice reflection commuting with the matrix splits it into
even and odd parts, and real symmetric banded blocks use LAPACK's banded
solver.  Everything else falls back to dense Hermitian solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee

from .quantize import OperatorMatrix, mode_grid, quantize
from .symbol import SymbolSpec, SymbolSpec3D

__all__ = [
    "SpectralError",
    "SpectralPreconditionError",
    "SpectralReport",
    "eigendecompose",
    "eigenvalues",
    "essential_spectrum_estimate",
    "quasimode_test",
    "weyl_count",
    "phase_volume",
    "local_spacing",
    "count_in",
]

TWO_PI = 2.0 * np.pi
ENDPOINT_TOL = 1e-9


class SpectralError(RuntimeError):
    """Eigensolver or quadrature failure."""


class SpectralPreconditionError(SpectralError, ValueError):
    """Inputs violating the stated preconditions."""


@dataclass
class SpectralReport:
    eigenvalues: np.ndarray | None = None
    symbol_range: tuple | None = None
    J: tuple | None = None
    count: int | None = None
    prediction: float | None = None
    rel_error: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"symbol_range": self.symbol_range, "J": self.J, "count": self.count,
             "prediction": self.prediction, "rel_error": self.rel_error, **self.extra}
        if self.eigenvalues is not None:
            d["n_eigenvalues"] = int(self.eigenvalues.size)
        return d


def count_in(w, J) -> int:
    """Closed-interval count; values within 1e-9 of an endpoint are counted in."""
    w = np.asarray(w)
    return int(np.count_nonzero((w >= J[0] - ENDPOINT_TOL) & (w <= J[1] + ENDPOINT_TOL)))


# =========================================================== eigensolvers
def eigendecompose(M: OperatorMatrix, residual_tol: float = 1e-8, use_symmetry: bool = True):
    """Full spectrum and orthonormal eigenvectors (dense Hermitian solver).

    With ``use_symmetry`` the solver runs on the real gauge and on the even/odd
    blocks of a signed reflection when these exist; eigenvectors are mapped
    back and the residuals are measured against M itself.

    Raises
    ------
    SpectralError
        On solver failure or if a residual exceeds ``residual_tol``.
    """
    A = M.matrix
    if A.count_nonzero() == np.count_nonzero(A.diagonal()):
        # multiplier (diagonal) matrix: exact spectrum, standard basis
        d = A.diagonal().real
        order = np.argsort(d, kind="stable")
        return d[order], np.eye(M.dim, dtype=complex)[:, order]
    phase = None
    blocks = None
    if use_symmetry:
        c, Mg = M.real_gauge() if not M.is_real else ((0.0, 0.0), M)
        if c is not None:
            phase = np.exp(-1j * TWO_PI * (M.modes @ np.asarray(c))) if any(c) else None
            R = find_reflection(Mg)
            real = Mg.matrix.real.tocsr() if np.iscomplexobj(Mg.matrix.data) else Mg.matrix
            blocks = _split(real, R, with_basis=True) if R is not None else [(None, real)]
    if blocks is None:
        blocks = [(None, A)]
    ws, Vs = [], []
    try:
        for Q, B in blocks:
            w, U = np.linalg.eigh(B.toarray())
            ws.append(w)
            Vs.append(U if Q is None else Q @ U)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"eigensolver failed for {M.metadata()}: {exc}") from exc
    w = np.concatenate(ws)
    V = np.hstack(Vs)
    order = np.argsort(w, kind="stable")
    w, V = w[order], V[:, order]
    if phase is not None:
        V = phase[:, None] * V
    R = M.matrix @ V - V * w
    res = float(np.max(np.linalg.norm(R, axis=0)))
    if res > residual_tol:
        raise SpectralError(f"eigenpair residual {res:.2e} exceeds {residual_tol:g} for {M.metadata()}")
    return w, V


def _reflections(modes):
    k1, k2 = modes[:, 0], modes[:, 1]
    return [("k1->-k1", np.stack([-k1, k2], 1)), ("k2->-k2", np.stack([k1, -k2], 1)),
            ("swap", np.stack([k2, k1], 1)), ("k->-k", np.stack([-k1, -k2], 1))]


def find_reflection(M: OperatorMatrix, tol: float = 1e-13):
    """A signed lattice reflection S (S^2 = 1) with S M S = M, or None.

    Candidates are the reflections of the mode lattice combined with the
    characters (-1)^{a k1 + b k2}.
    """
    A = M.matrix
    N = M.N
    idx = np.arange(M.dim)
    scale = max(np.abs(A.data).max(initial=0.0), 1e-300)
    for name, img in _reflections(M.modes):
        P = (img[:, 0] + N) * (2 * N + 1) + (img[:, 1] + N)
        for a in (0, 1):
            for b in (0, 1):
                sg = (-1.0) ** (a * M.modes[:, 0] + b * M.modes[:, 1])
                S = sp.csr_matrix((sg, (P, idx)), shape=A.shape)
                D = S @ A @ S.T - A
                if D.nnz == 0 or np.abs(D.data).max() <= tol * scale:
                    return {"name": name, "character": (a, b), "perm": P, "sign": sg}
    return None


def _split(A: sp.csr_matrix, R: dict, with_basis: bool = False):
    """Even and odd blocks of A under the signed reflection R, optionally with their bases Q."""
    P, sg = R["perm"], R["sign"]
    d = A.shape[0]
    idx = np.arange(d)
    rep = idx[idx <= P]
    fixed = P[rep] == rep
    blocks = []
    for par in (+1.0, -1.0):
        cols = []
        rows = []
        vals = []
        keep = np.ones(rep.size, bool)
        # fixed points belong to the sector with S e_i = sg_i e_i
        keep[fixed] = sg[rep[fixed]] == par
        r = rep[keep]
        fx = fixed[keep]
        j = np.arange(r.size)
        # vector (e_i + par * sg_i e_{P i}) / sqrt 2, or e_i when fixed
        rows += [r, P[r][~fx]]
        cols += [j, j[~fx]]
        w = np.where(fx, 1.0, 1.0 / np.sqrt(2))
        vals += [w, (par * sg[r] / np.sqrt(2))[~fx]]
        Q = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(d, r.size))
        B = (Q.T @ A @ Q).tocsr()
        blocks.append((Q, B) if with_basis else B)
    return blocks


def _block_eigvals(A: sp.csr_matrix) -> np.ndarray:
    n = A.shape[0]
    if n == 0:
        return np.array([])
    C = A.tocoo()
    bw = int(np.max(np.abs(C.row - C.col))) if C.nnz else 0
    real = not np.iscomplexobj(A.data) or np.all(np.abs(A.data.imag) == 0)
    if real and n > 64 and bw < n // 8:
        U = sp.triu(A).tocoo()
        ab = np.zeros((bw + 1, n))
        ab[bw + U.row - U.col, U.col] = U.data.real
        return sl.eig_banded(ab, lower=False, eigvals_only=True)
    D = A.toarray()
    return np.linalg.eigvalsh(D.real if real else D)


def eigenvalues(M: OperatorMatrix, use_symmetry: bool = True) -> np.ndarray:
    """All eigenvalues (sorted) via components, symmetry splitting and banded solves."""
    A = M.matrix
    if not M.is_real:
        _, Mg = M.real_gauge()
        A = Mg.matrix
        if not Mg.is_real:
            A = M.matrix
    pattern = (abs(A) > 0).astype(int)
    ncomp, lab = connected_components(pattern, directed=False)
    out = []
    if ncomp > 1:
        for c in range(ncomp):
            ii = np.nonzero(lab == c)[0]
            sub = A[ii][:, ii].tocsr()
            if sub.shape[0] > 1:
                perm = reverse_cuthill_mckee(sub, symmetric_mode=True)
                sub = sub[perm][:, perm].tocsr()
            out.append(_block_eigvals(sub))
        return np.sort(np.concatenate(out))
    R = find_reflection(M) if use_symmetry else None
    if R is not None and A is not M.matrix:
        # the reflection was found on M; recheck it on the gauged matrix
        Mg = OperatorMatrix(A, M.modes, M.N, M.r0, M.symbol, M.mode)
        R = find_reflection(Mg)
    blocks = _split(A, R) if R is not None else [A]
    return np.sort(np.concatenate([_block_eigvals(B) for B in blocks]))


def local_spacing(M: OperatorMatrix, omega: float, k: int = 20, offset: float = 1.234e-5):
    """Mean spacing of the k eigenvalues nearest omega (shift-invert Lanczos).

    The shift is offset slightly from omega so that an exact eigenvalue at
    omega does not make the factorization singular.
    """
    d = M.dim
    if d <= 2 * k + 2:
        w = np.linalg.eigvalsh(M.dense())
        near = np.sort(w[np.argsort(np.abs(w - omega))[:k]])
    else:
        v0 = np.ones(d) / np.sqrt(d)
        A = M.matrix.tocsc()
        if not M.is_real:
            v0 = v0.astype(complex)
        near = np.sort(spl.eigsh(A, k=k, sigma=omega + offset, which="LM", v0=v0,
                                 return_eigenvectors=False))
    return float(np.mean(np.diff(near))), near


# ========================================================= ess. spectrum
def essential_spectrum_estimate(spec: SymbolSpec, N_list=(16, 32, 64), r0: float = 2.0,
                                margin: float = 0.05, n_sample: int = 256, n_phi: int = 512) -> dict:
    """Eigenvalue range and interior fill of the quantization against [h-, h+].

    For each N: min/max eigenvalue, distances to the sampled symbol range and
    the maximal gap between consecutive eigenvalues inside
    [h- + margin, h+ - margin].
    """
    lo, hi = spec.sample_range(n_sample, n_phi)
    rows = []
    for N in N_list:
        w = eigenvalues(quantize(spec, N, r0))
        inner = w[(w >= lo + margin) & (w <= hi - margin)]
        gap = float(np.max(np.diff(inner))) if inner.size > 1 else float(hi - lo)
        rows.append({"N": int(N), "lambda_min": float(w[0]), "lambda_max": float(w[-1]),
                     "dist_min": float(abs(w[0] - lo)), "dist_max": float(abs(w[-1] - hi)),
                     "containment_excess": float(max(lo - w[0], w[-1] - hi, 0.0)),
                     "max_interior_gap": gap, "dim": int(w.size)})
    return {"h_minus": lo, "h_plus": hi, "margin": margin, "by_N": rows}


# ============================================================= quasimode
def _bump(r, R):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return np.where(r < R, np.exp(-1.0 / np.maximum(1.0 - (r / R) ** 2, 1e-300)), 0.0)


def quasimode_test(spec: SymbolSpec, omega: float, q0, p0, t_list, *, eps: float = 0.1,
                   radius: float = 0.12, N: int = 64, r0: float = 2.0, grid: int = 256,
                   capture: float = 1e-3) -> dict:
    """Residuals ||(H - omega) u_t|| for u_t = phi(q) e^{i t q.p0}.

    phi is a normalized radial bump of the given radius around q0.  A value
    of t is admissible when t p0 / 2 pi is an integer vector and at least
    ``1 - capture`` of the state's Fourier mass lies inside the truncation.

    Raises
    ------
    SpectralError
        If h(q0, p0) != omega or |h(q, p0) - omega| > eps somewhere on the bump support.
    """
    q0 = np.asarray(q0, float)
    p0 = np.asarray(p0, float)
    phi0 = np.arctan2(p0[1], p0[0])
    if abs(spec.g(q0[0], q0[1], phi0) - omega) > 1e-10:
        raise SpectralPreconditionError("precondition: h(q0, p0) must equal omega")
    rr = np.linspace(0, radius, 64)
    aa = np.linspace(0, TWO_PI, 128, endpoint=False)
    Rr, Aa = np.meshgrid(rr, aa)
    dev = np.abs(spec.g(q0[0] + Rr * np.cos(Aa), q0[1] + Rr * np.sin(Aa), phi0) - omega)
    if dev.max() > eps:
        raise SpectralPreconditionError(f"precondition: |h - omega| = {dev.max():.3f} > eps on the bump support")
    s = np.arange(grid) / grid
    X, Y = np.meshgrid(s, s, indexing="ij")
    r = np.hypot((X - q0[0] + 0.5) % 1 - 0.5, (Y - q0[1] + 0.5) % 1 - 0.5)
    phi = _bump(r, radius)
    phi /= np.sqrt(np.mean(phi ** 2))
    ph_hat = np.fft.fft2(phi) / grid ** 2
    freqs = np.fft.fftfreq(grid, 1.0 / grid).astype(int)
    M = quantize(spec, N, r0)
    modes = M.modes
    H = M.matrix
    out = []
    for t in t_list:
        kap = t * p0 / TWO_PI
        if np.max(np.abs(kap - np.round(kap))) > 1e-9:
            raise SpectralPreconditionError(f"t = {t} is not admissible: t p0 / 2 pi must be an integer vector")
        kap = np.round(kap).astype(int)
        # u_t has coefficients ph_hat(k - kap)
        j1 = (modes[:, 0] - kap[0]) % grid
        j2 = (modes[:, 1] - kap[1]) % grid
        # guard against aliasing: only use shifts resolved by the bump grid
        f1 = freqs[j1] + kap[0]
        f2 = freqs[j2] + kap[1]
        u = np.where((f1 == modes[:, 0]) & (f2 == modes[:, 1]), ph_hat[j1, j2], 0.0)
        captured = float(np.sum(np.abs(u) ** 2))
        res = float(np.linalg.norm(H @ u - omega * u))
        out.append({"t": float(t), "residual": res, "captured": captured,
                    "admissible": captured >= 1.0 - capture})
    adm = [o for o in out if o["admissible"]]
    fit = None
    if len(adm) >= 3:
        fit = float(np.polyfit(np.log([o["t"] for o in adm]), np.log([o["residual"] for o in adm]), 1)[0])
    last = adm[-1] if adm else None
    return {"curve": out, "fit_exponent": fit, "eps": eps, "bound": 2 * eps,
            "largest_admissible": last,
            "passed": bool(last is not None and last["residual"] <= 2 * eps),
            "support_deviation": float(dev.max())}


# ================================================================== Weyl
def phase_volume(h1, J, *, n_q: int = 16, n_phi: int = 32, n_r: int = 512, r_max: float | None = None,
                 rel_tol: float = 0.01, chunk: int = 1024) -> dict:
    """Liouville volume of {(q, p) in T^2 x R^2 : h1(q, p) in J}.

    Polar quadrature in p: for each (x, y, angle) midpoint, the radial
    crossings of the level set are located by sampling and bisection and
    the radial integral of r dr is exact between crossings.  The result is
    accepted when the doubled angular/spatial resolution agrees to
    ``rel_tol`` (Richardson pair).

    Raises
    ------
    SpectralError
        If the level set reaches the outer radius (unbounded) or the pair disagrees.
    """
    lo, hi = J
    if r_max is None:
        r_max = _outer_radius(h1, lo, hi, n_q, n_phi)
    elif _hits_boundary(h1, lo, hi, r_max, n_q, n_phi):
        raise SpectralError("mass at the integration boundary: level set unbounded or r_max too small")
    v1 = _polar_volume(h1, lo, hi, r_max, n_q, n_phi, n_r, chunk)
    v2 = _polar_volume(h1, lo, hi, r_max, 2 * n_q, 2 * n_phi, n_r, chunk)
    agree = abs(v1 - v2) / max(abs(v2), 1e-300) if v2 != 0 else abs(v1)
    if v2 != 0 and agree > rel_tol:
        raise SpectralError(f"Richardson pair disagrees by {agree:.3%}")
    return {"volume": float(v2), "coarse": float(v1), "rel_diff": float(agree), "r_max": float(r_max)}


def _outer_radius(h1, lo, hi, n_q, n_phi, r_min: float = 8.0, n_oct: int = 16):
    """Twice the largest sampled ring radius meeting {h1 in J}, at least ``r_min``.

    Rings are spaced geometrically (four per octave) up to r_min 2^n_oct; a hit on
    the outermost ring means the limit h0 reaches J, so the level set is unbounded.
    """
    q, d = _rays(n_q, n_phi)
    radii = r_min * 2.0 ** (np.arange(4 * n_oct + 1) / 4 - 2)
    hit = np.array([np.any((v >= lo) & (v <= hi)) for v in (h1(q, r * d) for r in radii)])
    if hit[-1]:
        raise SpectralError("level set {h1 in J} appears unbounded (J meets the limit at infinity)")
    return float(max(r_min, 2 * radii[hit].max())) if hit.any() else r_min


def _hits_boundary(h1, lo, hi, r_max, n_q, n_phi):
    q, d = _rays(n_q, n_phi)
    v = h1(q, r_max * d)
    v2 = h1(q, 0.75 * r_max * d)
    return bool(np.any((v >= lo) & (v <= hi)) or np.any((v2 >= lo) & (v2 <= hi)))


def _rays(n_q, n_phi):
    s = (np.arange(n_q) + 0.5) / n_q
    a = (np.arange(n_phi) + 0.5) * TWO_PI / n_phi
    X, Y, A = np.meshgrid(s, s, a, indexing="ij")
    q = np.stack([X.ravel(), Y.ravel()], -1)
    d = np.stack([np.cos(A.ravel()), np.sin(A.ravel())], -1)
    return q, d


def _polar_volume(h1, lo, hi, r_max, n_q, n_phi, n_r, chunk):
    q, d = _rays(n_q, n_phi)
    r = np.linspace(0.0, r_max, n_r + 1)
    total = 0.0
    for i in range(0, q.shape[0], chunk):
        qq, dd = q[i:i + chunk], d[i:i + chunk]
        V = h1(qq[:, None, :], r[None, :, None] * dd[:, None, :])
        ins = (V >= lo) & (V <= hi)
        # crossings of lo and hi located by bisection on the ray
        acc = np.zeros(qq.shape[0])
        for level in (lo, hi):
            S = V >= level
            ch = np.nonzero(S[:, 1:] != S[:, :-1])
            if ch[0].size == 0:
                continue
            ray, j = ch
            a, b = r[j].copy(), r[j + 1].copy()
            sa = S[ray, j]
            for _ in range(40):
                m = 0.5 * (a + b)
                sm = h1(qq[ray], m[:, None] * dd[ray]) >= level
                left = sm == sa
                a = np.where(left, m, a)
                b = np.where(left, b, m)
            rc = 0.5 * (a + b)
            # entering J adds -rc^2/2, leaving adds +rc^2/2 (orientation along r)
            enter = ~ins[ray, j] & ins[ray, j + 1]
            leave = ins[ray, j] & ~ins[ray, j + 1]
            np.add.at(acc, ray, np.where(enter, -0.5 * rc ** 2, 0.0) + np.where(leave, 0.5 * rc ** 2, 0.0))
        total += acc.sum()
    return total * (1.0 / n_q ** 2) * (TWO_PI / n_phi)


def weyl_count(spec3d: SymbolSpec3D, n: int, J, N: int | None = None, *, kappa: float = 3.0,
               volume: float | None = None, ranges=None) -> SpectralReport:
    """Eigenvalue count of H_n in J against the prediction (n^2 / 4 pi^2) vol.

    Raises
    ------
    SpectralError
        If J meets I0 = range(h0).  J beyond I_inf is allowed (empty level set).
    """
    from .quantize import quantize_semiclassical
    I0, Iinf = spec3d.ranges() if ranges is None else ranges
    J = (float(J[0]), float(J[1]))
    if not J[0] <= J[1]:
        raise SpectralPreconditionError("J must be an interval")
    if J[0] <= I0[1] and J[1] >= I0[0]:
        raise SpectralPreconditionError(f"J = {J} meets I0 = {I0}: spectrum is not discrete there")
    if volume is None:
        volume = phase_volume(spec3d.h1, J)["volume"]
    M = quantize_semiclassical(spec3d, n, N, kappa)
    w = eigenvalues(M)
    cnt = count_in(w, J)
    pred = n * n / (4 * np.pi ** 2) * volume
    rel = abs(cnt - pred) / pred if pred > 0 else (0.0 if cnt == 0 else np.inf)
    return SpectralReport(eigenvalues=w, J=J, count=cnt, prediction=float(pred), rel_error=float(rel),
                          symbol_range=(I0, Iinf), extra={"n": int(n), "N": int(M.N), "volume": float(volume)})
