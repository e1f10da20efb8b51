"""Forced waves, limiting absorption and microlocal diagnostics.

Conventions
-----------
The inviscid problem is ``(1/i) u' + M u = f e^{-i omega t}``, ``u(0) = 0``,
i.e. ``u' = -i M u + i f e^{-i omega t}``.  Inner products are
``<a, b> = sum conj(a) b`` (``np.vdot``); with this convention the energy flux
is ``d/dt ||u||^2 = -2 Im <u, f e^{-i omega t}>``.

The viscous problem is ``u' + i M u - sigma Delta u = f e^{-i omega t}`` with
Delta the flat Laplacian (diagonal, entries ``-|2 pi k|^2``).

Forcings may be a single Fourier vector (shape ``(d,)``) or an ensemble
(shape ``(n_f, d)``); ensemble norms are root-mean-square over members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.fft import dct
from scipy.spatial import cKDTree

from .quantize import OperatorMatrix, laplacian_diagonal
from .spectral import eigendecompose, local_spacing

__all__ = [
    "WaveError",
    "WavePreconditionError",
    "NoLinearRegime",
    "ForcingSpec",
    "EvolutionResult",
    "broadband_forcing",
    "make_rng",
    "duhamel_coefficient",
    "evolve_forced",
    "free_evolution",
    "flux_residual",
    "duhamel_residual",
    "growth_slope",
    "heisenberg_time",
    "edge_time",
    "resolvent_apply",
    "exact_modes_at",
    "project_out",
    "sobolev_norm",
    "sobolev_scaling",
    "wavefront_energy",
    "concentration_score",
    "evolve_viscous",
    "viscous_steady_state",
]

TWO_PI = 2.0 * np.pi
DEGENERATE_TOL = 1e-12


class WaveError(RuntimeError):
    """Numerical failure in the wave solvers."""


class WavePreconditionError(WaveError, ValueError):
    """Inputs violating the stated preconditions."""


class NoLinearRegime(WaveError):
    """The growth fit found no linear regime (R^2 below threshold)."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) from a single integer seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ================================================================ forcing
@dataclass
class ForcingSpec:
    """Forcing profile in Fourier coefficients with frequency and viscosity.

    Attributes
    ----------
    f : ndarray, shape (d,) or (n_f, d)
    omega : float
    sigma : float
        Viscosity; 0 for the inviscid problem.
    s_dec : float or None
        Declared decay order, |f_k| <= C <k>^{-s_dec}.
    modes : ndarray or None
    """

    f: np.ndarray
    omega: float = 0.0
    sigma: float = 0.0
    s_dec: float | None = None
    modes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.f = np.asarray(self.f, complex)
        if self.sigma < 0:
            raise WavePreconditionError("viscosity must be nonnegative")
        if not np.all(np.isfinite(self.f)):
            raise WavePreconditionError("forcing must be finite")

    @property
    def ensemble(self) -> bool:
        return self.f.ndim == 2

    def decay_fit(self) -> float:
        """Fitted exponent s of |f_k| ~ <k>^{-s} over the nonzero coefficients."""
        if self.modes is None:
            raise WavePreconditionError("decay fit needs the mode list")
        amp = np.sqrt(np.mean(np.abs(np.atleast_2d(self.f)) ** 2, axis=0))
        br = np.sqrt(1.0 + np.sum(self.modes.astype(float) ** 2, axis=1))
        ok = amp > 1e-300
        return float(-np.polyfit(np.log(br[ok]), np.log(amp[ok]), 1)[0])

    def check_decay(self, tol: float = 0.1) -> bool:
        return self.s_dec is None or self.decay_fit() >= self.s_dec - tol


def broadband_forcing(modes: np.ndarray, rng: np.random.Generator, *, s_dec: float = 3.0,
                      k_min: float = 2.0, n_members: int = 1, omega: float = 0.0,
                      master_N: int = 128) -> ForcingSpec:
    """Random-phase forcing with amplitudes <k>^{-s_dec}, unit norm per member.

    Phases are drawn on the fixed master lattice |k|_inf <= master_N and
    restricted to ``modes``, so the same seed gives the same function at
    every truncation (up to the normalization of the truncated tail).
    Modes with |k| < k_min are set to zero, which in particular removes the
    constant mode; the cutoff region of the quantization then carries no
    forcing.
    """
    if np.max(np.abs(modes)) > master_N:
        raise WavePreconditionError(f"modes exceed the master lattice |k| <= {master_N}")
    L = 2 * master_N + 1
    ph_all = rng.uniform(0.0, TWO_PI, size=(n_members, L * L))
    ph = ph_all[:, (modes[:, 0] + master_N) * L + (modes[:, 1] + master_N)]
    k2 = np.sum(modes.astype(float) ** 2, axis=1)
    amp = (1.0 + k2) ** (-0.5 * s_dec)
    amp[k2 < k_min ** 2] = 0.0
    f = amp * np.exp(1j * ph)
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return ForcingSpec(f[0] if n_members == 1 else f, omega, 0.0, s_dec, modes,
                       {"k_min": k_min, "n_members": n_members, "master_N": master_N})


def _as_columns(f):
    f = np.asarray(f, complex)
    return (f[:, None], False) if f.ndim == 1 else (f.T, True)


def _rms_norm(U, axis=0):
    """Ensemble RMS norm; U has members along the last axis."""
    return np.sqrt(np.mean(np.sum(np.abs(U) ** 2, axis=axis), axis=-1))


# ============================================================== evolution
@dataclass
class EvolutionResult:
    times: np.ndarray
    norm2: np.ndarray
    states: np.ndarray | None = None
    sobolev: dict = field(default_factory=dict)
    flux: np.ndarray | None = None
    edge: np.ndarray | None = None
    slope: float | None = None
    r2: float | None = None
    window: tuple | None = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        keys = sorted(self.sobolev)
        header = ["t", "norm2"] + [f"H^{s:g}" for s in keys]
        rows = [[float(t), float(n)] + [float(self.sobolev[s][i]) for s in keys]
                for i, (t, n) in enumerate(zip(self.times, self.norm2))]
        return header, rows


def duhamel_coefficient(lam, omega: float, t: float):
    """(e^{-i omega t} - e^{-i lam t}) / (lam - omega), and i t e^{-i omega t} when resonant."""
    lam = np.asarray(lam, float)
    d = lam - omega
    deg = np.abs(d) <= DEGENERATE_TOL
    # stable closed form: i t e^{-i omega t} e^{-i d t / 2} sinc(d t / 2)
    c = 1j * t * np.exp(-1j * omega * t) * np.exp(-0.5j * d * t) * np.sinc(d * t / TWO_PI)
    return np.where(deg, 1j * t * np.exp(-1j * omega * t), c)


def _spectral_bounds(M: OperatorMatrix):
    A = M.matrix
    radius = np.asarray(abs(A).sum(axis=1)).ravel()
    c = A.diagonal().real
    return float(np.min(c - (radius - np.abs(A.diagonal())))), float(np.max(c + (radius - np.abs(A.diagonal()))))


def _chebyshev_apply(M: OperatorMatrix, funcs, F, bounds=None, tol: float = 1e-14):
    """Apply each function of a list to F via one shared Chebyshev recurrence.

    ``funcs`` maps real arrays to complex arrays; the degree is chosen so
    the trailing coefficients of every function fall below ``tol``.
    """
    a, b = _spectral_bounds(M) if bounds is None else bounds
    a, b = a - 1e-3, b + 1e-3
    half, mid = 0.5 * (b - a), 0.5 * (b + a)
    K = 64
    while True:
        x = np.cos(np.pi * (np.arange(K) + 0.5) / K)
        C = np.array([dct(fn(mid + half * x), type=2) / K for fn in funcs])
        C[:, 0] *= 0.5
        tail = np.max(np.abs(C[:, -8:])) / max(np.max(np.abs(C)), 1e-300)
        if tail < tol or K >= 1 << 16:
            break
        K *= 2
    last = np.nonzero(np.max(np.abs(C), axis=0) > tol * np.max(np.abs(C)))[0]
    K = int(last[-1]) + 1 if last.size else 1
    A = M.matrix
    out = np.zeros((len(funcs),) + F.shape, complex)

    def op(v):
        return (A @ v - mid * v) / half

    t0 = F.astype(complex)
    out += C[:, 0, None, None] * t0
    if K > 1:
        t1 = op(t0)
        out += C[:, 1, None, None] * t1
        for k in range(2, K):
            t0, t1 = t1, 2.0 * op(t1) - t0
            out += C[:, k, None, None] * t1
    return out, {"degree": K, "interval": (a, b)}


def evolve_forced(M: OperatorMatrix, forcing: ForcingSpec, times, *, method: str = "eigen",
                  eig=None, s_list=(), keep_states: bool = False, edge_ratio: float = 0.75) -> EvolutionResult:
    """Inviscid forced evolution from u(0) = 0 by exact spectral formulas.

    Parameters
    ----------
    method : {"eigen", "chebyshev"}
        ``"eigen"`` uses the closed-form Duhamel coefficients in the dense
        eigenbasis; ``"chebyshev"`` applies the same function of M through a
        Chebyshev expansion accurate to machine precision, which avoids the
        dense decomposition for large truncations.
    eig : tuple, optional
        Precomputed ``(w, V)``.
    edge_ratio : float
        The series ``res.edge`` is the fraction of ||u||^2 on modes with
        |k|_inf > edge_ratio * N (see :func:`edge_time`).
    """
    if forcing.sigma != 0:
        raise WavePreconditionError("evolve_forced is the inviscid solver; use evolve_viscous for sigma > 0")
    times = np.asarray(times, float)
    F, ens = _as_columns(forcing.f)
    om = forcing.omega
    if method == "eigen":
        w, V = eigendecompose(M) if eig is None else eig
        fj = V.conj().T @ F
        U = np.stack([V @ (duhamel_coefficient(w, om, t)[:, None] * fj) for t in times])
        meta = {"method": "eigen"}
    elif method == "chebyshev":
        funcs = [lambda lam, t=t: duhamel_coefficient(lam, om, t) for t in times]
        U, meta = _chebyshev_apply(M, funcs, F)
        meta["method"] = "chebyshev"
    else:
        raise WavePreconditionError(f"unknown method {method!r}")
    norm2 = _rms_norm(U, axis=1) ** 2
    res = EvolutionResult(times, norm2, U if keep_states else None, meta=meta)
    res.flux = _flux_series(U, F, om, times)
    res.edge = _edge_series(U, M.modes, M.N, edge_ratio)
    res.meta["edge_ratio"] = edge_ratio
    for s in s_list:
        res.sobolev[float(s)] = np.array([sobolev_norm(U[i].T, s, M.modes) for i in range(len(times))])
    res.meta.update({"omega": om, "N": M.N, "dim": M.dim, "ensemble": ens})
    return res


def free_evolution(M: OperatorMatrix, u0, times, *, method: str = "chebyshev", eig=None) -> np.ndarray:
    """States e^{-i M t} u0 for each t, shape (n_t, d)."""
    times = np.asarray(times, float)
    F = np.asarray(u0, complex)[:, None]
    if method == "eigen":
        w, V = eigendecompose(M) if eig is None else eig
        c = V.conj().T @ F
        return np.stack([(V @ (np.exp(-1j * w * t)[:, None] * c))[:, 0] for t in times])
    U, _ = _chebyshev_apply(M, [lambda lam, t=t: np.exp(-1j * lam * t) for t in times], F)
    return U[:, :, 0]


def _edge_series(U, modes, N, ratio):
    """Fraction of the (ensemble) energy on modes with |k|_inf > ratio * N."""
    out = np.abs(modes).max(axis=1) > ratio * N
    tot = np.sum(np.abs(U) ** 2, axis=(1, 2))
    return np.sum(np.abs(U[:, out]) ** 2, axis=(1, 2)) / np.where(tot > 0, tot, 1.0)


def _flux_series(U, F, om, times):
    """-2 Im <u(t), f e^{-i omega t}>, ensemble-averaged."""
    ph = np.exp(-1j * om * times)
    z = np.einsum("tdk,dk->tk", U.conj(), F) * ph[:, None]
    return -2.0 * np.mean(z.imag, axis=-1)


def _stencil(M, forcing, times, h, **kw):
    """States at t + j h, j = -2..2, and the five-point derivative at t."""
    t = np.asarray(times, float)
    ts = (t[:, None] + h * np.arange(-2, 3)[None]).ravel()
    r = evolve_forced(M, forcing, ts, keep_states=True, **kw)
    U = r.states.reshape(t.size, 5, *r.states.shape[1:])
    dU = (U[:, 0] - 8 * U[:, 1] + 8 * U[:, 3] - U[:, 4]) / (12 * h)
    n2 = r.norm2.reshape(t.size, 5)
    dn2 = (n2[:, 0] - 8 * n2[:, 1] + 8 * n2[:, 3] - n2[:, 4]) / (12 * h)
    return U[:, 2], dU, r.flux.reshape(t.size, 5)[:, 2], dn2


def flux_residual(M: OperatorMatrix, forcing: ForcingSpec, times, h: float = 1e-2, **kw) -> float:
    """Relative mismatch of a five-point derivative of ||u||^2 against -2 Im <u, f e^{-i omega t}>."""
    _, _, flux, dn2 = _stencil(M, forcing, times, h, **kw)
    return float(np.max(np.abs(dn2 - flux)) / max(np.max(np.abs(flux)), 1e-300))


def duhamel_residual(M: OperatorMatrix, forcing: ForcingSpec, times, h: float = 1e-2, **kw) -> float:
    """max_t ||(1/i) u' + M u - f e^{-i omega t}|| / ||f|| with u' by a five-point stencil."""
    U, dU, _, _ = _stencil(M, forcing, times, h, **kw)
    F, _ = _as_columns(forcing.f)
    t = np.asarray(times, float)
    R = [-1j * dU[i] + M.matrix @ U[i] - F * np.exp(-1j * forcing.omega * t[i]) for i in range(t.size)]
    return float(max(_rms_norm(r) for r in R) / _rms_norm(F))


def heisenberg_time(M: OperatorMatrix, omega: float, gamma: float = 0.2, k: int = 20) -> tuple[float, float]:
    """Guard time gamma / (mean spacing of the k eigenvalues nearest omega), and the spacing."""
    dl, _ = local_spacing(M, omega, k)
    return gamma / dl, dl


def edge_time(res: EvolutionResult, frac: float = 0.05) -> float:
    """Last sampled time before the edge fraction first exceeds ``frac``.

    Energy of a forced wave cascades to high frequency; once a visible
    fraction reaches the outer modes of the truncation the finite matrix
    no longer follows the continuum evolution.  Returns the final time when
    the threshold is never crossed.
    """
    if res.edge is None:
        raise WavePreconditionError("result carries no edge series")
    over = np.nonzero(res.edge > frac)[0]
    if over.size == 0:
        return float(res.times[-1])
    if over[0] == 0:
        raise WavePreconditionError("edge fraction exceeds the threshold at the first sample")
    return float(res.times[over[0] - 1])


def growth_slope(res: EvolutionResult, window, *, t_guard: float | None = None,
                 r2_min: float = 0.9) -> tuple[float, float]:
    """Least-squares slope of ||u(t)||^2 on the window [T1, T2] and its R^2.

    Raises
    ------
    WaveError
        If T2 exceeds the Heisenberg guard, or if R^2 < ``r2_min``
        ("no linear regime detected").
    """
    T1, T2 = window
    if t_guard is not None and T2 > t_guard * (1 + 1e-12):
        raise WavePreconditionError(f"window end {T2:g} exceeds the Heisenberg guard {t_guard:g}")
    sel = (res.times >= T1) & (res.times <= T2)
    if sel.sum() < 3:
        raise WavePreconditionError("fit window holds fewer than 3 samples")
    t, y = res.times[sel], res.norm2[sel]
    c, b = np.polyfit(t, y, 1)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - (c * t + b)) ** 2) / ss if ss > 0 else 1.0
    res.slope, res.r2, res.window = float(c), float(r2), (float(T1), float(T2))
    if r2 < r2_min:
        raise NoLinearRegime(f"no linear regime detected: R^2 = {r2:.3f} < {r2_min}")
    return float(c), float(r2)


# ============================================================= resolvent
def resolvent_apply(M: OperatorMatrix, omega: float, eps: float, f, *, method: str = "auto",
                    eig=None, lu=None):
    """u_eps = (M - omega - i eps)^{-1} f.

    ``method`` is ``"eigen"`` (dense eigenbasis, uses ``eig`` if given),
    ``"splu"`` (sparse LU) or ``"auto"`` (eigen when ``eig`` is given or the
    dimension is small).  ``f`` may be an ensemble of shape (n_f, d).
    """
    if not eps > 0:
        raise WavePreconditionError("eps must be positive")
    F, ens = _as_columns(f)
    if method == "auto":
        method = "eigen" if (eig is not None or M.dim <= 1200) else "splu"
    if method == "eigen":
        w, V = eigendecompose(M) if eig is None else eig
        U = V @ ((V.conj().T @ F) / (w - omega - 1j * eps)[:, None])
    elif method == "splu":
        if lu is None:
            lu = resolvent_factor(M, omega, eps)
        U = lu.solve(F)
    else:
        raise WavePreconditionError(f"unknown method {method!r}")
    return U.T if ens else U[:, 0]


def exact_modes_at(M: OperatorMatrix, omega: float, tol: float = 1e-10, k: int = 6,
                   offset: float = 1.234e-5):
    """Orthonormal eigenvectors of M with |lambda - omega| <= tol (shift-invert Lanczos).

    Symmetric truncations of odd dimension can carry such exact eigenvalues
    (for instance a one-dimensional kernel at omega = 0 forced by a
    spectrum-reversing symmetry); they are artifacts of the finite matrix.
    """
    if M.dim <= 2 * k + 2:
        w, V = np.linalg.eigh(M.dense())
    else:
        v0 = np.ones(M.dim) / np.sqrt(M.dim)
        w, V = spl.eigsh(M.matrix.tocsc(), k=k, sigma=omega + offset, which="LM", v0=v0)
    sel = np.abs(w - omega) <= tol
    return w[sel], V[:, sel]


def project_out(f, V):
    """Remove the components of f (or of each ensemble member) along the columns of V."""
    F, ens = _as_columns(f)
    if V.shape[1]:
        F = F - V @ (V.conj().T @ F)
    return F.T if ens else F[:, 0]


def resolvent_factor(M: OperatorMatrix, omega: float, eps: float):
    """Sparse LU of M - omega - i eps (natural ordering keeps the band)."""
    A = (M.matrix - (omega + 1j * eps) * sp.identity(M.dim, format="csr")).tocsc()
    return spl.splu(A, permc_spec="NATURAL")


def sobolev_norm(u, s: float, modes: np.ndarray) -> float:
    """(sum_k (1 + |2 pi k|^2)^s |u_k|^2)^{1/2}; RMS over members for ensembles."""
    w = (1.0 + (TWO_PI ** 2) * np.sum(modes.astype(float) ** 2, axis=1)) ** s
    U = np.atleast_2d(np.asarray(u))  # members along axis 0
    return float(np.sqrt(np.mean(np.sum(w * np.abs(U) ** 2, axis=-1))))


def sobolev_scaling(M: OperatorMatrix, f, omega: float, eps_list, s_list, *,
                    spacing: float | None = None, guard: float = 5.0, method: str = "auto",
                    eig=None) -> dict:
    """Exponents of ||u_eps||_{H^s} ~ eps^{-beta(s)} from a least-squares fit in log-log.

    Raises
    ------
    WaveError
        If the schedule goes below ``guard`` times the local level spacing.
    """
    eps_list = np.sort(np.asarray(eps_list, float))[::-1]
    if spacing is None:
        spacing, _ = local_spacing(M, omega)
    if eps_list.min() < guard * spacing:
        raise WavePreconditionError(f"schedule below resolution: eps = {eps_list.min():.3g} < "
                        f"{guard:g} x spacing {spacing:.3g}")
    norms = {float(s): [] for s in s_list}
    for e in eps_list:
        U = resolvent_apply(M, omega, e, f, method=method, eig=eig)
        for s in s_list:
            norms[float(s)].append(sobolev_norm(U, s, M.modes))
    x = np.log(1.0 / eps_list)
    table = {s: float(np.polyfit(x, np.log(v), 1)[0]) for s, v in norms.items()}
    return {"eps": eps_list.tolist(), "spacing": float(spacing), "norms": norms, "exponents": table}


# ============================================================= wavefront
def wavefront_energy(u, modes: np.ndarray, N: int, lam_w: float, n_phi: int = 32,
                     n_q: int | None = None) -> dict:
    """Wave-packet energy |<u, phi_{q0, phi0}>|^2 on a (q, direction) grid.

    The packet at (q0, phi0) has Fourier coefficients
    ``exp(-|k - lam_w e(phi0)|^2 / (2 lam_w)) e^{-2 pi i k.q0}``
    (frequency width lam_w^{1/2}).  Returns the normalized distribution of
    shape (n_q, n_q, n_phi) with its grid.
    """
    if lam_w > N / 4:
        raise WavePreconditionError(f"packet scale {lam_w:g} too large for truncation N = {N} (need <= N/4)")
    L = 2 * N + 1
    n_q = L if n_q is None else int(n_q)
    if n_q > L:
        raise WavePreconditionError("q grid finer than the truncation")
    U = np.atleast_2d(np.asarray(u))
    phis = np.arange(n_phi) * TWO_PI / n_phi
    grid = np.zeros((U.shape[0], L, L), complex)
    i1, i2 = modes[:, 0] % L, modes[:, 1] % L
    E = np.zeros((n_q, n_q, n_phi))
    sub = np.round(np.arange(n_q) * L / n_q).astype(int)
    kf = modes.astype(float)
    for j, ph in enumerate(phis):
        c = np.array([np.cos(ph), np.sin(ph)]) * lam_w
        win = np.exp(-np.sum((kf - c) ** 2, axis=1) / (2 * lam_w))
        grid[:] = 0
        grid[:, i1, i2] = U * win
        # <u, phi_{q0}> = sum_k u_k win_k e^{2 pi i k.q0}
        val = np.fft.ifft2(grid, axes=(1, 2)) * L * L
        E[:, :, j] = np.mean(np.abs(val[:, sub][:, :, sub]) ** 2, axis=0)
    E /= E.sum()
    q = np.arange(n_q) / n_q
    return {"energy": E, "q": q, "phi": phis, "lam_w": lam_w}


def concentration_score(wf: dict, direction_points: np.ndarray, d_gamma: float = 0.1) -> float:
    """Fraction of wave-packet energy within d_gamma of a direction set.

    ``direction_points`` holds (x, y, phi / 2 pi) triples; distance is the
    Euclidean metric on the periodic unit box in these coordinates.
    """
    tree = cKDTree(np.mod(direction_points, 1.0), boxsize=1.0)
    X, Y, P = np.meshgrid(wf["q"], wf["q"], wf["phi"] / TWO_PI, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), P.ravel()], -1)
    d, _ = tree.query(pts)
    E = wf["energy"].ravel()
    return float(E[d <= d_gamma].sum() / E.sum())


# =============================================================== viscous
def _viscous_operator(M: OperatorMatrix, sigma: float, omega: float, lap=None):
    lap = laplacian_diagonal(M.N) if lap is None else np.asarray(lap, float)
    I = sp.identity(M.dim, format="csr")
    return (1j * (M.matrix - omega * I) - sigma * sp.diags(lap)).tocsc(), lap


def viscous_steady_state(M: OperatorMatrix, forcing: ForcingSpec, lap=None):
    """v with u = e^{-i omega t} v solving u' + i M u - sigma Delta u = f e^{-i omega t}.

    v = (i (M - omega) - sigma Delta)^{-1} f.
    """
    if not forcing.sigma > 0:
        raise WavePreconditionError("viscous problem needs sigma > 0")
    A, _ = _viscous_operator(M, forcing.sigma, forcing.omega, lap)
    F, ens = _as_columns(forcing.f)
    V = spl.splu(A).solve(F)
    return V.T if ens else V[:, 0]


def evolve_viscous(M: OperatorMatrix, forcing: ForcingSpec, times, lap=None, s_list=()) -> EvolutionResult:
    """u(t) = e^{-i omega t} v - e^{tG} v with G = -i M + sigma Delta (Krylov exponential)."""
    if not forcing.sigma > 0:
        raise WavePreconditionError("viscous problem needs sigma > 0")
    times = np.asarray(times, float)
    lap = laplacian_diagonal(M.N) if lap is None else np.asarray(lap, float)
    v = viscous_steady_state(M, forcing, lap)
    Vc, ens = _as_columns(v)
    G = (-1j * M.matrix + forcing.sigma * sp.diags(lap)).tocsr()
    dt = np.diff(times)
    if times[0] != 0 or not np.allclose(dt, dt[0]):
        raise WavePreconditionError("viscous evolution needs uniform times starting at 0")
    T = spl.expm_multiply(G, Vc, start=0.0, stop=times[-1], num=len(times), endpoint=True)
    U = np.exp(-1j * forcing.omega * times)[:, None, None] * Vc[None] - T
    norm2 = _rms_norm(U, axis=1) ** 2
    res = EvolutionResult(times, norm2, None, meta={"sigma": forcing.sigma, "omega": forcing.omega,
                                                     "steady_norm2": float(_rms_norm(Vc) ** 2)})
    for s in s_list:
        res.sobolev[float(s)] = np.array([sobolev_norm(U[i].T, s, M.modes) for i in range(len(times))])
    res.meta["steady_state"] = v
    return res
