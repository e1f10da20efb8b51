"""Fourier-truncated quantization of degree-0 symbols on the torus.

Modes k in Z^2 with |k|_inf <= N are ordered k1-major,
``index = (k1 + N)(2N + 1) + (k2 + N)``.  The left (Kohn-Nirenberg)
quantization of h has matrix elements

    A[k, k'] = h_hat_{k - k'}(2 pi k') * chi(2 pi |k'| / r0),

where h_hat_m(p) is the m-th q-Fourier coefficient of h(., p) and chi removes
the singularity of a degree-0 symbol at p = 0.  The angle-independent part of
h (a smooth function of q alone) is a multiplication operator and is kept
without cutoff, so constant symbols quantize to multiples of the identity.  The operator is the Hermitian
part (A + A^H) / 2.  Symbols with few q-modes give sparse banded matrices,
which are stored in CSR form.
"""

from __future__ import annotations

import io as _io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .profiles import cutoff_chi
from .symbol import SymbolSpec, SymbolSpec3D

__all__ = [
    "QuantizeError",
    "OperatorMatrix",
    "mode_grid",
    "quantize",
    "quantize_semiclassical",
    "laplacian_diagonal",
]

TWO_PI = 2.0 * np.pi


class QuantizeError(ValueError):
    """Invalid truncation or symbol for quantization."""


def mode_grid(N: int) -> np.ndarray:
    """Modes (k1, k2), |k|_inf <= N, in k1-major order; shape ((2N+1)^2, 2)."""
    k = np.arange(-N, N + 1)
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    return np.stack([K1.ravel(), K2.ravel()], axis=1)


def _index(N, k1, k2):
    return (k1 + N) * (2 * N + 1) + (k2 + N)


@dataclass
class OperatorMatrix:
    """Hermitian quantization over the Fourier modes |k|_inf <= N.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        Complex Hermitian matrix (real symmetric after :meth:`real_gauge`).
    modes : ndarray, shape (d, 2)
    N : int
    r0 : float or None
        Low-frequency cutoff radius (classical mode).
    symbol : str
    mode : str
        ``"classical"`` or ``"semiclassical(n)"``.
    meta : dict
        Assembly diagnostics, e.g. the relative asymmetry of the raw matrix.
    """

    matrix: sp.csr_matrix
    modes: np.ndarray
    N: int
    r0: float | None
    symbol: str
    mode: str = "classical"
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.matrix.data) or bool(np.all(self.matrix.data.imag == 0))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def hermitian_defect(self) -> float:
        D = self.matrix - self.matrix.getH()
        return float(np.max(np.abs(D.data))) if D.nnz else 0.0

    def bandwidth(self) -> int:
        C = self.matrix.tocoo()
        return int(np.max(np.abs(C.row - C.col))) if C.nnz else 0

    def gauge(self, c) -> "OperatorMatrix":
        """Conjugate by diag(e^{2 pi i k.c}): entries pick up e^{2 pi i (k - k').c}."""
        c = np.asarray(c, float)
        C = self.matrix.tocoo()
        dm = self.modes[C.row] - self.modes[C.col]
        val = C.data * np.exp(1j * TWO_PI * (dm @ c))
        M = sp.csr_matrix((val, (C.row, C.col)), shape=C.shape)
        meta = dict(self.meta)
        meta["gauge"] = (np.asarray(meta.get("gauge", (0.0, 0.0))) + c).tolist()
        return OperatorMatrix(M, self.modes, self.N, self.r0, self.symbol, self.mode, meta)

    def real_gauge(self, denominators: int = 8, tol: float = 1e-13):
        """Find a diagonal phase c in (Z/denominators)^2 making the matrix real.

        Returns ``(c, OperatorMatrix)`` with a real symmetric matrix, or
        ``(None, self)`` when no such gauge exists on the search grid.  The
        spectrum is unchanged.
        """
        C = self.matrix.tocoo()
        dm = self.modes[C.row] - self.modes[C.col]
        scale = max(np.abs(C.data).max(initial=0.0), 1e-300)
        g = np.arange(denominators) / denominators
        for a in g:
            for b in g:
                v = C.data * np.exp(1j * TWO_PI * (dm @ np.array([a, b])))
                if np.max(np.abs(v.imag), initial=0.0) <= tol * scale:
                    M = sp.csr_matrix((v.real, (C.row, C.col)), shape=C.shape)
                    meta = dict(self.meta)
                    meta["gauge"] = [float(a), float(b)]
                    return (float(a), float(b)), OperatorMatrix(M, self.modes, self.N, self.r0,
                                                                 self.symbol, self.mode, meta)
        return None, self

    def banded_upper(self) -> np.ndarray:
        """Upper banded storage ``ab[u + i - j, j] = M[i, j]`` for scipy's banded solvers."""
        u = self.bandwidth()
        C = sp.triu(self.matrix).tocoo()
        dtype = float if self.is_real else complex
        ab = np.zeros((u + 1, self.dim), dtype)
        ab[u + C.row - C.col, C.col] = C.data.real if dtype is float else C.data
        return ab

    def metadata(self) -> dict:
        return {"N": self.N, "r0": self.r0, "symbol": self.symbol, "mode": self.mode,
                "dim": self.dim, **self.meta}

    # ------------------------------------------------------------ export
    def save_npz(self, path) -> None:
        C = self.matrix.tocoo()
        buf = _io.BytesIO()
        np.savez_compressed(buf, row=C.row, col=C.col, data=C.data.astype(complex), modes=self.modes,
                            meta=np.array(json.dumps(self.metadata(), sort_keys=True)))
        from .io import atomic_write_bytes
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load_npz(cls, path) -> "OperatorMatrix":
        z = np.load(path, allow_pickle=False)
        meta = json.loads(str(z["meta"]))
        d = int(meta["dim"])
        M = sp.csr_matrix((z["data"], (z["row"], z["col"])), shape=(d, d))
        extra = {k: v for k, v in meta.items() if k not in ("N", "r0", "symbol", "mode", "dim")}
        return cls(M, z["modes"], int(meta["N"]), meta["r0"], meta["symbol"], meta["mode"], extra)

    def save_csv(self, path) -> None:
        from .io import write_csv
        C = self.matrix.tocoo()
        order = np.lexsort((C.col, C.row))
        rows = ([int(self.modes[C.row[i], 0]), int(self.modes[C.row[i], 1]),
                 int(self.modes[C.col[i], 0]), int(self.modes[C.col[i], 1]),
                 float(np.real(C.data[i])), float(np.imag(C.data[i]))] for i in order)
        comments = [f"{k}={v}" for k, v in sorted(self.metadata().items())]
        write_csv(path, ["k1", "k2", "kp1", "kp2", "re", "im"], rows, comments)


def _assemble(N: int, coef_fn, q_support) -> tuple[sp.csr_matrix, float]:
    modes = mode_grid(N)
    d = modes.shape[0]
    rows, cols, vals = [], [], []
    col = np.arange(d)
    for m in q_support:
        k1 = modes[:, 0] + m[0]
        k2 = modes[:, 1] + m[1]
        ok = (np.abs(k1) <= N) & (np.abs(k2) <= N)
        v = coef_fn(m, modes[ok])
        rows.append(_index(N, k1[ok], k2[ok]))
        cols.append(col[ok])
        vals.append(v)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(d, d), dtype=complex)
    A.eliminate_zeros()
    AH = A.getH().tocsr()
    nA = sp.linalg.norm(A) if A.nnz else 1.0
    asym = float(sp.linalg.norm(A - AH) / nA) if A.nnz else 0.0
    M = ((A + AH) * 0.5).tocsr()
    M.sort_indices()
    return M, asym


def quantize(spec: SymbolSpec, N: int, r0: float = 2.0) -> OperatorMatrix:
    """Classical quantization with low-frequency cutoff chi(2 pi |k'| / r0).

    Raises
    ------
    QuantizeError
        If N is below the q-bandwidth of the symbol.
    """
    if N < spec.q_modes:
        raise QuantizeError(f"bandwidth error: N = {N} < symbol q-bandwidth {spec.q_modes}")
    if not r0 > 0:
        raise QuantizeError("cutoff radius r0 must be positive")

    def coef(m, kp):
        ang = np.arctan2(kp[:, 1], kp[:, 0])  # angle is irrelevant at k' = 0 where chi = 0
        chi = cutoff_chi(TWO_PI * np.hypot(kp[:, 0], kp[:, 1]) / r0)
        c0 = spec.table[m[0] + spec.q_modes, m[1] + spec.q_modes, spec.phi_modes]
        return (spec.fiber_coefficients(m, ang) - c0) * chi + c0

    M, asym = _assemble(N, coef, spec.q_support())
    return OperatorMatrix(M, mode_grid(N), N, float(r0), spec.name, "classical",
                          {"relative_asymmetry": asym})


def quantize_semiclassical(spec3d: SymbolSpec3D, n: int, N: int | None = None,
                           kappa: float = 3.0) -> OperatorMatrix:
    """Matrix of H_n: symbol h(q, 2 pi k', n), with N = kappa * n by default.

    No cutoff is needed since |(p, tau)| >= n > 0.
    """
    if n == 0:
        raise QuantizeError("n = 0: use the classical quantization of h0")
    if n < 0:
        raise QuantizeError("n must be positive")
    N = int(round(kappa * n)) if N is None else int(N)
    if N < spec3d.q_modes:
        raise QuantizeError(f"bandwidth error: N = {N} < symbol q-bandwidth {spec3d.q_modes}")

    def coef(m, kp):
        return spec3d.fiber_coefficients(m, TWO_PI * kp.astype(float), np.full(kp.shape[0], float(n)))

    M, asym = _assemble(N, coef, spec3d.q_support())
    return OperatorMatrix(M, mode_grid(N), N, None, spec3d.name, f"semiclassical({n})",
                          {"relative_asymmetry": asym, "n": int(n)})


def laplacian_diagonal(N: int) -> np.ndarray:
    """Flat torus Laplacian on the modes: entries -|2 pi k|^2."""
    k = mode_grid(N)
    return -(TWO_PI ** 2) * np.sum(k * k, axis=1).astype(float)
