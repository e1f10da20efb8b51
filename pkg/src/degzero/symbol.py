"""Degree-0 symbols on the cotangent bundle of the 2-torus.

A symbol is stored as a finite Fourier table

    g(q, phi) = sum_{m, j} c[m1, m2, j] exp(2 pi i m.q) exp(i j phi)

and defines the homogeneous function h(q, p) = g(q, angle(p)) on T*T^2 minus
the zero section.  Evaluation is exact for the stored table.

A three-dimensional variant (``SymbolSpec3D``) depends on the direction of
(p, tau) in R^3, written in spherical angles (phi, theta) with theta the polar
angle measured from the tau axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "SymbolError",
    "SymbolSpec",
    "SymbolSpec3D",
    "PhasePoint",
    "DegreeOneFunction",
    "default_model",
    "unperturbed_model",
    "constant_symbol",
    "default_model_3d",
    "radial_model_3d",
    "eval_symbol",
    "grad_symbol",
    "hamiltonian_field",
    "poisson_bracket",
]

TWO_PI = 2.0 * np.pi


class SymbolError(ValueError):
    """Raised for invalid symbol tables or points outside the domain."""


def _check_nonzero(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    rho = np.hypot(p[..., 0], p[..., 1])
    if np.any(rho == 0.0):
        raise SymbolError("degree-0 symbols are undefined at the zero covector")
    return rho


@dataclass(frozen=True)
class PhasePoint:
    """Point (q, p) of T*T^2 minus the zero section.

    Parameters
    ----------
    q : array_like, shape (2,)
        Base point; reduced modulo 1 on construction.
    p : array_like, shape (2,)
        Nonzero covector.
    """

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.mod(np.asarray(self.q, dtype=float), 1.0)
        p = np.asarray(self.p, dtype=float)
        if q.shape != (2,) or p.shape != (2,):
            raise SymbolError("PhasePoint expects 2-vectors")
        _check_nonzero(p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def rho(self) -> float:
        return float(np.hypot(*self.p))

    @property
    def phi(self) -> float:
        return float(np.arctan2(self.p[1], self.p[0]))

    @property
    def theta(self) -> tuple[float, float, float]:
        """Projection (x, y, angle(p)) to the sphere bundle."""
        return (float(self.q[0]), float(self.q[1]), self.phi)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


class SymbolSpec:
    """Fourier table of a real degree-0 symbol.

    Parameters
    ----------
    coeffs : mapping or ndarray
        Either a mapping ``{(m1, m2, j): complex}`` or a dense array of shape
        ``(2*q_modes+1, 2*q_modes+1, 2*phi_modes+1)`` indexed by
        ``(m1 + q_modes, m2 + q_modes, j + phi_modes)``.
    q_modes, phi_modes : int, optional
        Truncation orders; inferred from a mapping when omitted.
    name : str
        Identifier recorded in matrix metadata and outputs.
    tol : float
        Tolerance for the Hermitian symmetry check.
    """

    def __init__(self, coeffs, q_modes: int | None = None, phi_modes: int | None = None,
                 name: str = "custom", tol: float = 1e-12):
        if isinstance(coeffs, Mapping):
            keys = list(coeffs)
            mq = max([max(abs(k[0]), abs(k[1])) for k in keys] + [0])
            mp = max([abs(k[2]) for k in keys] + [0])
            q_modes = mq if q_modes is None else q_modes
            phi_modes = mp if phi_modes is None else phi_modes
            if mq > q_modes or mp > phi_modes:
                raise SymbolError("coefficient outside the declared truncation")
            table = np.zeros((2 * q_modes + 1, 2 * q_modes + 1, 2 * phi_modes + 1), complex)
            for (m1, m2, j), c in coeffs.items():
                table[m1 + q_modes, m2 + q_modes, j + phi_modes] += complex(c)
        else:
            table = np.array(coeffs, dtype=complex)
            if table.ndim != 3 or table.shape[0] != table.shape[1] or \
                    table.shape[0] % 2 == 0 or table.shape[2] % 2 == 0:
                raise SymbolError("dense coefficient table must have odd shape (2M+1, 2M+1, 2J+1)")
            q_modes = table.shape[0] // 2
            phi_modes = table.shape[2] // 2
        mirror = np.conj(table[::-1, ::-1, ::-1])
        scale = max(1.0, float(np.abs(table).max(initial=0.0)))
        if np.abs(table - mirror).max(initial=0.0) > tol * scale:
            raise SymbolError("coefficients violate c[-m,-j] = conj(c[m,j]); symbol is not real")
        # enforce exact symmetry so evaluation is real to rounding
        table = 0.5 * (table + mirror)
        table.setflags(write=False)
        self.table = table
        self.q_modes = int(q_modes)
        self.phi_modes = int(phi_modes)
        self.name = name
        self._m = np.arange(-self.q_modes, self.q_modes + 1)
        self._j = np.arange(-self.phi_modes, self.phi_modes + 1)
        nz = np.argwhere(table != 0)
        self._terms = (nz[:, 0] - self.q_modes, nz[:, 1] - self.q_modes,
                       nz[:, 2] - self.phi_modes, table[nz[:, 0], nz[:, 1], nz[:, 2]])

    # ------------------------------------------------------------------ access
    def items(self):
        """Yield ``((m1, m2, j), c)`` for nonzero coefficients."""
        nz = np.argwhere(self.table != 0)
        for a, b, c in nz:
            yield (int(a - self.q_modes), int(b - self.q_modes), int(c - self.phi_modes)), \
                complex(self.table[a, b, c])

    def q_support(self) -> list[tuple[int, int]]:
        """Distinct q-modes with a nonzero coefficient."""
        return sorted({(k[0], k[1]) for k, _ in self.items()})

    def fiber_coefficients(self, m: tuple[int, int], phi: np.ndarray) -> np.ndarray:
        """q-Fourier coefficient ``h_m(phi) = sum_j c[m, j] e^{i j phi}``."""
        m1, m2 = m
        if max(abs(m1), abs(m2)) > self.q_modes:
            return np.zeros(np.shape(phi), complex)
        row = self.table[m1 + self.q_modes, m2 + self.q_modes]
        ep = np.exp(1j * np.multiply.outer(np.asarray(phi, float), self._j))
        return ep @ row

    def scaled(self, factor: float) -> "SymbolSpec":
        return SymbolSpec(self.table * factor, name=f"{self.name}*{factor:g}")

    def translated(self, shift: Sequence[float]) -> "SymbolSpec":
        """Symbol ``g(q + shift, phi)``."""
        ph = np.exp(2j * np.pi * (self._m[:, None] * shift[0] + self._m[None, :] * shift[1]))
        return SymbolSpec(self.table * ph[:, :, None], name=f"{self.name}@shift")

    # -------------------------------------------------------------- evaluation
    def _basis(self, x, y, phi):
        ex = np.exp(2j * np.pi * np.multiply.outer(x, self._m))
        ey = np.exp(2j * np.pi * np.multiply.outer(y, self._m))
        ep = np.exp(1j * np.multiply.outer(phi, self._j))
        return ex, ey, ep

    def jet(self, x, y, phi, order: int = 1) -> dict[str, np.ndarray]:
        """Value and partial derivatives of g at arrays of (x, y, phi).

        Parameters
        ----------
        x, y, phi : array_like
            Broadcast-compatible coordinates.
        order : {0, 1, 2}
            Highest derivative order returned.

        Returns
        -------
        dict
            Keys are derivative labels such as ``"g"``, ``"x"``, ``"phi"``,
            ``"x_phi"``.  Values are real arrays.
        """
        x, y, phi = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float),
                                        np.asarray(phi, float))
        labels = {"g": (0, 0, 0)}
        if order >= 1:
            labels.update(x=(1, 0, 0), y=(0, 1, 0), phi=(0, 0, 1))
        if order >= 2:
            labels.update(xx=(2, 0, 0), xy=(1, 1, 0), yy=(0, 2, 0),
                          x_phi=(1, 0, 1), y_phi=(0, 1, 1), phiphi=(0, 0, 2))
        out = {key: np.zeros(x.shape) for key in labels}
        # sum over the (few) nonzero terms; cheaper than dense contraction
        for m1, m2, j, c in zip(*self._terms):
            E = c * np.exp(1j * (2 * np.pi * (m1 * x + m2 * y) + j * phi))
            for key, (a, b, k) in labels.items():
                f = (2j * np.pi * m1) ** a * (2j * np.pi * m2) ** b * (1j * j) ** k
                if f != 0:
                    out[key] += (f * E).real
        return out

    def g(self, x, y, phi) -> np.ndarray:
        """Evaluate g(q, phi)."""
        return self.jet(x, y, phi, order=0)["g"]

    def __call__(self, q, p) -> np.ndarray:
        """Evaluate h(q, p) = g(q, angle(p)) for arrays of shape (..., 2)."""
        q = np.asarray(q, float)
        p = np.asarray(p, float)
        _check_nonzero(p)
        return self.g(q[..., 0], q[..., 1], np.arctan2(p[..., 1], p[..., 0]))

    def sample_range(self, n: int = 128, n_phi: int = 256) -> tuple[float, float]:
        """Sampled range [h_-, h_+] of the symbol on a tensor grid."""
        s = np.arange(n) / n
        ph = np.arange(n_phi) * TWO_PI / n_phi
        vals = []
        for yv in s:
            X, P = np.meshgrid(s, ph, indexing="ij")
            vals.append(self.g(X, np.full_like(X, yv), P))
        v = np.array(vals)
        return float(v.min()), float(v.max())

    # -------------------------------------------------------------------- I/O
    def to_json(self) -> str:
        rows = [[k[0], k[1], k[2], c.real, c.imag] for k, c in self.items()]
        doc = {"q_modes": self.q_modes, "phi_modes": self.phi_modes, "coeffs": rows}
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, name: str = "json") -> "SymbolSpec":
        doc = json.loads(text)
        try:
            coeffs: dict = {}
            for m1, m2, j, re, im in doc["coeffs"]:
                key = (int(m1), int(m2), int(j))
                coeffs[key] = coeffs.get(key, 0.0) + complex(re, im)
            return cls(coeffs, q_modes=int(doc["q_modes"]), phi_modes=int(doc["phi_modes"]),
                       name=name)
        except (KeyError, TypeError, ValueError) as exc:
            raise SymbolError(f"malformed symbol document: {exc}") from exc

    def __repr__(self):
        return f"SymbolSpec(name={self.name!r}, q_modes={self.q_modes}, phi_modes={self.phi_modes})"


# ---------------------------------------------------------------- model zoo
def constant_symbol(c: float) -> SymbolSpec:
    return SymbolSpec({(0, 0, 0): c}, name=f"constant({c:g})")


def default_model(alpha: float = 0.3, beta: float = 0.1) -> SymbolSpec:
    """g = sin(phi) + alpha cos(2 pi x) cos(phi) + beta sin(2 pi y) sin(2 phi)."""
    c: dict = {}

    def add(k, v):
        c[k] = c.get(k, 0) + v

    add((0, 0, 1), -0.5j)
    add((0, 0, -1), 0.5j)
    for m1 in (1, -1):
        for j in (1, -1):
            add((m1, 0, j), alpha / 4)
    # sin(2 pi y) sin(2 phi) = -(e^{2pi i y} - e^{-2pi i y})(e^{2i phi} - e^{-2i phi}) / 4
    for m2 in (1, -1):
        for j in (2, -2):
            add((0, m2, j), -beta / 4 * np.sign(m2) * np.sign(j))
    return SymbolSpec(c, q_modes=1, phi_modes=2, name=f"default(alpha={alpha:g},beta={beta:g})")


def unperturbed_model() -> SymbolSpec:
    """g = sin(phi); the shell carries a translation foliation."""
    return SymbolSpec({(0, 0, 1): -0.5j, (0, 0, -1): 0.5j}, q_modes=0, phi_modes=1,
                      name="unperturbed")


# ------------------------------------------------------ generic operations
def eval_symbol(spec: SymbolSpec, z: PhasePoint) -> float:
    return float(spec(z.q, z.p))


def grad_symbol(spec: SymbolSpec, q, p) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients (dh/dq, dh/dp) at arrays of points.

    Parameters
    ----------
    spec : SymbolSpec
    q, p : array_like, shape (..., 2)

    Returns
    -------
    dq, dp : ndarray, shape (..., 2)
    """
    q = np.asarray(q, float)
    p = np.asarray(p, float)
    rho = _check_nonzero(p)
    phi = np.arctan2(p[..., 1], p[..., 0])
    J = spec.jet(q[..., 0], q[..., 1], phi, order=1)
    dq = np.stack([J["x"], J["y"]], axis=-1)
    # d angle(p) / dp = (-p2, p1) / rho^2
    dphi = np.stack([-p[..., 1], p[..., 0]], axis=-1) / (rho ** 2)[..., None]
    dp = J["phi"][..., None] * dphi
    return dq, dp


def hamiltonian_field(spec: SymbolSpec, q, p) -> np.ndarray:
    """Hamiltonian vector field (qdot, pdot) = (dh/dp, -dh/dq), shape (..., 4)."""
    dq, dp = grad_symbol(spec, q, p)
    return np.concatenate([dp, -dq], axis=-1)


@dataclass
class DegreeOneFunction:
    """Callable pair (value, (d/dq, d/dp)) of a function on T*T^2.

    ``fn(q, p)`` must return ``(value, dq, dp)`` for arrays of shape (..., 2).
    """

    fn: Callable
    name: str = "k"

    def __call__(self, q, p):
        return self.fn(np.asarray(q, float), np.asarray(p, float))

    @classmethod
    def from_symbol(cls, spec: SymbolSpec) -> "DegreeOneFunction":
        # a degree-0 symbol viewed as a function with gradients
        def fn(q, p):
            dq, dp = grad_symbol(spec, q, p)
            return spec(q, p), dq, dp
        return cls(fn, name=spec.name)

    @classmethod
    def rho_times(cls, e: Callable) -> "DegreeOneFunction":
        """Degree-1 function ``k = |p| e(q)`` with ``e(q) -> (value, grad)``."""
        def fn(q, p):
            rho = _check_nonzero(p)
            v, gq = e(q)
            return rho * v, rho[..., None] * gq, v[..., None] * p / rho[..., None]
        return cls(fn, name="rho*e")


def poisson_bracket(a, b, q, p) -> np.ndarray:
    """Poisson bracket {a, b} = d_p a . d_q b - d_q a . d_p b.

    Parameters
    ----------
    a, b : SymbolSpec or DegreeOneFunction
    q, p : array_like, shape (..., 2)
    """
    fa = DegreeOneFunction.from_symbol(a) if isinstance(a, SymbolSpec) else a
    fb = DegreeOneFunction.from_symbol(b) if isinstance(b, SymbolSpec) else b
    _, aq, ap = fa(q, p)
    _, bq, bp = fb(q, p)
    return np.sum(ap * bq, axis=-1) - np.sum(aq * bp, axis=-1)


# ------------------------------------------------------------ 3D symbols
class SymbolSpec3D:
    """Real degree-0 symbol on T*(T^2 x S^1) minus zero, invariant along S^1.

    The table ``c[m1, m2, j, l]`` multiplies
    ``exp(2 pi i m.q) exp(i j phi) exp(i l theta)``, where phi = angle(p) and
    theta in [0, pi] is the polar angle of (p, tau) from the tau axis.

    At the poles (p = 0) the phi-dependent terms are evaluated with phi = 0;
    tables intended to be smooth on the sphere should make them vanish there.
    """

    def __init__(self, coeffs: Mapping, name: str = "custom3d", tol: float = 1e-12):
        keys = list(coeffs)
        self.q_modes = max([max(abs(k[0]), abs(k[1])) for k in keys] + [0])
        self.phi_modes = max([abs(k[2]) for k in keys] + [0])
        self.theta_modes = max([abs(k[3]) for k in keys] + [0])
        Q, P, T = self.q_modes, self.phi_modes, self.theta_modes
        table = np.zeros((2 * Q + 1, 2 * Q + 1, 2 * P + 1, 2 * T + 1), complex)
        for (m1, m2, j, l), c in coeffs.items():
            table[m1 + Q, m2 + Q, j + P, l + T] += complex(c)
        mirror = np.conj(table[::-1, ::-1, ::-1, ::-1])
        if np.abs(table - mirror).max(initial=0.0) > tol * max(1.0, np.abs(table).max()):
            raise SymbolError("3D coefficients violate the reality condition")
        self.table = 0.5 * (table + mirror)
        self.name = name
        self._m = np.arange(-Q, Q + 1)
        self._j = np.arange(-P, P + 1)
        self._l = np.arange(-T, T + 1)

    def q_support(self) -> list[tuple[int, int]]:
        nz = np.argwhere(np.abs(self.table).sum(axis=(2, 3)) != 0)
        return sorted((int(a - self.q_modes), int(b - self.q_modes)) for a, b in nz)

    @staticmethod
    def _angles(p, tau):
        p = np.asarray(p, float)
        tau = np.asarray(tau, float)
        r = np.hypot(p[..., 0], p[..., 1])
        if np.any((r == 0) & (tau == 0)):
            raise SymbolError("3D symbol undefined at (p, tau) = 0")
        phi = np.where(r > 0, np.arctan2(p[..., 1], p[..., 0]), 0.0)
        theta = np.arctan2(r, tau)
        return phi, theta

    def fiber_coefficients(self, m: tuple[int, int], p, tau) -> np.ndarray:
        """q-Fourier coefficient of h(., p, tau) at mode m."""
        m1, m2 = m
        if max(abs(m1), abs(m2)) > self.q_modes:
            return np.zeros(np.shape(p)[:-1], complex)
        phi, theta = self._angles(p, tau)
        blk = self.table[m1 + self.q_modes, m2 + self.q_modes]
        ep = np.exp(1j * np.multiply.outer(phi, self._j))
        et = np.exp(1j * np.multiply.outer(theta, self._l))
        return np.einsum("...a,...b,ab->...", ep, et, blk)

    def __call__(self, q, p, tau) -> np.ndarray:
        q = np.asarray(q, float)
        phi, theta = self._angles(p, tau)
        out = np.zeros(np.broadcast_shapes(q.shape[:-1], phi.shape))
        for a, b, j, l in np.argwhere(self.table != 0):
            c = self.table[a, b, j, l]
            ph = 2 * np.pi * ((a - self.q_modes) * q[..., 0] + (b - self.q_modes) * q[..., 1]) \
                + (j - self.phi_modes) * phi + (l - self.theta_modes) * theta
            out = out + (c * np.exp(1j * ph)).real
        return out

    def h0(self, q, p) -> np.ndarray:
        """h(q, p, 0)."""
        return self(q, p, np.zeros(np.shape(p)[:-1]))

    def h1(self, q, p) -> np.ndarray:
        """h(q, p, 1)."""
        return self(q, p, np.ones(np.shape(p)[:-1]))

    def hn(self, q, p, n: float) -> np.ndarray:
        """h(q, p, n); equals h1(q, p / n) by homogeneity for n > 0."""
        return self(q, p, np.full(np.shape(p)[:-1], float(n)))

    def ranges(self, n: int = 48, n_r: int = 160, r_max: float = 200.0):
        """Sampled ranges I0 = range(h0) and Iinf = range(h1), as (lo, hi) pairs.

        Results are cached per sampling resolution.
        """
        key = (n, n_r, r_max)
        cache = self.__dict__.setdefault("_ranges_cache", {})
        if key not in cache:
            cache[key] = self._ranges(n, n_r, r_max)
        return cache[key]

    def _ranges(self, n, n_r, r_max):
        s = np.arange(n) / n
        ang = np.arange(n) * TWO_PI / n
        X, Y, A = np.meshgrid(s, s, ang, indexing="ij")
        q = np.stack([X, Y], -1)
        d = np.stack([np.cos(A), np.sin(A)], -1)
        v0 = self.h0(q, d)
        r = np.concatenate([[0.0], np.geomspace(1e-3, r_max, n_r)])
        lo, hi = np.inf, -np.inf
        for rv in r:
            if rv == 0.0:
                v = self.h1(q[..., 0, :], np.zeros_like(q[..., 0, :]))
            else:
                v = self.h1(q, rv * d)
            lo, hi = min(lo, v.min()), max(hi, v.max())
        return (float(v0.min()), float(v0.max())), (float(min(lo, v0.min())), float(max(hi, v0.max())))

    def __repr__(self):
        return f"SymbolSpec3D(name={self.name!r})"


def default_model_3d(alpha: float = 0.4) -> SymbolSpec3D:
    """h = cos(theta) + alpha cos(2 pi x) sin(theta), i.e. tau/|(p,tau)| + alpha cos(2 pi x)|p|/|(p,tau)|."""
    c = {(0, 0, 0, 1): 0.5, (0, 0, 0, -1): 0.5}
    for m1 in (1, -1):
        c[(m1, 0, 0, 1)] = alpha / 2 * (-0.5j)
        c[(m1, 0, 0, -1)] = alpha / 2 * 0.5j
    return SymbolSpec3D(c, name=f"default3d(alpha={alpha:g})")


def radial_model_3d() -> SymbolSpec3D:
    """h = tau / |(p, tau)|, so h1(q, p) = 1 / sqrt(1 + |p|^2)."""
    return SymbolSpec3D({(0, 0, 0, 1): 0.5, (0, 0, 0, -1): 0.5}, name="radial3d")
