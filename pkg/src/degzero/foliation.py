"""The foliation of the shell boundary Z_0 and its simple structure.

Z_0 is represented by chart branches, each a graph over the torus.  A branch
exposes its field W (in q-coordinates), the Jacobian DW, the radial
coefficient a and the divergence of W with respect to the reference density.
Two kinds of branches exist:

* :class:`SymbolBranch`, a sheet phi = Phi(q) of {g = omega}; states are
  (x, y, phi) and flows use the rescaled Hamiltonian field, so the state stays
  on the shell without re-solving for Phi at every step.
* :class:`TorusFieldBranch`, a hand-built vector field on the torus with a
  chosen density and a := -div W, used for controlled test cases.

On top of the branches the module locates singular points, closed cycles
(via Poincare return maps on transversal circles), checks the Morse-Smale
property and assembles the attracting/repelling sets K+ and K-.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import CriticalPointError, chart_jet, shell_rhs
from .integrate import EventSpec, IntegrationError, integrate_batch
from .symbol import SymbolSpec

__all__ = [
    "FoliationError",
    "NonHyperbolicError",
    "SymbolBranch",
    "TorusFieldBranch",
    "ScaledBranch",
    "FoliationAtlas",
    "SingularPoint",
    "Section",
    "Cycle",
    "Component",
    "SimpleStructure",
    "classify_jacobian",
    "find_singular_points",
    "classify_singular_point",
    "find_cycles",
    "trace_manifolds",
    "check_morse_smale",
    "assemble_simple_structure",
    "verify_attractor",
    "torus_dist",
]


class FoliationError(RuntimeError):
    """Construction or analysis of the foliation failed."""


class NonHyperbolicError(FoliationError):
    """An invariant object is within the hyperbolicity margin of degeneracy."""


def wrap(d):
    """Reduce differences to (-1/2, 1/2]."""
    return d - np.round(d)


def torus_dist(a, b) -> np.ndarray:
    """Flat distance on the unit torus between arrays of points (..., 2)."""
    d = wrap(np.asarray(a, float) - np.asarray(b, float))
    return np.sqrt(np.sum(d * d, axis=-1))


# ============================================================== branches
class _Branch:
    dim: int = 2
    label: str = "branch"

    def lift(self, q) -> np.ndarray:
        raise NotImplementedError

    def pos(self, states) -> np.ndarray:
        return np.asarray(states)[..., :2]

    def vel(self, states) -> np.ndarray:
        raise NotImplementedError

    def W(self, states) -> np.ndarray:
        raise NotImplementedError

    def DW(self, states) -> np.ndarray:
        raise NotImplementedError

    def a(self, states) -> np.ndarray:
        raise NotImplementedError

    def div_mu(self, states) -> np.ndarray:
        raise NotImplementedError

    def mu(self, states) -> np.ndarray:
        raise NotImplementedError

    def invariant(self, states):
        return None

    def fields(self, states):
        """Velocity of the chart flow, W and a at once."""
        return self.vel(states), self.W(states), self.a(states)

    def reduce(self, states) -> np.ndarray:
        s = np.array(states, float, copy=True)
        s[..., :2] = np.mod(s[..., :2], 1.0)
        return s


class SymbolBranch(_Branch):
    """One sheet of the shell {g = omega} as a graph over the torus.

    Parameters
    ----------
    spec : SymbolSpec
    Phi_grid : ndarray (n, n)
        Values of Phi on the grid q = (i/n, j/n), used as Newton starts.
    omega : float
    index : int
    """

    dim = 3

    def __init__(self, spec: SymbolSpec, Phi_grid: np.ndarray, omega: float = 0.0, index: int = 0):
        self.spec = spec
        self.Phi_grid = np.asarray(Phi_grid, float)
        self.omega = float(omega)
        self.index = index
        self.label = f"sheet{index}"
        self._rhs = shell_rhs(spec, with_time=False)

    def lift(self, q, tol: float = 1e-13) -> np.ndarray:
        q = np.mod(np.asarray(q, float), 1.0)
        n = self.Phi_grid.shape[0]
        i = np.rint(q[..., 0] * n).astype(int) % n
        j = np.rint(q[..., 1] * n).astype(int) % n
        ph = self.Phi_grid[i, j]
        for _ in range(30):
            J = self.spec.jet(q[..., 0], q[..., 1], ph, order=1)
            step = (J["g"] - self.omega) / J["phi"]
            ph = ph - step
            if np.all(np.abs(step) < tol):
                break
        res = np.abs(self.spec.g(q[..., 0], q[..., 1], ph) - self.omega)
        if np.any(res > 1e-10):
            raise FoliationError("Newton lift onto the shell failed")
        return np.concatenate([q, np.mod(ph, 2 * np.pi)[..., None]], axis=-1)

    def vel(self, states):
        st = np.asarray(states, float)
        flat = st.reshape(-1, 3)
        out = self._rhs(None, np.concatenate([flat, np.zeros((flat.shape[0], 1))], axis=1))
        return out[:, :3].reshape(st.shape)

    def fields(self, states):
        st = np.asarray(states, float)
        J = self.spec.jet(st[..., 0], st[..., 1], st[..., 2], order=1)
        c, s_ = np.cos(st[..., 2]), np.sin(st[..., 2])
        W = J["phi"][..., None] * np.stack([-s_, c], -1)
        vel = np.concatenate([W, (s_ * J["x"] - c * J["y"])[..., None]], axis=-1)
        a = -(c * J["x"] + s_ * J["y"])
        return vel, W, a

    def a(self, states):
        return self.fields(states)[2]

    def _jet(self, states):
        st = np.asarray(states, float)
        return chart_jet(self.spec, st[..., 0], st[..., 1], st[..., 2])

    def W(self, states):
        st = np.asarray(states, float)
        J = self.spec.jet(st[..., 0], st[..., 1], st[..., 2], order=1)
        return J["phi"][..., None] * np.stack([-np.sin(st[..., 2]), np.cos(st[..., 2])], -1)

    def DW(self, states):
        return self._jet(states).DW

    def div_mu(self, states):
        return self._jet(states).div_mu

    def mu(self, states):
        return self._jet(states).mu

    def invariant(self, states):
        st = np.asarray(states)
        return self.spec.g(st[..., 0], st[..., 1], st[..., 2])

    def reduce(self, states):
        s = super().reduce(states)
        s[..., 2] = np.mod(s[..., 2], 2 * np.pi)
        return s


class TorusFieldBranch(_Branch):
    """A vector field on the torus with density mu and a = -div_mu W.

    Parameters
    ----------
    W : callable
        ``W(q) -> (..., 2)``.
    DW : callable, optional
        ``DW(q) -> (..., 2, 2)``; central differences when omitted.
    mu : callable, optional
        Positive density; uniform when omitted.
    grad_log_mu : callable, optional
    label : str
    """

    dim = 2

    def __init__(self, W: Callable, DW: Callable | None = None, mu: Callable | None = None,
                 grad_log_mu: Callable | None = None, label: str = "torus"):
        self._W = W
        self._DW = DW
        self._mu = mu
        self._glm = grad_log_mu
        self.label = label

    def lift(self, q):
        return np.mod(np.asarray(q, float), 1.0)

    def vel(self, states):
        return self._W(np.asarray(states, float))

    def W(self, states):
        return self._W(np.asarray(states, float))

    def DW(self, states, h: float = 1e-6):
        q = np.asarray(states, float)
        if self._DW is not None:
            return self._DW(q)
        cols = []
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            cols.append((self._W(q + e) - self._W(q - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def mu(self, states):
        q = np.asarray(states, float)
        return np.ones(q.shape[:-1]) if self._mu is None else self._mu(q)

    def div_mu(self, states):
        q = np.asarray(states, float)
        div = np.trace(self.DW(q), axis1=-2, axis2=-1)
        if self._glm is not None:
            div = div + np.sum(self._W(q) * self._glm(q), axis=-1)
        return div

    def a(self, states):
        return -self.div_mu(states)


class ScaledBranch(_Branch):
    """The branch with field f W for a positive function f (same foliation)."""

    def __init__(self, base: _Branch, f: Callable, grad_f: Callable):
        self.base = base
        self.f = f
        self.grad_f = grad_f
        self.dim = base.dim
        self.label = base.label + "*f"

    def lift(self, q):
        return self.base.lift(q)

    def pos(self, states):
        return self.base.pos(states)

    def vel(self, states):
        return self.f(self.pos(states))[..., None] * self.base.vel(states)

    def W(self, states):
        return self.f(self.pos(states))[..., None] * self.base.W(states)

    def DW(self, states):
        q = self.pos(states)
        return self.f(q)[..., None, None] * self.base.DW(states) + \
            self.base.W(states)[..., :, None] * self.grad_f(q)[..., None, :]

    def mu(self, states):
        return self.base.mu(states)

    def div_mu(self, states):
        q = self.pos(states)
        return self.f(q) * self.base.div_mu(states) + np.sum(self.grad_f(q) * self.base.W(states), -1)

    def a(self, states):
        return self.f(self.pos(states)) * self.base.a(states)

    def invariant(self, states):
        return self.base.invariant(states)

    def reduce(self, states):
        return self.base.reduce(states)


# ================================================================= atlas
@dataclass
class FoliationAtlas:
    """Discretized Z_0: branches plus sampled fields on an n x n grid."""

    branches: list
    grid: int
    states: list = field(default_factory=list)
    W: list = field(default_factory=list)
    a: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    symbol: SymbolSpec | None = None
    omega: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def q_grid(self) -> np.ndarray:
        s = np.arange(self.grid) / self.grid
        X, Y = np.meshgrid(s, s, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @classmethod
    def from_branches(cls, branches: Sequence[_Branch], grid: int = 128, **kw) -> "FoliationAtlas":
        atlas = cls(branches=list(branches), grid=grid, **kw)
        q = atlas.q_grid
        for br in atlas.branches:
            st = br.lift(q)
            atlas.states.append(st)
            atlas.W.append(br.W(st))
            atlas.a.append(br.a(st))
            atlas.mu.append(br.mu(st))
        return atlas

    @classmethod
    def from_symbol(cls, spec: SymbolSpec, grid: int = 128, omega: float = 0.0,
                    n_phi: int = 256, shell_tol: float = 1e-10) -> "FoliationAtlas":
        """Build branch charts of {g = omega} by root scanning and continuation.

        Raises
        ------
        CriticalPointError
            If g_phi vanishes at a root (the shell is not a union of graphs).
        FoliationError
            If the number of roots varies over the grid or continuation
            around the torus permutes the sheets.
        """
        s = np.arange(grid) / grid
        X, Y = np.meshgrid(s, s, indexing="ij")
        phs = np.arange(n_phi) * 2 * np.pi / n_phi
        G = spec.g(X[..., None], Y[..., None], phs) - omega
        S0 = G >= 0  # exact zeros count as positive so each root is seen once
        cross = S0 != np.roll(S0, -1, axis=-1)
        G1 = np.roll(G, -1, axis=-1)
        counts = cross.sum(axis=-1)
        if counts.min() != counts.max():
            raise FoliationError("number of shell sheets varies over the torus")
        B = int(counts[0, 0])
        if B == 0:
            raise FoliationError("the level set is empty")
        ii, jj, kk = np.nonzero(cross)
        # linear interpolation then Newton polish
        g0, g1 = G[ii, jj, kk], G1[ii, jj, kk]
        ph = phs[kk] + (2 * np.pi / n_phi) * g0 / (g0 - g1)
        for _ in range(40):
            J = spec.jet(X[ii, jj], Y[ii, jj], ph, order=1)
            ph = ph - (J["g"] - omega) / J["phi"]
        J = spec.jet(X[ii, jj], Y[ii, jj], ph, order=1)
        if np.any(np.abs(J["phi"]) < 1e-8):
            raise CriticalPointError("g_phi vanishes on the shell")
        if np.any(np.abs(J["g"] - omega) > shell_tol):
            raise FoliationError("root polishing failed")
        roots = np.mod(ph, 2 * np.pi).reshape(grid, grid, B)
        roots.sort(axis=-1)

        def ang(u, v):
            return np.abs(np.angle(np.exp(1j * (u - v))))

        # continuation: first along y at x = 0, then along x
        Phi = np.zeros((B, grid, grid))
        Phi[:, 0, 0] = roots[0, 0]
        for j in range(1, grid):
            for b in range(B):
                k = np.argmin(ang(roots[0, j], Phi[b, 0, j - 1]))
                Phi[b, 0, j] = roots[0, j, k]
        for i in range(1, grid):
            for b in range(B):
                k = np.argmin(ang(roots[i], Phi[b, i - 1][:, None]), axis=-1)
                Phi[b, i] = roots[i, np.arange(grid), k]
        # consistency: labels distinct and periodic
        for b in range(B):
            for c in range(b + 1, B):
                if np.min(ang(Phi[b], Phi[c])) < 1e-9:
                    raise FoliationError("continuation merged two sheets")
            kx = [np.argmin(ang(roots[0, j], Phi[b, grid - 1, j])) for j in range(grid)]
            if np.any(ang(roots[0, np.arange(grid), kx], Phi[b, 0]) > 1e-6):
                raise FoliationError("sheets are permuted around the x-cycle; charts are not graphs")
            ky = [np.argmin(ang(roots[i, 0], Phi[b, i, grid - 1])) for i in range(grid)]
            if np.any(ang(roots[np.arange(grid), 0, ky], Phi[b, :, 0]) > 1e-6):
                raise FoliationError("sheets are permuted around the y-cycle; charts are not graphs")
        branches = [SymbolBranch(spec, Phi[b], omega=omega, index=b) for b in range(B)]
        return cls.from_branches(branches, grid=grid, symbol=spec, omega=omega)

    def polar_residual(self) -> float:
        """max |a + div_mu W| over the grid (polar identity with n = 2)."""
        r = 0.0
        for br, st in zip(self.branches, self.states):
            r = max(r, float(np.max(np.abs(br.a(st) + br.div_mu(st)))))
        return r

    def sample(self, b: int, n: int):
        """Chart states, W and a of branch b on an n x n grid."""
        s = np.arange(n) / n
        q = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1)
        br = self.branches[b]
        st = br.lift(q)
        return st, br.W(st), br.a(st)

    def refined(self, factor: int) -> "FoliationAtlas":
        """Same branches sampled on a grid refined by ``factor`` (Newton lifts)."""
        return FoliationAtlas.from_branches(self.branches, grid=self.grid * factor,
                                            symbol=self.symbol, omega=self.omega)

    def random_states(self, rng: np.random.Generator, n: int):
        """Uniform random points on Z_0: (branch indices, states)."""
        b = rng.integers(0, len(self.branches), size=n)
        q = rng.random((n, 2))
        out = []
        for i in range(n):
            out.append(self.branches[b[i]].lift(q[i]))
        return b, out


# ======================================================= singular points
@dataclass
class SingularPoint:
    branch: int
    q: np.ndarray
    state: np.ndarray
    DW: np.ndarray
    eigenvalues: np.ndarray
    trace: float
    cls: str
    stability: str

    def to_dict(self):
        return {"branch": self.branch, "q": self.q, "DW": self.DW,
                "eigenvalues_re": np.real(self.eigenvalues), "eigenvalues_im": np.imag(self.eigenvalues),
                "trace": self.trace, "class": self.cls, "stability": self.stability}


def classify_jacobian(DW, margin: float = 1e-3) -> tuple[str, str, np.ndarray]:
    """Classify a hyperbolic zero from its Jacobian.

    Returns
    -------
    cls : {"saddle", "node", "focus"}
    stability : {"ws", "wu"}
        Sign of the trace (negative: ws).
    eigenvalues : ndarray

    Raises
    ------
    NonHyperbolicError
        If an eigenvalue real part or the trace is within ``margin`` (relative
        to the spectral radius) of 0.
    """
    DW = np.asarray(DW, float)
    ev = np.linalg.eigvals(DW)
    scale = max(np.max(np.abs(ev)), 1e-300)
    tr = float(np.trace(DW))
    if np.min(np.abs(ev.real)) < margin * scale:
        raise NonHyperbolicError("eigenvalue with vanishing real part")
    if abs(tr) < margin * scale:
        raise NonHyperbolicError("trace within the hyperbolicity margin")
    det = float(np.linalg.det(DW))
    if det < 0:
        cls = "saddle"
    elif np.all(np.abs(ev.imag) <= 1e-14 * scale):
        cls = "node"
    else:
        cls = "focus"
    return cls, ("ws" if tr < 0 else "wu"), ev


def classify_singular_point(atlas: FoliationAtlas, branch: int, state, margin: float = 1e-3,
                            zero_tol: float = 1e-10) -> SingularPoint:
    br = atlas.branches[branch]
    st = np.asarray(state, float)
    if np.linalg.norm(br.W(st)) > zero_tol:
        raise ValueError("state is not a zero of W")
    DW = np.asarray(br.DW(st), float)
    cls, stab, ev = classify_jacobian(DW, margin)
    return SingularPoint(branch=branch, q=np.mod(br.pos(st), 1.0), state=br.reduce(st), DW=DW,
                         eigenvalues=ev, trace=float(np.trace(DW)), cls=cls, stability=stab)


def find_singular_points(atlas: FoliationAtlas, margin: float = 1e-3, zero_tol: float = 1e-10,
                         dedup: float = 1e-6):
    """Locate and classify all zeros of W on every branch.

    Cells whose corner values of both components change sign are refined by
    Newton steps on the chart.  Returns ``(points, warnings)``.
    """
    pts: list[SingularPoint] = []
    notes: list[str] = []
    n = atlas.grid
    for b, br in enumerate(atlas.branches):
        Wg = atlas.W[b]
        sx = np.sign(Wg[..., 0])
        sy = np.sign(Wg[..., 1])

        def changes(S):
            c = np.stack([S, np.roll(S, -1, 0), np.roll(S, -1, 1), np.roll(np.roll(S, -1, 0), -1, 1)])
            return (c.max(0) > 0) & (c.min(0) < 0) | (c == 0).any(0)

        cells = np.argwhere(changes(sx) & changes(sy))
        for i, j in cells:
            q = np.array([(i + 0.5) / n, (j + 0.5) / n])
            st = br.lift(q)
            ok = False
            for _ in range(60):
                Wv = br.W(st)
                if np.linalg.norm(Wv) <= zero_tol:
                    ok = True
                    break
                D = br.DW(st)
                try:
                    dq = np.linalg.solve(D, -Wv)
                except np.linalg.LinAlgError:
                    break
                if np.linalg.norm(dq) > 2.0 / n:
                    dq *= (2.0 / n) / np.linalg.norm(dq)
                q = br.pos(st) + dq
                st = br.lift(q) if br.dim == 2 else _relift(br, st, q)
            if not ok:
                notes.append(f"Newton did not converge in cell ({i},{j}) of branch {b}")
                continue
            qq = np.mod(br.pos(st), 1.0)
            if any(p.branch == b and torus_dist(p.q, qq) < dedup for p in pts):
                continue
            pts.append(classify_singular_point(atlas, b, st, margin=margin, zero_tol=zero_tol))
    for msg in notes:
        warnings.warn(msg, RuntimeWarning)
    return pts, notes


def _relift(br: SymbolBranch, st, q):
    # Newton onto the sheet from the current phi (avoids jumping sheets)
    q = np.asarray(q, float)
    ph = float(st[2])
    for _ in range(30):
        J = br.spec.jet(q[0], q[1], ph, order=1)
        d = (float(J["g"]) - br.omega) / float(J["phi"])
        ph -= d
        if abs(d) < 1e-14:
            break
    return np.array([q[0], q[1], ph])


# ================================================================ cycles
@dataclass(frozen=True)
class Section:
    """Closed transversal: the circle {q[axis] = value} on a branch.

    ``axis = 1`` means the horizontal circle y = value, parametrized by x.
    """

    branch: int
    axis: int
    value: float


@dataclass
class Cycle:
    branch: int
    section: Section
    anchor: np.ndarray  # state on the section
    period: float
    multiplier: float
    stability: str
    residual: float
    orbit: np.ndarray = field(repr=False, default=None)  # dense states along one period
    winding: tuple = (0, 0)

    @property
    def det(self) -> float:
        return self.multiplier

    def to_dict(self):
        return {"branch": self.branch, "section": [self.section.axis, self.section.value],
                "anchor": self.anchor, "period": self.period, "multiplier": self.multiplier,
                "stability": self.stability, "residual": self.residual, "winding": list(self.winding)}


def _chart_rhs(br: _Branch, variational: bool = False, sign: float = 1.0):
    d = br.dim

    def rhs(s, Y):
        st = Y[:, :d]
        out = np.zeros_like(Y)
        out[:, :d] = sign * br.vel(st)
        if variational:
            D = br.DW(st)
            out[:, d:d + 2] = sign * np.einsum("bij,bj->bi", D, Y[:, d:d + 2])
        return out

    return rhs


def flow_chart(br: _Branch, states, s_max, *, tol: float = 1e-10, events=(), record=True,
               h_max=np.inf, invariant_tol: float = 1e-9):
    """Integrate the chart flow dstate/ds = W on one branch (batched)."""
    Y0 = np.atleast_2d(np.asarray(states, float))
    inv = None
    if br.invariant(Y0) is not None:
        def inv(Y):
            return br.invariant(Y[:, :br.dim])
    sgn = np.sign(np.broadcast_to(np.asarray(s_max, float), (Y0.shape[0],)))
    sgn = np.where(sgn == 0, 1.0, sgn)

    def rhs(s, Y):
        return br.vel(Y)

    return integrate_batch(rhs, Y0, s_max, rtol=tol, atol=tol * 1e-2, events=events,
                           invariant=inv, invariant_tol=invariant_tol if inv else None,
                           record=record, h_max=h_max)


def _return_map(br: _Branch, sec: Section, x, s_max: float, tol: float):
    """Return-map data for points x on the section (vectorized)."""
    ax, ox = sec.axis, 1 - sec.axis
    q = np.zeros((x.size, 2))
    q[:, ox] = x
    q[:, ax] = sec.value
    st = np.atleast_2d(br.lift(q))
    W0 = br.W(st)[:, ax]
    sig = np.sign(W0)
    d = br.dim
    # extra constant components carry the per-member target and direction
    Y0 = np.concatenate([st, np.zeros((x.size, 2)), (sec.value + sig)[:, None], sig[:, None]], axis=1)
    Y0[:, d + ox] = 1.0

    ev = EventSpec(lambda s, Y: (Y[:, ax] - Y[:, d + 2]) * Y[:, d + 3], "return", +1)
    res = integrate_batch(_chart_rhs(br, variational=True), Y0, s_max, rtol=tol, atol=tol * 1e-2,
                          events=[ev], record=False,
                          invariant=(lambda Y: br.invariant(Y[:, :d])) if br.invariant(st) is not None else None,
                          invariant_tol=1e-9 if br.invariant(st) is not None else None)
    Yf = res.y_final
    returned = res.status == "return"
    Wf = br.W(Yf[:, :d])
    dlt = Yf[:, d:d + 2]
    # derivative of the return map: project the tangent vector along W onto the section
    Pp = dlt[:, ox] - Wf[:, ox] / Wf[:, ax] * dlt[:, ax]
    disp = Yf[:, ox] - x
    return returned, disp, Pp, res.s_final, Yf[:, :d]


def _orbit_samples(br: _Branch, state, period: float, n: int = 4000, tol: float = 1e-11):
    res = flow_chart(br, state[None, :], period, tol=tol)
    return br.reduce(densify(br, res.s[0], res.y[0], n))


def densify(br: _Branch, s, y, n: int) -> np.ndarray:
    """Resample a recorded trajectory on ~n points via cubic Hermite interpolation."""
    s = np.asarray(s)
    y = np.asarray(y)
    f = br.vel(y)
    h = np.diff(s)
    k = np.maximum(1, np.ceil(np.abs(h) / (abs(s[-1] - s[0]) / n)).astype(int))
    seg = np.repeat(np.arange(h.size), k)
    u = np.concatenate([np.arange(kk) / kk for kk in k])
    out = _hermite_eval(h[seg], y[seg], f[seg], y[seg + 1], f[seg + 1], u)
    return np.vstack([out, y[-1:]])


def _hermite_eval(h, y0, f0, y1, f1, u):
    u = u[:, None]
    h = h[:, None]
    return (2 * u ** 3 - 3 * u ** 2 + 1) * y0 + (u ** 3 - 2 * u ** 2 + u) * h * f0 + \
        (-2 * u ** 3 + 3 * u ** 2) * y1 + (u ** 3 - u ** 2) * h * f1


def find_cycles(atlas: FoliationAtlas, sections: Sequence[Section] | None = None,
                s_max: float = 10.0, n_samples: int = 64, margin: float = 1e-3,
                tol: float = 1e-11, dedup: float = 1e-6):
    """Closed leaves crossing the given transversal circles.

    Parameters
    ----------
    sections : sequence of Section, optional
        Defaults to the circles x = 0 and y = 0 on every branch.
    s_max : float
        Maximal rescaled return time.

    Returns
    -------
    cycles : list of Cycle
    notes : list of str
        Skipped sections and other notices.

    Raises
    ------
    NonHyperbolicError
        If the return map is the identity (a continuum of closed leaves) or a
        multiplier is within ``margin`` of 1.
    """
    if sections is None:
        sections = [Section(b, ax, 0.0) for b in range(len(atlas.branches)) for ax in (1, 0)]
    cycles: list[Cycle] = []
    notes: list[str] = []
    for sec in sections:
        br = atlas.branches[sec.branch]
        ax, ox = sec.axis, 1 - sec.axis
        xs = (np.arange(n_samples) + 0.5) / n_samples
        q = np.zeros((n_samples * 4, 2))
        q[:, ox] = (np.arange(n_samples * 4) + 0.5) / (n_samples * 4)
        q[:, ax] = sec.value
        Wn = br.W(np.atleast_2d(br.lift(q)))[:, ax]
        if np.min(np.abs(Wn)) < 1e-6 * np.max(np.abs(br.W(np.atleast_2d(br.lift(q))))) \
                or np.ptp(np.sign(Wn)) > 0:
            notes.append(f"section {sec} is not transversal; skipped")
            continue
        returned, disp, Pp, T, _ = _return_map(br, sec, xs, s_max, tol)
        if not np.all(returned):
            notes.append(f"section {sec}: {int((~returned).sum())} points did not return within s_max")
            continue
        F = wrap(disp)
        wind = np.round(disp - F).astype(int)
        if np.max(np.abs(F)) < 1e-9:
            raise NonHyperbolicError(
                f"return map on section {sec} is the identity: continuum of closed leaves with multiplier 1")
        Fn = np.roll(F, -1)
        brk = np.nonzero((np.sign(F) != np.sign(Fn)) & (np.abs(F - Fn) < 0.5))[0]
        for i in brk:
            lo, hi = xs[i], xs[(i + 1) % n_samples] + (1.0 if i == n_samples - 1 else 0.0)
            flo = F[i]
            x = lo - flo * (hi - lo) / (Fn[i] - flo)
            for _ in range(60):
                r, dsp, pp, TT, fin = _return_map(br, sec, np.array([x % 1.0]), s_max, tol)
                f = wrap(dsp[0])
                if abs(f) < 1e-13:
                    break
                step = -f / (pp[0] - 1.0)
                xn = x + step
                if not (lo <= xn <= hi):  # damped: bisect inside the bracket
                    xn = 0.5 * (lo + hi)
                if np.sign(f) == np.sign(flo):
                    lo, flo = x, f
                else:
                    hi = x
                x = xn
            r, dsp, pp, TT, fin = _return_map(br, sec, np.array([x % 1.0]), s_max, tol)
            res_ = abs(wrap(dsp[0]))
            mult = float(pp[0])
            if abs(abs(mult) - 1.0) < margin:
                raise NonHyperbolicError(f"cycle multiplier {mult} within margin of 1")
            qa = np.zeros(2)
            qa[ox] = x % 1.0
            qa[ax] = sec.value
            anchor = br.reduce(np.atleast_2d(br.lift(qa))[0])
            if any(c.branch == sec.branch and
                   np.min(torus_dist(br.pos(c.orbit), anchor[:2])) < 1e-5 for c in cycles):
                continue
            orbit = _orbit_samples(br, anchor, float(TT[0]))
            wnd = [0, 0]
            wnd[ox] = int(np.round(dsp[0] - wrap(dsp[0])))
            wnd[ax] = int(np.sign(br.W(anchor[None, :])[0, ax]))
            cycles.append(Cycle(branch=sec.branch, section=sec, anchor=anchor, period=float(TT[0]),
                                multiplier=mult, stability="attracting" if abs(mult) < 1 else "repelling",
                                residual=float(res_), orbit=orbit, winding=tuple(wnd)))
    return cycles, notes


# ============================================================= structure
@dataclass
class Component:
    """Invariant piece of K+ or K-: a point, a cycle or a traced manifold."""

    kind: str
    branch: int
    states: np.ndarray
    source: object = None

    @property
    def positions(self):
        return np.mod(np.asarray(self.states)[:, :2], 1.0)

    def to_dict(self):
        return {"kind": self.kind, "branch": self.branch, "n_samples": int(len(self.states)),
                "first": self.states[0], "source": self.source.to_dict() if hasattr(self.source, "to_dict") else None}


class _Distance:
    """Distance from chart states to a union of components (per branch)."""

    def __init__(self, comps: Sequence[Component], nb: int):
        self.trees = {}
        for b in range(nb):
            P = [c.positions for c in comps if c.branch == b]
            if P:
                self.trees[b] = cKDTree(np.mod(np.vstack(P), 1.0), boxsize=1.0 + 1e-12)

    def __call__(self, b: int, states) -> np.ndarray:
        st = np.atleast_2d(states)
        if b not in self.trees:
            return np.full(st.shape[0], np.inf)
        d, _ = self.trees[b].query(np.mod(st[:, :2], 1.0))
        return d


@dataclass
class SimpleStructure:
    K_plus: list
    K_minus: list
    points: list
    cycles: list
    basin: dict = field(default_factory=dict)
    verified: bool = False
    nb: int = 1

    def __post_init__(self):
        self._dp = _Distance(self.K_plus, self.nb)
        self._dm = _Distance(self.K_minus, self.nb)

    def dist_plus(self, b, states):
        return self._dp(b, states)

    def dist_minus(self, b, states):
        return self._dm(b, states)

    def direction_set(self, which: str = "+") -> np.ndarray:
        """Points (x, y, direction/2pi) of the cone over K+ (or K-)."""
        comps = self.K_plus if which == "+" else self.K_minus
        out = []
        for c in comps:
            st = np.asarray(c.states)
            if st.shape[1] < 3:
                raise FoliationError("direction sets need symbol branches")
            out.append(np.column_stack([np.mod(st[:, 0], 1), np.mod(st[:, 1], 1),
                                        np.mod(st[:, 2], 2 * np.pi) / (2 * np.pi)]))
        return np.vstack(out)

    def to_dict(self):
        return {"K_plus": [c.to_dict() for c in self.K_plus],
                "K_minus": [c.to_dict() for c in self.K_minus],
                "basin": self.basin, "verified": self.verified}


def _unstable_seeds(br, sp: SingularPoint, eps: float, stable: bool = False):
    ev, V = np.linalg.eig(sp.DW)
    k = np.argmin(ev.real) if stable else np.argmax(ev.real)
    v = np.real(V[:, k])
    v /= np.linalg.norm(v)
    out = []
    for sgn in (1.0, -1.0):
        q = sp.q + sgn * eps * v
        out.append(br.lift(q) if br.dim == 2 else _relift(br, sp.state, q))
    return out


def trace_manifolds(atlas, sp: SingularPoint, targets: _Distance, *, stable: bool = False,
                    eps: float = 1e-6, s_max: float = 60.0, capture: float = 1e-3,
                    saddles: Sequence[SingularPoint] = (), tol_sc: float = 1e-4):
    """Trace the two branches of the unstable (or stable) manifold of a saddle.

    Returns a list of dicts with the traced states, whether the branch was
    captured by ``targets`` and the minimal distance to other saddles.
    """
    br = atlas.branches[sp.branch]
    sign = -1.0 if stable else 1.0
    out = []
    for st0 in _unstable_seeds(br, sp, eps, stable=stable):
        ev = EventSpec(lambda s, Y: targets(sp.branch, Y) - capture, "captured", -1)
        res = flow_chart(br, st0[None, :], sign * s_max, events=[ev], tol=1e-10)
        tr = br.reduce(res.y[0])
        dmin = np.inf
        left = torus_dist(tr[:, :2], sp.q) > 10 * tol_sc
        for other in saddles:
            if other.branch != sp.branch:
                continue
            dd = torus_dist(tr[:, :2], other.q)
            if other is sp:
                dd = np.where(np.maximum.accumulate(left), dd, np.inf)
            dmin = min(dmin, float(np.min(dd)))
        out.append({"states": tr, "captured": res.status[0] == "captured", "min_saddle_dist": dmin})
    return out


def check_morse_smale(atlas, points, cycles, *, tol_sc: float = 1e-4, s_max: float = 60.0,
                      capture: float = 1e-3, eps: float = 1e-6) -> dict:
    """Hyperbolicity and absence of saddle connections.

    Hyperbolicity of points and cycles is guaranteed by successful
    classification; this routine traces every saddle separatrix and reports a
    suspected connection when a branch passes within ``tol_sc`` of a saddle or
    is not captured by an attracting (resp. repelling) object.
    """
    att = [Component("point", p.branch, p.state[None, :], p) for p in points
           if p.cls != "saddle" and p.stability == "ws"]
    att += [Component("cycle", c.branch, c.orbit, c) for c in cycles if c.stability == "attracting"]
    rep = [Component("point", p.branch, p.state[None, :], p) for p in points
           if p.cls != "saddle" and p.stability == "wu"]
    rep += [Component("cycle", c.branch, c.orbit, c) for c in cycles if c.stability == "repelling"]
    nb = len(atlas.branches)
    d_att, d_rep = _Distance(att, nb), _Distance(rep, nb)
    saddles = [p for p in points if p.cls == "saddle"]
    reasons = []
    manifolds = []
    for sp in saddles:
        for stable, targ in ((False, d_att), (True, d_rep)):
            for k, m in enumerate(trace_manifolds(atlas, sp, targ, stable=stable, eps=eps, s_max=s_max,
                                                  capture=capture, saddles=saddles, tol_sc=tol_sc)):
                manifolds.append({"saddle": sp, "stable": stable, "branch_index": k, **m})
                if m["min_saddle_dist"] < tol_sc:
                    reasons.append(f"saddle connection suspected from saddle at {np.round(sp.q, 6).tolist()}")
                elif not m["captured"]:
                    reasons.append(f"separatrix of saddle at {np.round(sp.q, 6).tolist()} not captured")
    return {"passed": not reasons, "reasons": sorted(set(reasons)), "manifolds": manifolds,
            "n_points": len(points), "n_cycles": len(cycles), "tol_sc": tol_sc}


def assemble_simple_structure(atlas, points=None, cycles=None, *, rng=None, n_seeds: int = 200,
                              s_max: float = 80.0, capture: float = 1e-3, eps: float = 1e-6,
                              tol_sc: float = 1e-4, on_set_tol: float = 1e-6) -> SimpleStructure:
    """Assemble K+ and K- and test the transit picture on random seeds.

    Raises
    ------
    FoliationError
        If the Morse-Smale check fails or a traced manifold is not captured.
    """
    if points is None:
        points, _ = find_singular_points(atlas)
    if cycles is None:
        cycles, _ = find_cycles(atlas)
    ms = check_morse_smale(atlas, points, cycles, tol_sc=tol_sc, capture=capture, eps=eps)
    if not ms["passed"]:
        raise FoliationError("Morse-Smale check failed: " + "; ".join(ms["reasons"]))
    Kp = [Component("point", p.branch, p.state[None, :], p) for p in points
          if p.cls != "saddle" and p.stability == "ws"]
    Kp += [Component("cycle", c.branch, c.orbit, c) for c in cycles if c.stability == "attracting"]
    Km = [Component("point", p.branch, p.state[None, :], p) for p in points
          if p.cls != "saddle" and p.stability == "wu"]
    Km += [Component("cycle", c.branch, c.orbit, c) for c in cycles if c.stability == "repelling"]
    for m in ms["manifolds"]:
        sp = m["saddle"]
        if not m["stable"] and sp.stability == "ws":
            Kp.append(Component("manifold", sp.branch, np.vstack([sp.state[None, :], m["states"]]), sp))
        if m["stable"] and sp.stability == "wu":
            Km.append(Component("manifold", sp.branch, np.vstack([sp.state[None, :], m["states"]]), sp))
    for p in points:
        if p.cls == "saddle":
            (Kp if p.stability == "ws" else Km).append(Component("point", p.branch, p.state[None, :], p))
    S = SimpleStructure(K_plus=Kp, K_minus=Km, points=points, cycles=cycles, nb=len(atlas.branches))
    # disjointness of K+ and K-
    for c in Kp:
        if np.min(S.dist_minus(c.branch, c.states)) < capture:
            raise FoliationError("K+ and K- intersect")
    if rng is not None and n_seeds > 0:
        S.basin = basin_statistics(atlas, S, rng, n_seeds, s_max=s_max, capture=capture,
                                   on_set_tol=on_set_tol)
    S.verified = True
    return S


def basin_statistics(atlas, S: SimpleStructure, rng, n: int, s_max: float = 80.0,
                     capture: float = 1e-3, on_set_tol: float = 1e-6) -> dict:
    """Forward/backward convergence of random Z_0 seeds to K+ / K-."""
    bidx, states = atlas.random_states(rng, n)
    fwd = np.zeros(n, bool)
    bwd = np.zeros(n, bool)
    t_f = np.full(n, np.nan)
    t_b = np.full(n, np.nan)
    on_set = np.zeros(n, bool)
    for b in range(len(atlas.branches)):
        sel = np.nonzero(bidx == b)[0]
        if sel.size == 0:
            continue
        st = np.array([states[i] for i in sel])
        br = atlas.branches[b]
        on_set[sel] = (S.dist_plus(b, st) < on_set_tol) | (S.dist_minus(b, st) < on_set_tol)
        for sign, fn, hit, tt in ((1.0, S.dist_plus, fwd, t_f), (-1.0, S.dist_minus, bwd, t_b)):
            ev = EventSpec(lambda s, Y, fn=fn, b=b: fn(b, Y) - capture, "captured", -1)
            res = flow_chart(br, st, sign * s_max, events=[ev], record=False, tol=1e-9)
            start_in = fn(b, st) < capture
            hit[sel] = (res.status == "captured") | start_in
            tt[sel] = np.where(start_in, 0.0, np.abs(res.s_final))
    both = fwd & bwd
    return {"n_seeds": int(n), "forward_fraction": float(fwd.mean()),
            "backward_fraction": float(bwd.mean()), "both_fraction": float(both.mean()),
            "on_invariant_set": int(on_set.sum()),
            "unexplained": int((~both & ~on_set).sum()),
            "max_forward_capture_time": float(np.nanmax(np.where(fwd, t_f, np.nan))) if fwd.any() else None,
            "max_backward_capture_time": float(np.nanmax(np.where(bwd, t_b, np.nan))) if bwd.any() else None}


def verify_attractor(atlas, comps: Sequence[Component], radius: float, *, s_max: float = 20.0,
                     n_grid: int = 8, n_anchor: int = 24, tol: float = 1e-3):
    """Check that U = {dist(., K) < radius} is forward invariant and shrinks onto K.

    Returns
    -------
    ok : bool
    witness : dict or None
        A sample leaving U (or not contracting), when ``ok`` is False.
    """
    nb = len(atlas.branches)
    D = _Distance(comps, nb)
    s = (np.arange(n_grid) + 0.5) / n_grid
    for b in sorted({c.branch for c in comps}):
        br = atlas.branches[b]
        cand = []
        for c in comps:
            if c.branch != b:
                continue
            for p in c.positions[:: max(1, len(c.states) // n_anchor)]:
                off = np.stack(np.meshgrid(s - 0.5, s - 0.5, indexing="ij"), -1).reshape(-1, 2) * 2 * radius
                cand.append(p + off)
        q = np.vstack(cand)
        st = np.atleast_2d(br.lift(q))
        inside = D(b, st) < radius
        st = st[inside]
        if st.shape[0] == 0:
            continue
        res = flow_chart(br, st, s_max, tol=1e-9)
        worst = 0.0
        for i in range(st.shape[0]):
            d = D(b, res.y[i])
            if np.any(d >= radius):
                return False, {"branch": b, "start": st[i], "max_distance": float(d.max())}
            worst = max(worst, float(d[-1]))
        if worst > tol:
            return False, {"branch": b, "final_distance": worst}
    return True, None
