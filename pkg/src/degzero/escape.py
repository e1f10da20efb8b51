"""Escape functions: degree-one k with {h, k} >= delta > 0 on the shell.

On the cone over Z_0 a degree-one function is k = rho * e(theta).  Its bracket
with h is degree zero and reads {h, k} = a e + W e, so positivity can be
checked on the charts of Z_0 alone.  Two constructions are provided:

* :func:`synthesize_lp`, a linear program over a real Fourier basis on each
  chart that maximizes the minimal grid bracket;
* :func:`construct_flow_method`, the constructive route: local pieces
  k = +-rho / F near the attracting/repelling sets, propagated along the
  flow with a positive correction m and blended across the transversal
  {l+ = 0} with a smooth profile psi.

Both return an :class:`EscapeFunction` stored as per-chart Fourier tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_continuous_lyapunov
from scipy.optimize import linprog

from .foliation import Component, FoliationAtlas, SimpleStructure, wrap
from .integrate import EventSpec, integrate_batch
from .profiles import SMOOTH_STEP_MAX_SLOPE, smooth_step, smooth_step_deriv

__all__ = [
    "EscapeError",
    "NoEscapeFound",
    "CertificationError",
    "EscapeFunction",
    "LocalPatch",
    "FlowConstructionState",
    "synthesize_lp",
    "certify",
    "construct_flow_method",
    "radial_source_check",
    "blend_derivative_check",
    "real_fourier_basis",
]

TWO_PI = 2.0 * np.pi


class EscapeError(RuntimeError):
    """Precondition or construction failure."""


class NoEscapeFound(EscapeError):
    """The LP found no positive margin at the given basis and grid.

    This does not prove that no escape function exists.
    """

    def __init__(self, msg, best_delta=None):
        super().__init__(msg)
        self.best_delta = best_delta


class CertificationError(EscapeError):
    """Minimal bracket on the certification grid is not positive."""

    def __init__(self, msg, margin=None):
        super().__init__(msg)
        self.margin = margin


# ================================================================ basis
def real_fourier_basis(M: int) -> np.ndarray:
    """Half-plane modes (m1, m2), |m|_inf <= M, excluding 0.

    The real basis is 1, cos(2 pi m.q), sin(2 pi m.q) over these modes.
    """
    r = np.arange(-M, M + 1)
    m1, m2 = np.meshgrid(r, r, indexing="ij")
    m1, m2 = m1.ravel(), m2.ravel()
    keep = (m1 > 0) | ((m1 == 0) & (m2 > 0))
    return np.stack([m1[keep], m2[keep]], axis=1)


def _basis_eval(modes, q):
    """Real basis values and gradients at points q (P, 2) -> (P, nb) arrays."""
    ph = TWO_PI * (q @ modes.T)
    c, s = np.cos(ph), np.sin(ph)
    P = q.shape[0]
    B = np.hstack([np.ones((P, 1)), c, s])
    kx = TWO_PI * modes[:, 0]
    ky = TWO_PI * modes[:, 1]
    Bx = np.hstack([np.zeros((P, 1)), -s * kx, c * kx])
    By = np.hstack([np.zeros((P, 1)), -s * ky, c * ky])
    return B, Bx, By


def _real_to_table(coef, modes, M):
    """Real basis coefficients to a Hermitian complex table indexed by m + M."""
    T = np.zeros((2 * M + 1, 2 * M + 1), complex)
    nm = modes.shape[0]
    T[M, M] = coef[0]
    cc, ss = coef[1:1 + nm], coef[1 + nm:]
    z = 0.5 * (cc - 1j * ss)
    T[modes[:, 0] + M, modes[:, 1] + M] = z
    T[-modes[:, 0] + M, -modes[:, 1] + M] = np.conj(z)
    return T


# ======================================================= escape function
@dataclass
class EscapeFunction:
    """k = rho * e_b(q) on chart branch b, e_b a real trigonometric polynomial.

    Attributes
    ----------
    tables : list of ndarray
        Complex Fourier tables, shape (2M+1, 2M+1), index m + M, per branch.
    delta : float
        Certified margin (minimal bracket on the certification grid).
    cert_grid : int
        Resolution of the last certification grid.
    method : {"lp", "flow", "sampled"}
    """

    tables: list
    delta: float = np.nan
    cert_grid: int = 0
    method: str = "lp"
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.tables[0].shape[0] // 2

    def value(self, b: int, q):
        """Values and gradients of e_b at arbitrary points."""
        q = np.atleast_2d(np.asarray(q, float))
        T = self.tables[b]
        M = self.M
        idx = np.argwhere(T != 0)
        m = idx - M
        ph = np.exp(1j * TWO_PI * (q @ m.T))
        c = T[idx[:, 0], idx[:, 1]]
        e = (ph @ c).real
        gx = (ph @ (c * 1j * TWO_PI * m[:, 0])).real
        gy = (ph @ (c * 1j * TWO_PI * m[:, 1])).real
        return e, np.stack([gx, gy], axis=-1)

    def grid_values(self, b: int, n: int):
        """(e, e_x, e_y) on the n x n grid by inverse FFT (n > 2M)."""
        M = self.M
        if n <= 2 * M:
            raise ValueError("grid too coarse for the stored modes")
        r = np.arange(-M, M + 1)
        A = np.zeros((n, n), complex)
        A[np.ix_(r % n, r % n)] = self.tables[b]
        kx = np.zeros(n)
        kx[r % n] = TWO_PI * r
        e = np.fft.ifft2(A).real * n * n
        ex = np.fft.ifft2(A * (1j * kx)[:, None]).real * n * n
        ey = np.fft.ifft2(A * (1j * kx)[None, :]).real * n * n
        return e, ex, ey

    def bracket(self, b: int, W, a, q=None, n: int | None = None):
        """{h, k} = a e + W.grad e at points q, or on the n-grid."""
        if n is not None:
            e, ex, ey = self.grid_values(b, n)
            return a * e + W[..., 0] * ex + W[..., 1] * ey
        e, g = self.value(b, q)
        return a * e + np.sum(W * g, axis=-1)

    def scaled(self, factor: float) -> "EscapeFunction":
        return EscapeFunction([T * factor for T in self.tables], self.delta * factor,
                              self.cert_grid, self.method, dict(self.meta))

    def to_json(self) -> str:
        M = self.M
        doc = {"method": self.method, "delta": self.delta, "cert_grid": self.cert_grid,
               "M": M, "meta": self.meta,
               "tables": [[[int(i - M), int(j - M), float(T[i, j].real), float(T[i, j].imag)]
                           for i, j in np.argwhere(T != 0)] for T in self.tables]}
        from .io import to_jsonable
        return json.dumps(to_jsonable(doc), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EscapeFunction":
        doc = json.loads(text)
        M = int(doc["M"])
        tables = []
        for rows in doc["tables"]:
            T = np.zeros((2 * M + 1, 2 * M + 1), complex)
            for m1, m2, re, im in rows:
                T[m1 + M, m2 + M] = re + 1j * im
            tables.append(T)
        return cls(tables, float(doc["delta"]), int(doc["cert_grid"]), doc["method"], doc.get("meta", {}))

    @classmethod
    def from_grid(cls, values: list, M: int | None = None, method: str = "sampled") -> "EscapeFunction":
        """Trigonometric interpolation of grid samples, truncated to |m|_inf <= M."""
        tables = []
        for v in values:
            n = v.shape[0]
            M_ = n // 2 - 1 if M is None else M
            C = np.fft.fft2(v) / (n * n)
            r = np.arange(-M_, M_ + 1)
            tables.append(C[np.ix_(r % n, r % n)].copy())
        return cls(tables, method=method)

    @classmethod
    def from_function(cls, atlas: FoliationAtlas, fn, M: int | None = None) -> "EscapeFunction":
        """Sample a degree-one function ``fn(q, phi) = k(q, (cos phi, sin phi))`` on Z_0."""
        vals = []
        for b, st in enumerate(atlas.states):
            phi = st[..., 2] if st.shape[-1] > 2 else np.zeros(st.shape[:-1])
            vals.append(np.asarray(fn(st[..., :2], phi), float))
        return cls.from_grid(vals, M=M)


# ===================================================================== LP
def synthesize_lp(atlas: FoliationAtlas, basis_size: int = 8, min_margin: float = 1e-4,
                  bound: float = 1.0) -> EscapeFunction:
    """Maximize the minimal bracket over a real Fourier basis on each chart.

    For each branch, solve::

        max delta  s.t.  a_i e(q_i) + W_i . grad e(q_i) >= delta,  |c_j| <= bound

    on the atlas grid.  The problem decouples over branches; the returned
    margin is the smallest branch optimum.

    Raises
    ------
    NoEscapeFound
        If the optimal margin is below ``min_margin`` (or the solver fails).
    """
    modes = real_fourier_basis(basis_size)
    nb = 1 + 2 * modes.shape[0]
    tables = []
    deltas = []
    n_rounds = []
    for b in range(len(atlas.branches)):
        q = atlas.q_grid.reshape(-1, 2)
        W = atlas.W[b].reshape(-1, 2)
        a = atlas.a[b].ravel()
        B, Bx, By = _basis_eval(modes, q)
        R = a[:, None] * B + W[:, :1] * Bx + W[:, 1:] * By
        x, dlt, rounds = _lp_constraint_generation(R, bound, atlas.grid)
        deltas.append(dlt)
        tables.append(_real_to_table(x, modes, basis_size))
        n_rounds.append(rounds)
    delta = float(min(deltas))
    if delta < min_margin:
        raise NoEscapeFound(f"no escape function found: best margin {delta:.3e} < {min_margin:g}",
                            best_delta=delta)
    return EscapeFunction(tables, delta=delta, cert_grid=atlas.grid, method="lp",
                          meta={"basis_size": basis_size, "bound": bound, "branch_margins": deltas,
                                "lp_grid": atlas.grid, "lp_rounds": n_rounds})


def _lp_constraint_generation(R, bound, grid, start_grid: int = 64,
                              tol: float = 1e-10, max_rounds: int = 50):
    """max delta s.t. R c >= delta, |c| <= bound, by adding violated rows.

    Starts from a subsampled grid of about ``start_grid`` points per side and
    adds every violated constraint of the full grid; the final optimum satisfies every row, so it
    equals the optimum of the full problem.
    """
    nrow, nb = R.shape
    idx = np.arange(nrow).reshape(grid, grid)
    active = np.zeros(nrow, bool)
    stride = max(1, grid // start_grid)
    active[idx[::stride, ::stride].ravel()] = True
    cost = np.zeros(nb + 1)
    cost[-1] = -1.0
    bounds = [(-bound, bound)] * nb + [(None, None)]
    for rounds in range(1, max_rounds + 1):
        sub = R[active]
        res = linprog(cost, A_ub=np.hstack([-sub, np.ones((sub.shape[0], 1))]),
                      b_ub=np.zeros(sub.shape[0]), bounds=bounds, method="highs-ipm")
        if res.status != 0:
            raise NoEscapeFound(f"LP solver status {res.status}: {res.message}")
        c, dlt = res.x[:nb], -res.fun
        viol = R @ c - dlt
        bad = np.nonzero((viol < -tol * max(1.0, abs(dlt))) & ~active)[0]
        if bad.size == 0:
            return c, float(min(dlt, (R @ c).min())), rounds
        active[bad] = True
    raise NoEscapeFound("LP constraint generation did not converge")


def certify(k: EscapeFunction, atlas: FoliationAtlas, refinement: int = 4) -> float:
    """Minimal bracket of k on the grid refined by ``refinement``.

    Lowers the stored margin if the refined minimum is smaller.

    Raises
    ------
    CertificationError
        If the minimum is not positive.
    """
    n = atlas.grid * refinement
    margin = np.inf
    for b in range(len(atlas.branches)):
        _, W, a = atlas.sample(b, n)
        margin = min(margin, float(np.min(k.bracket(b, W, a, n=n))))
    if not margin > 0:
        raise CertificationError(f"certification failed: minimal bracket {margin:.3e} <= 0", margin)
    k.delta = margin if not np.isfinite(k.delta) else min(k.delta, margin)
    k.cert_grid = n
    return margin


# ============================================================ flow method
@dataclass
class LocalPatch:
    """Neighborhood of one component of K+ (sign +1) or K- (sign -1).

    log F is a quadratic form (points) or phi_c(t) + kappa d^2 in the
    coordinates (t, d) of a cycle graph d = q_o - X(t), chosen so that
    div_{F mu} W has the sign -sign near the component.  The local escape
    piece is e = sign / F and its bracket sign (a - W.grad log F) / F.
    """

    kind: str
    branch: int
    sign: int
    kappa: float
    center: np.ndarray | None = None
    P: np.ndarray | None = None
    axis: int = 1
    slope: float = 0.0
    X_hat: np.ndarray | None = None
    phi_hat: np.ndarray | None = None
    c_bar: float = np.nan

    @staticmethod
    def _series(hat, t, deriv=False):
        k, hat = hat
        E = np.exp(1j * TWO_PI * np.multiply.outer(t, k))
        if deriv:
            return (E @ (hat * 1j * TWO_PI * k)).real
        return (E @ hat).real

    def offset(self, q):
        """Signed offset from the component (vector for points, scalar for cycles)."""
        q = np.asarray(q, float)
        if self.kind == "point":
            return wrap(q - self.center)
        t = q[..., self.axis]
        X = self.slope * t + self._series(self.X_hat, t)
        return wrap(q[..., 1 - self.axis] - X)

    def dist(self, q):
        o = self.offset(q)
        return np.sqrt(np.sum(o * o, -1)) if self.kind == "point" else np.abs(o)

    def log_F(self, q):
        q = np.asarray(q, float)
        if self.kind == "point":
            th = self.offset(q)
            return self.kappa * np.einsum("...i,ij,...j->...", th, self.P, th), \
                2 * self.kappa * th @ self.P.T
        t = q[..., self.axis]
        d = self.offset(q)
        Xp = self.slope + self._series(self.X_hat, t, deriv=True)
        val = self._series(self.phi_hat, t) + self.kappa * d * d
        g = np.zeros(q.shape)
        g[..., self.axis] = self._series(self.phi_hat, t, deriv=True) - 2 * self.kappa * d * Xp
        g[..., 1 - self.axis] = 2 * self.kappa * d
        return val, g

    def e(self, q):
        lf, g = self.log_F(q)
        v = self.sign * np.exp(-lf)
        return v, -v[..., None] * g

    def bracket(self, q, W, a):
        """{h, k_pm} = sign (a - W . grad log F) / F."""
        lf, g = self.log_F(q)
        return self.sign * (a - np.sum(W * g, -1)) * np.exp(-lf)


def _point_patch(comp: Component, sign: int, kappa: float) -> LocalPatch:
    sp = comp.source
    DW = np.asarray(sp.DW, float)
    A = DW if sign > 0 else -DW
    # P A + A^T P = -I
    P = solve_continuous_lyapunov(A.T, -np.eye(2))
    return LocalPatch("point", comp.branch, sign, kappa, center=np.mod(sp.q, 1.0), P=P)


def _cycle_patch(atlas: FoliationAtlas, comp: Component, sign: int, kappa: float,
                 n_fit: int = 256) -> LocalPatch:
    cyc = comp.source
    br = atlas.branches[comp.branch]
    ax = cyc.section.axis
    ox = 1 - ax
    w = cyc.winding
    slope = float(w[ox]) / float(w[ax])
    pos = np.asarray(comp.states)[:, :2]
    Wc = br.W(comp.states)[:, ax]
    if np.ptp(np.sign(Wc)) > 0:
        raise EscapeError("cycle is not a graph over its section coordinate")
    t = np.mod(pos[:, ax], 1.0)
    o = np.unwrap(np.mod(pos[:, ox], 1.0) * TWO_PI) / TWO_PI
    per = o - slope * np.unwrap(t * TWO_PI) / TWO_PI
    order = np.argsort(t)
    tj = np.arange(n_fit) / n_fit
    Xj = np.interp(tj, t[order], per[order], period=1.0)
    X_hat = np.fft.fft(Xj) / n_fit
    # exact graph points, then phi_c' = (c_bar - div) / W_t
    qj = np.zeros((n_fit, 2))
    qj[:, ax] = tj
    qj[:, ox] = slope * tj + Xj
    st = br.lift(qj)
    _, W, a = br.fields(st)
    div = -a  # div_mu W = -a on every chart
    Wt = W[:, ax]
    c_bar = float(np.sum(div / Wt) / np.sum(1.0 / Wt))
    dphi = (c_bar - div) / Wt
    hat = np.fft.fft(dphi) / n_fit
    k = np.fft.fftfreq(n_fit, 1.0 / n_fit)
    phi_hat = np.zeros(n_fit, complex)
    nz = k != 0
    phi_hat[nz] = hat[nz] / (1j * TWO_PI * k[nz])
    X_hat, phi_hat = _trim(X_hat), _trim(phi_hat)
    if sign * c_bar >= 0:
        raise EscapeError(f"cycle mean divergence {c_bar:.3e} has the wrong sign for its component")
    return LocalPatch("cycle", comp.branch, sign, kappa, axis=ax, slope=slope,
                      X_hat=X_hat, phi_hat=phi_hat, c_bar=c_bar)


def _trim(hat, rel: float = 1e-13):
    # keep only significant modes; patch series are evaluated at every flow step
    k = np.fft.fftfreq(hat.size, 1.0 / hat.size)
    keep = np.abs(hat) > rel * max(np.abs(hat).max(), 1e-300)
    keep[0] = True
    return k[keep], hat[keep]


@dataclass
class FlowConstructionState:
    """Data of the flow construction; see :func:`construct_flow_method`."""

    patches: list
    r_in: float
    r_out: float
    m0: float = np.nan
    C: float = np.nan
    T_psi: float = np.nan
    l_plus: list = field(default_factory=list)
    l_minus: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    k: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def psi(self, tau):
        return smooth_step(np.asarray(tau) / self.T_psi)

    def dpsi(self, tau):
        return smooth_step_deriv(np.asarray(tau) / self.T_psi) / self.T_psi


class _Construction:
    def __init__(self, atlas, patches, r_in, r_out, s_max, tol):
        self.atlas = atlas
        self.patches = patches
        self.r_in, self.r_out = r_in, r_out
        self.s_max, self.tol = s_max, tol

    def _on(self, b, sign):
        return [p for p in self.patches if p.branch == b and p.sign == sign]

    def chi(self, p, q):
        return smooth_step((self.r_out - p.dist(q)) / (self.r_out - self.r_in))

    def m(self, b, q, W, a):
        out = np.ones(q.shape[:-1])
        for p in self.patches:
            if p.branch != b:
                continue
            c = self.chi(p, q)
            if np.any(c > 0):
                out = out + c * (p.bracket(q, W, a) - 1.0)
        return out

    def inside(self, b, sign, q):
        """Signed distance to the inner patch boundary (negative inside)."""
        ps = self._on(b, sign)
        if not ps:
            return np.full(q.shape[:-1], np.inf)
        return np.min([p.dist(q) for p in ps], axis=0) - self.r_in

    def e_local(self, b, sign, q):
        ps = self._on(b, sign)
        d = np.array([p.dist(q) for p in ps])
        j = np.argmin(d, axis=0)
        vals = np.array([p.e(q)[0] for p in ps])
        return vals[j, np.arange(q.shape[0])]

    def _rhs(self, b):
        br = self.atlas.branches[b]
        dd = br.dim

        def rhs(s, Y):
            st = Y[:, :dd]
            vel, W, a = br.fields(st)
            out = np.zeros_like(Y)
            out[:, :dd] = vel
            eA = np.exp(Y[:, dd])
            out[:, dd] = a
            out[:, dd + 1] = self.m(b, st[:, :2], W, a) * eA
            out[:, dd + 2] = eA
            return out

        return rhs

    def run(self, b, states, s_max, events, extra=()):
        br = self.atlas.branches[b]
        st = np.atleast_2d(states)
        Y0 = np.concatenate([st, np.zeros((st.shape[0], 3))] +
                            [np.asarray(x, float)[:, None] for x in extra], axis=1)
        inv = None
        if br.invariant(st) is not None:
            def inv(Y):
                return br.invariant(Y[:, :br.dim])
        return integrate_batch(self._rhs(b), Y0, s_max, rtol=self.tol, atol=self.tol * 1e-2,
                               events=events, record=False, invariant=inv,
                               invariant_tol=1e-8 if inv else None)

    def propagate(self, b, states, sign):
        """l+ (sign=+1, forward) or l- (sign=-1, backward) at rho = 1 states."""
        br = self.atlas.branches[b]
        dd = br.dim
        st = np.atleast_2d(states)
        out = np.full(st.shape[0], np.nan)
        if not self._on(b, sign):
            return out
        ins = self.inside(b, sign, st[:, :2]) <= 0
        out[ins] = self.e_local(b, sign, st[ins, :2])
        rest = np.nonzero(~ins)[0]
        if rest.size:
            ev = EventSpec(lambda s, Y: self.inside(b, sign, Y[:, :2]), "entered", -1)
            res = self.run(b, st[rest], sign * self.s_max, [ev])
            Yf = res.y_final
            ok = res.status == "entered"
            vals = np.exp(Yf[:, dd]) * self.e_local(b, sign, Yf[:, :2]) - Yf[:, dd + 1]
            out[rest[ok]] = vals[ok]
        return out

    def crossing(self, b, states, lp):
        """Backward time to {l+ = 0} normalized by rho there; inf if none."""
        br = self.atlas.branches[b]
        dd = br.dim
        st = np.atleast_2d(states)
        tau = np.full(st.shape[0], np.inf)
        rho = np.full(st.shape[0], np.nan)
        ev = EventSpec(lambda s, Y: Y[:, dd + 3] + Y[:, dd + 1], "crossed", -1)
        res = self.run(b, st, -self.s_max, [ev], extra=(lp,))
        ok = res.status == "crossed"
        Yf = res.y_final
        rho[ok] = np.exp(Yf[ok, dd])
        tau[ok] = -Yf[ok, dd + 2] / rho[ok]
        return tau, rho

    def k_values(self, b, states, C_state: FlowConstructionState):
        lp = self.propagate(b, states, +1)
        lm = self.propagate(b, states, -1)
        k, tau, _ = self.blend(b, states, lp, lm, C_state)
        return k, lp, lm, tau

    def blend(self, b, states, lp, lm, S: FlowConstructionState, cross=None):
        st = np.atleast_2d(states)
        n = st.shape[0]
        tau = np.full(n, -np.inf)
        rho = np.full(n, np.nan)
        pos = np.isfinite(lp) & (lp > 0)
        if cross is None and pos.any():
            t_, r_ = self.crossing(b, st[pos], lp[pos])
            tau[pos], rho[pos] = t_, r_
        elif cross is not None:
            tau, rho = cross
        k = np.where(np.isfinite(lp) & (lp > 0), lp, lm)
        mid = pos & np.isfinite(tau)
        if np.isfinite(S.T_psi) and mid.any():
            psi = S.psi(tau[mid])
            k[mid] = (1 - psi) * lm[mid] + psi * lp[mid]
        return k, tau, rho


def construct_flow_method(atlas: FoliationAtlas, structure: SimpleStructure, *, r_in: float = 0.08,
                          r_out: float = 0.15, kappa: float = 0.0, fit_modes: int | None = None,
                          s_max: float = 40.0, tol: float = 1e-9, refinement: int = 4):
    """Constructive escape function from the simple structure.

    Steps: local patches with k+- = +-rho/F near K+-, positive correction m
    blending {h, k+-} with 1, propagation of l+- along the flow into the
    patches, and blending k = (1 - psi) l- + psi l+ along orbits leaving
    {l+ = 0}.  The grid values are fitted by a trigonometric polynomial and
    certified on a refined grid.

    Returns
    -------
    EscapeFunction, FlowConstructionState

    Raises
    ------
    EscapeError
        On failed preconditions (unverified structure, components that are not
        points or cycles, WH failure) or patch checks (m not positive,
        patch not forward invariant).
    """
    if not structure.verified:
        raise EscapeError("simple structure not verified")
    patches = []
    for sign, comps in ((+1, structure.K_plus), (-1, structure.K_minus)):
        for c in comps:
            if c.kind == "point":
                sp = c.source
                if sp.cls == "saddle":
                    raise EscapeError("flow construction supports point and cycle components only (saddle found)")
                if sign * sp.trace >= 0:
                    raise EscapeError("WH failure: point component has the wrong trace sign")
                patches.append(_point_patch(c, sign, kappa if kappa else 1.0))
            elif c.kind == "cycle":
                cy = c.source
                if (abs(cy.multiplier) < 1) != (sign > 0):
                    raise EscapeError("WH failure: cycle multiplier on the wrong side of 1")
                patches.append(_cycle_patch(atlas, c, sign, kappa))
            else:
                raise EscapeError("flow construction supports point and cycle components only")
    S = FlowConstructionState(patches=patches, r_in=r_in, r_out=r_out)
    con = _Construction(atlas, patches, r_in, r_out, s_max, tol)

    # patch checks on the atlas grid
    m_min = np.inf
    for b in range(len(atlas.branches)):
        q = atlas.q_grid
        W, a = atlas.W[b], atlas.a[b]
        for p in con.patches:
            if p.branch != b:
                continue
            near = p.dist(q) < r_out
            if near.any():
                br_ = p.bracket(q[near], W[near], a[near])
                if br_.min() <= 0:
                    i = np.argmin(br_)
                    raise EscapeError(f"local bracket not positive on patch: {br_[i]:.3e} at q={q[near][i]}")
            for o in con.patches:
                if o is not p and o.branch == b and o.sign != p.sign:
                    if np.any(near & (o.dist(q) < r_out)):
                        raise EscapeError("patches of K+ and K- overlap; decrease r_out")
            _check_invariance(atlas, con, p)
        m_min = min(m_min, float(con.m(b, q, W, a).min()))
    if not m_min > 0:
        raise EscapeError("correction m is not positive")
    S.m0 = m_min

    # propagation on the grid
    cross_data = []
    D = []
    for b in range(len(atlas.branches)):
        st = atlas.states[b].reshape(-1, atlas.branches[b].dim)
        lp = con.propagate(b, st, +1)
        lm = con.propagate(b, st, -1)
        if np.any(~np.isfinite(lp) & ~np.isfinite(lm)):
            raise EscapeError("grid point converging to neither K+ nor K-")
        _, tau, rho = con.blend(b, st, lp, lm, S)
        S.l_plus.append(lp)
        S.l_minus.append(lm)
        S.tau.append(tau)
        cross_data.append((tau, rho))
        good = np.isfinite(tau) & (tau > -np.inf) & np.isfinite(lm)
        D.append(np.abs(lp[good] - lm[good]) / rho[good])
    Dall = np.concatenate(D)
    S.C = 1.1 * float(Dall.max()) if Dall.size else 1.0
    S.T_psi = 2.0 * SMOOTH_STEP_MAX_SLOPE * S.C / S.m0
    vals = []
    for b in range(len(atlas.branches)):
        st = atlas.states[b].reshape(-1, atlas.branches[b].dim)
        k, _, _ = con.blend(b, st, S.l_plus[b], S.l_minus[b], S, cross=cross_data[b])
        S.k.append(k)
        vals.append(k.reshape(atlas.grid, atlas.grid))
    M = fit_modes if fit_modes is not None else atlas.grid // 2 - 1
    kf = EscapeFunction.from_grid(vals, M=M, method="flow")
    kf.meta = {"m0": S.m0, "C": S.C, "T_psi": S.T_psi, "r_in": r_in, "r_out": r_out,
               "fit_modes": M, "grid": atlas.grid}
    kf.delta = np.inf
    certify(kf, atlas, refinement=refinement)
    S.stats = {"fit_residual": float(max(np.max(np.abs(kf.grid_values(b, atlas.grid)[0] - v))
                                         for b, v in enumerate(vals))),
               "n_crossings": int(Dall.size)}
    kf._construction = (con, S)
    return kf, S


def _check_invariance(atlas, con: _Construction, p: LocalPatch, n: int = 256, h: float = 1e-6):
    """Flow enters U+ (leaves U-) across the inner patch boundary."""
    br = atlas.branches[p.branch]
    t = np.arange(n) / n
    if p.kind == "point":
        ang = TWO_PI * t
        q = p.center + con.r_in * np.stack([np.cos(ang), np.sin(ang)], -1)
    else:
        X = p.slope * t + p._series(p.X_hat, t)
        q = np.zeros((2 * n, 2))
        q[:, p.axis] = np.concatenate([t, t])
        q[:, 1 - p.axis] = np.concatenate([X + con.r_in, X - con.r_in])
    st = br.lift(np.mod(q, 1.0))
    W = br.W(st)
    rate = (p.dist(q + h * W) - p.dist(q - h * W)) / (2 * h)
    bad = p.sign * rate >= 0
    if np.any(bad):
        i = np.nonzero(bad)[0][0]
        raise EscapeError(f"patch not forward invariant at q={q[i]} (radial rate {rate[i]:.3e})")


def blend_derivative_check(kf: EscapeFunction, n_samples: int = 64, ds: float = 1e-4,
                           rng: np.random.Generator | None = None) -> dict:
    """Flow derivative of the constructed k at grid points with psi' != 0.

    Uses central differences of k along the flow (k(Phi z) = rho k(theta)).
    """
    con, S = kf._construction
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for b in range(len(con.atlas.branches)):
        tau = S.tau[b]
        sel = np.nonzero(np.isfinite(tau) & (tau > 0) & (tau < S.T_psi))[0]
        if sel.size == 0:
            continue
        sel = rng.choice(sel, size=min(n_samples, sel.size), replace=False)
        br = con.atlas.branches[b]
        st = con.atlas.states[b].reshape(-1, br.dim)[sel]
        dd = br.dim
        ks = []
        ts = []
        for sgn in (+1, -1):
            res = con.run(b, st, sgn * ds, [])
            Yf = res.y_final
            k, _, _, _ = con.k_values(b, Yf[:, :dd], S)
            ks.append(np.exp(Yf[:, dd]) * k)
            ts.append(Yf[:, dd + 2])
        der = (ks[0] - ks[1]) / (ts[0] - ts[1])
        out.append(der)
    der = np.concatenate(out) if out else np.array([])
    return {"n": int(der.size), "min_derivative": float(der.min()) if der.size else None,
            "bound": S.m0 / 2, "passed": bool(der.size and der.min() >= S.m0 / 2 - 1e-6)}


# ========================================================== radial source
def radial_source_check(k: EscapeFunction, atlas: FoliationAtlas, structure: SimpleStructure,
                        seeds=None, *, n_seeds: int = 16, offset: float = 0.05, s_max: float = 30.0,
                        log_cap: float = 25.0, tol: float = 1e-10) -> dict:
    """Backward growth of |k| under the flow of r = -k h near K-.

    On the shell X_r = -k X_h, so in the chart time s of the rescaled flow
    dt_r = ds / (-e) while log|k| = A(s) + log|e(theta_s)|.  Integrates
    backward, fits log|k| against |t_r| and checks monotone growth.

    Parameters
    ----------
    seeds : list of (branch, state), optional
        Defaults to points at ``offset`` from K- components.
    """
    if not np.isfinite(k.delta) or k.delta <= 0:
        raise EscapeError("radial source check needs a certified escape function")
    if seeds is None:
        seeds = []
        for c in structure.K_minus:
            br = atlas.branches[c.branch]
            idx = np.linspace(0, len(c.states) - 1, max(1, n_seeds // max(1, len(structure.K_minus))),
                              dtype=int)
            for j, i in enumerate(idx):
                q = np.mod(np.asarray(c.states[i, :2]), 1.0).copy()
                q[0] += offset * (1 if j % 2 == 0 else -1)
                seeds.append((c.branch, br.lift(q)))
    fits = []
    witness = None
    for b, st in seeds:
        br = atlas.branches[b]
        dd = br.dim
        e0, _ = k.value(b, st[None, :2])
        if e0[0] >= 0:
            raise EscapeError("seed must satisfy k < 0")
        if min(np.min(structure.dist_minus(b, st[None, :])), 1.0) < 1e-9:
            raise EscapeError("seed lies on K-")

        def rhs(s, Y, b=b, br=br):
            vel, W, a = br.fields(Y[:, :dd])
            e, _ = k.value(b, Y[:, :2])
            out = np.zeros_like(Y)
            out[:, :dd] = vel
            out[:, dd] = a
            out[:, dd + 1] = 1.0 / (-e)
            return out

        def cap(s, Y, b=b):
            e, _ = k.value(b, Y[:, :2])
            return Y[:, dd] + np.log(np.abs(e)) - log_cap

        res = integrate_batch(rhs, np.concatenate([st, [0.0, 0.0]])[None, :], -s_max, rtol=tol,
                              atol=tol * 1e-2, events=[EventSpec(cap, "capped", +1)], record=True)
        Y = res.y[0]
        e, _ = k.value(b, Y[:, :2])
        if np.any(e >= 0):
            raise EscapeError("k changed sign along the backward flow")
        logk = Y[:, dd] + np.log(-e)
        t = np.abs(Y[:, dd + 1])
        inc = np.diff(logk)
        if np.any(inc <= 0):
            i = int(np.argmin(inc))
            witness = {"branch": b, "state": Y[i], "t": t[i]}
        dt = np.diff(t)
        rate = inc / np.where(dt > 0, dt, np.inf)
        big = (np.exp(logk[1:]) >= 1.0) & (dt > 1e-8)
        slope = np.polyfit(t, logk, 1)[0]
        Cmin = float(np.min(np.exp(logk - k.delta * t)))
        fits.append({"branch": b, "slope": float(slope), "C_min": Cmin,
                     "min_rate_where_k_le_-1": float(rate[big].min()) if big.any() else None,
                     "t_span": float(t[-1]), "final_dist_to_K_minus":
                     float(structure.dist_minus(b, Y[-1:, :dd])[0])})
    slopes = np.array([f["slope"] for f in fits])
    rates = [f["min_rate_where_k_le_-1"] for f in fits if f["min_rate_where_k_le_-1"] is not None]
    rep = {"delta": k.delta, "fits": fits, "min_slope": float(slopes.min()),
           "min_rate": float(min(rates)) if rates else None, "monotone": witness is None,
           "witness": witness}
    rep["passed"] = bool(witness is None and rep["min_slope"] >= 0.9 * k.delta and
                         (rep["min_rate"] is None or rep["min_rate"] >= k.delta * (1 - 1e-6)))
    if witness is not None:
        raise EscapeError(f"|k| not monotone along the backward flow: {witness}")
    return rep
