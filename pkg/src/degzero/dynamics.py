"""Homogeneous Hamiltonian dynamics on the energy shell.

For h(q, p) = g(q, phi) with phi = angle(p) and rho = |p|, Hamilton's
equations split into a radial part and a part tangent to the sphere bundle:

    X_h = a(theta) d/drho + W(theta) / rho.

In the rescaled time ds = dt / rho the projected motion is autonomous,

    dq/ds      = g_phi (-sin phi, cos phi),
    dphi/ds    = sin phi g_x - cos phi g_y,
    dlog rho/ds = a = -(cos phi g_x + sin phi g_y),
    dt/ds      = rho,

so trajectories are integrated in (x, y, phi, log rho, t).

On the shell {g = 0} each branch is a graph phi = Phi(q) and the chart field
is W(q) = g_phi(q, Phi) (-sin Phi, cos Phi) with density mu = 1 / |g_phi|
coming from the Liouville factorization.  All chart quantities here are
computed from the second-order jet of g via the implicit function theorem.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .integrate import EventSpec, IntegrationError, integrate_batch
from .symbol import PhasePoint, SymbolSpec, grad_symbol

__all__ = [
    "CriticalPointError",
    "Trajectory",
    "PolarFrame",
    "ChartJet",
    "chart_jet",
    "shell_rhs",
    "flow",
    "flow_batch",
    "flow_physical",
    "polar_decompose",
    "divergence",
    "write_trajectory_csv",
]


class CriticalPointError(ValueError):
    """The differential of the symbol (or g_phi on the shell) vanishes."""


@dataclass
class ChartJet:
    """Chart quantities of the shell at points (x, y, phi) with g = 0.

    Attributes
    ----------
    W : ndarray (..., 2)
        Chart field.
    DW : ndarray (..., 2, 2)
        Jacobian dW_i / dq_j along the graph phi = Phi(q).
    a : ndarray (...)
        Radial coefficient d|p|(X_h) at rho = 1.
    mu : ndarray (...)
        Reference density 1 / |g_phi|.
    grad_log_mu : ndarray (..., 2)
    grad_Phi : ndarray (..., 2)
    div_mu : ndarray (...)
        Divergence of W with respect to mu.
    g_phi : ndarray (...)
    """

    W: np.ndarray
    DW: np.ndarray
    a: np.ndarray
    mu: np.ndarray
    grad_log_mu: np.ndarray
    grad_Phi: np.ndarray
    div_mu: np.ndarray
    g_phi: np.ndarray


def chart_jet(spec: SymbolSpec, x, y, phi, min_gphi: float = 1e-10) -> ChartJet:
    """Evaluate chart quantities of the shell branch through (x, y, phi)."""
    J = spec.jet(x, y, phi, order=2)
    gp = J["phi"]
    if np.any(np.abs(gp) < min_gphi):
        raise CriticalPointError("g_phi vanishes on the shell; graph chart is singular")
    c, s = np.cos(phi), np.sin(phi)
    e = np.stack([-s, c], axis=-1)
    de = np.stack([-c, -s], axis=-1)
    gq = np.stack([J["x"], J["y"]], axis=-1)
    gpq = np.stack([J["x_phi"], J["y_phi"]], axis=-1)
    dPhi = -gq / gp[..., None]
    # d/dq_j [g_phi(q, Phi(q))] = g_phi,q_j + g_phiphi Phi_j
    dgp = gpq + J["phiphi"][..., None] * dPhi
    W = gp[..., None] * e
    DW = e[..., :, None] * dgp[..., None, :] + gp[..., None, None] * de[..., :, None] * dPhi[..., None, :]
    gl_mu = -dgp / gp[..., None]
    div = np.trace(DW, axis1=-2, axis2=-1) + np.sum(W * gl_mu, axis=-1)
    a = -(c * J["x"] + s * J["y"])
    return ChartJet(W=W, DW=DW, a=a, mu=1.0 / np.abs(gp), grad_log_mu=gl_mu, grad_Phi=dPhi,
                    div_mu=div, g_phi=gp)


def shell_rhs(spec: SymbolSpec, with_time: bool = True) -> Callable:
    """Right-hand side of the rescaled flow in (x, y, phi, log rho[, t])."""

    def rhs(s, Y):
        x, y, ph = Y[:, 0], Y[:, 1], Y[:, 2]
        J = spec.jet(x, y, ph, order=1)
        sn, cs = np.sin(ph), np.cos(ph)
        out = np.empty_like(Y)
        out[:, 0] = -J["phi"] * sn
        out[:, 1] = J["phi"] * cs
        out[:, 2] = sn * J["x"] - cs * J["y"]
        out[:, 3] = -(cs * J["x"] + sn * J["y"])
        if with_time:
            out[:, 4] = np.exp(Y[:, 3])
        return out

    return rhs


@dataclass
class Trajectory:
    """Sampled orbit of the rescaled flow.

    Attributes
    ----------
    s, t : ndarray
        Rescaled and physical times (t = int rho ds).
    states : ndarray (n, 3)
        (x, y, phi) with x, y reduced mod 1 and phi mod 2 pi.
    log_rho : ndarray
    h_residual : ndarray
        h(state) - h(state_0).
    reason : str
        ``"horizon"``, ``"blowdown"``, ``"blowup"`` or ``"converged"``.
    """

    s: np.ndarray
    t: np.ndarray
    states: np.ndarray
    log_rho: np.ndarray
    h_residual: np.ndarray
    reason: str

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_rows(self):
        for i in range(self.s.size):
            yield (self.s[i], self.t[i], self.states[i, 0], self.states[i, 1],
                   self.states[i, 2], self.log_rho[i], self.h_residual[i])


def _initial_state(z0) -> np.ndarray:
    if isinstance(z0, PhasePoint):
        return np.array([z0.q[0], z0.q[1], z0.phi, np.log(z0.rho), 0.0])
    z0 = np.asarray(z0, float)
    if z0.shape[-1] == 4:  # (x, y, p1, p2)
        rho = np.hypot(z0[..., 2], z0[..., 3])
        if np.any(rho == 0):
            raise ValueError("zero covector")
        return np.stack([z0[..., 0], z0[..., 1], np.arctan2(z0[..., 3], z0[..., 2]),
                         np.log(rho), np.zeros_like(rho)], axis=-1)
    if z0.shape[-1] == 3:  # (x, y, phi) at rho = 1
        return np.concatenate([z0, np.zeros(z0.shape[:-1] + (2,))], axis=-1)
    raise ValueError("initial state must be a PhasePoint, (x,y,p1,p2) or (x,y,phi)")


def flow_batch(spec: SymbolSpec, z0, s_max, *, omega: float = 0.0, tol: float = 1e-9,
               shell_tol: float = 1e-6, energy_tol: float = 1e-8,
               rho_caps=(1e-8, 1e8), target: Callable | None = None,
               capture_radius: float = 1e-3, record: bool = True):
    """Integrate many shell trajectories in rescaled time.

    Parameters
    ----------
    spec : SymbolSpec
    z0 : array_like
        Initial points as (x, y, phi) triples at rho = 1, (x, y, p1, p2)
        rows, or a single PhasePoint.
    s_max : float or array_like
        Signed rescaled-time horizon.
    omega : float
        Energy level; seeds must satisfy |h - omega| <= shell_tol.
    tol : float
        Relative tolerance of the integrator.
    energy_tol : float
        Maximal allowed drift |h(z(s)) - h(z0)|; enforced by step rejection.
    rho_caps : (float, float)
        Blowdown/blowup thresholds on rho.
    target : callable, optional
        ``target(states (B,3)) -> distance``; a member stops as
        ``"converged"`` once the distance drops below ``capture_radius``.

    Returns
    -------
    list of Trajectory
    """
    Y0 = np.atleast_2d(_initial_state(z0))
    h0 = spec.g(Y0[:, 0], Y0[:, 1], Y0[:, 2])
    if np.any(np.abs(h0 - omega) > shell_tol):
        raise ValueError("seed is not on the energy shell within tolerance")
    events = [
        EventSpec(lambda s, Y: Y[:, 3] - np.log(rho_caps[0]), "blowdown", -1),
        EventSpec(lambda s, Y: Y[:, 3] - np.log(rho_caps[1]), "blowup", +1),
    ]
    if target is not None:
        events.append(EventSpec(lambda s, Y: target(Y[:, :3]) - capture_radius, "converged", -1))

    def inv(Y):
        return spec.g(Y[:, 0], Y[:, 1], Y[:, 2])

    res = integrate_batch(shell_rhs(spec), Y0, s_max, rtol=tol, atol=tol * 1e-3, events=events,
                          invariant=inv, invariant_tol=energy_tol, record=record)
    out = []
    for i in range(Y0.shape[0]):
        if record:
            S, Yi = res.s[i], res.y[i]
        else:
            S, Yi = np.array([0.0, res.s_final[i]]), np.stack([Y0[i], res.y_final[i]])
        st = np.column_stack([np.mod(Yi[:, 0], 1.0), np.mod(Yi[:, 1], 1.0),
                              np.mod(Yi[:, 2], 2 * np.pi)])
        hr = spec.g(Yi[:, 0], Yi[:, 1], Yi[:, 2]) - h0[i]
        reason = {"horizon": "horizon", "converged": "converged"}.get(res.status[i], res.status[i])
        out.append(Trajectory(s=np.asarray(S), t=np.abs(Yi[:, 4]), states=st, log_rho=Yi[:, 3],
                              h_residual=hr, reason=reason))
    return out


def flow(spec: SymbolSpec, z0, s_max: float, tol: float = 1e-9, **kw) -> Trajectory:
    """Single trajectory; see :func:`flow_batch`."""
    return flow_batch(spec, z0, s_max, tol=tol, **kw)[0]


def flow_physical(spec: SymbolSpec, q0, p0, t_max: float, rtol: float = 1e-11) -> np.ndarray:
    """Integrate Hamilton's equations in (q, p) in physical time.

    Independent of the rescaled form; used for consistency checks.
    Returns the final (x, y, p1, p2) with q not reduced.
    """
    def rhs(t, Z):
        dq, dp = grad_symbol(spec, Z[:, :2], Z[:, 2:])
        return np.concatenate([dp, -dq], axis=1)

    Z0 = np.atleast_2d(np.concatenate([np.asarray(q0, float), np.asarray(p0, float)], axis=-1))
    res = integrate_batch(rhs, Z0, t_max, rtol=rtol, atol=rtol * 1e-3, record=False)
    return res.y_final if Z0.shape[0] > 1 else res.y_final[0]


@dataclass
class PolarFrame:
    """Radial/tangential splitting of X_h at a point of the shell, rho = 1."""

    theta: np.ndarray
    a: float
    W: np.ndarray
    div_mu: float

    @property
    def polar_residual(self) -> float:
        """|(n - 1) a + div_mu W| with n = 2."""
        return abs(self.a + self.div_mu)


def polar_decompose(spec: SymbolSpec, theta, shell_tol: float = 1e-8,
                    grad_tol: float = 1e-10) -> PolarFrame:
    """Compute a, W and div_mu W at theta = (x, y, phi) on the shell.

    Raises
    ------
    CriticalPointError
        If |dh| (through g_phi) vanishes at the point.
    ValueError
        If the point is not on the shell within ``shell_tol``.
    """
    x, y, ph = (float(v) for v in theta)
    if abs(spec.g(x, y, ph)) > shell_tol:
        raise ValueError("point is not on the shell")
    J = spec.jet(x, y, ph, order=1)
    if np.sqrt(J["x"] ** 2 + J["y"] ** 2 + J["phi"] ** 2) < grad_tol:
        raise CriticalPointError("dh vanishes: the level is critical")
    cj = chart_jet(spec, x, y, ph, min_gphi=grad_tol)
    return PolarFrame(theta=np.array([x, y, ph]), a=float(cj.a), W=cj.W.copy(),
                      div_mu=float(cj.div_mu))


_D6 = np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60])


def divergence(W: Callable, mu: Callable, theta, h: float = 1e-2) -> np.ndarray:
    """Divergence of a chart vector field with respect to a density.

    div_mu W = (1/mu) sum_i d_i (mu W_i), via a sixth-order central stencil.

    Parameters
    ----------
    W : callable
        ``W(q) -> (..., 2)`` for q of shape (..., 2).
    mu : callable
        ``mu(q) -> (...)``, positive.
    theta : array_like (..., 2)
    """
    q = np.asarray(theta, float)
    tot = 0.0
    for i in range(2):
        acc = 0.0
        for k, w in zip(range(-3, 4), _D6):
            if w == 0.0:
                continue
            qk = q.copy()
            qk[..., i] += k * h
            acc = acc + w * mu(qk) * W(qk)[..., i]
        tot = tot + acc / h
    return tot / mu(q)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV with columns s, t, x, y, phi, log_rho, h_residual."""
    from .io import atomic_write_text
    lines = ["s,t,x,y,phi,log_rho,h_residual"]
    for row in traj.to_rows():
        lines.append(",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
