"""Batched embedded Runge-Kutta integration.

A Dormand-Prince 5(4) pair advancing many independent initial conditions at
once.  Each member of the batch has its own step size, PI step control and
termination status, so stiff or slow members do not hold the others back;
only the right-hand side evaluation is shared (vectorized over the active
members).

Events are scalar functions of (s, y) per member; a sign change inside an
accepted step is located on the cubic Hermite interpolant of the step and the
member stops there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = ["IntegrationError", "BatchResult", "EventSpec", "integrate_batch"]

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = _B - np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                    187 / 2100, 1 / 40])


class IntegrationError(RuntimeError):
    """Step-size underflow; carries the partial result."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class EventSpec:
    """Terminal event ``fn(s, y) -> (B,)``; fires on a sign change.

    ``direction`` restricts to increasing (+1) or decreasing (-1) crossings.
    ``label`` is stored as the member's termination reason.
    """

    fn: Callable
    label: str
    direction: int = 0


@dataclass
class BatchResult:
    """Per-member output of :func:`integrate_batch`.

    Attributes
    ----------
    s : list of ndarray
        Accepted times per member (including the start).
    y : list of ndarray
        States, shape (n_steps, dim) per member.
    status : ndarray of object
        Termination reason per member: ``"horizon"`` or an event label.
    s_final, y_final : ndarray
        Final time and state per member.
    n_rhs : int
        Number of batched right-hand side evaluations.
    """

    s: list
    y: list
    status: np.ndarray
    s_final: np.ndarray
    y_final: np.ndarray
    n_rhs: int = 0
    max_drift: np.ndarray | None = None


def _hermite(h, y0, f0, y1, f1, u):
    # cubic Hermite on [0, h] at fraction u (per member arrays)
    u = u[:, None]
    h = h[:, None]
    h00 = 2 * u ** 3 - 3 * u ** 2 + 1
    h10 = u ** 3 - 2 * u ** 2 + u
    h01 = -2 * u ** 3 + 3 * u ** 2
    h11 = u ** 3 - u ** 2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def integrate_batch(rhs: Callable, y0: np.ndarray, s_max, *, rtol: float = 1e-9,
                    atol: float = 1e-12, h0: float | None = None, h_max: float = np.inf,
                    h_min: float = 1e-14, events: Sequence[EventSpec] = (),
                    invariant: Callable | None = None, invariant_tol: float | None = None,
                    record: bool = True, max_steps: int = 200000) -> BatchResult:
    """Integrate ``dy/ds = rhs(s, y)`` for a batch of initial conditions.

    Parameters
    ----------
    rhs : callable
        ``rhs(s, y)`` with ``s`` of shape (B,) and ``y`` of shape (B, d).
    y0 : ndarray, shape (B, d)
    s_max : float or ndarray
        Signed horizon per member; negative values integrate backward.
    rtol, atol : float
        Error tolerances of the embedded pair.
    events : sequence of EventSpec
        Terminal events.
    invariant : callable, optional
        ``invariant(y) -> (B,)``, a conserved quantity.  Steps whose drift
        from the initial value exceeds ``invariant_tol`` are rejected and
        retried with a smaller step.
    record : bool
        Keep every accepted state (otherwise only the final state).

    Returns
    -------
    BatchResult
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim != 2:
        raise ValueError("y0 must have shape (B, d)")
    B, d = y.shape
    s_end = np.broadcast_to(np.asarray(s_max, float), (B,)).copy()
    sign = np.where(s_end >= 0, 1.0, -1.0)
    s = np.zeros(B)
    active = s_end != 0
    status = np.array(["horizon"] * B, dtype=object)
    inv0 = invariant(y) if invariant is not None else None
    drift = np.zeros(B)

    f = rhs(s, y)
    n_rhs = 1
    scale = atol + rtol * np.abs(y)
    if h0 is None:
        d0 = np.sqrt(np.mean((y / scale) ** 2, axis=1))
        d1 = np.sqrt(np.mean((f / scale) ** 2, axis=1))
        h = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
        h = np.minimum(h, 0.1)
    else:
        h = np.full(B, float(h0))
    h = np.minimum(np.minimum(h, h_max), np.abs(s_end))
    err_prev = np.ones(B)
    ev_prev = [ev.fn(s, y) for ev in events]

    traj_s = [[0.0] for _ in range(B)] if record else None
    traj_y = [[y[i].copy()] for i in range(B)] if record else None

    steps = 0
    while np.any(active):
        steps += 1
        if steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded",
                                   partial=_pack(traj_s, traj_y, status, s, y, n_rhs, drift))
        idx = np.nonzero(active)[0]
        hs = (h[idx] * sign[idx])
        ya = y[idx]
        sa = s[idx]
        K = np.empty((7, idx.size, d))
        K[0] = f[idx]
        for st in range(1, 7):
            yi = ya + hs[:, None] * sum(_A[st][k] * K[k] for k in range(st))
            K[st] = rhs(sa + _C[st] * hs, yi)
        n_rhs += 6
        y_new = ya + hs[:, None] * np.tensordot(_B, K, axes=1)
        err_vec = hs[:, None] * np.tensordot(_E, K, axes=1)
        sc = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / sc) ** 2, axis=1))
        if invariant is not None and invariant_tol is not None:
            dv = np.abs(invariant(y_new) - inv0[idx])
            err = np.where(dv > invariant_tol, np.maximum(err, 2.0), err)
        ok = err <= 1.0
        # PI controller (Gustafsson); alpha = 0.7/5, beta = 0.4/5
        errc = np.maximum(err, 1e-10)
        fac = 0.9 * errc ** (-0.14) * err_prev[idx] ** 0.08
        fac = np.where(ok, np.clip(fac, 0.2, 5.0), np.clip(0.9 * errc ** (-0.2), 0.1, 0.9))
        h_next = np.minimum(np.abs(hs) * fac, h_max)
        if np.any(~ok & (np.abs(hs) <= h_min)):
            bad = idx[~ok & (np.abs(hs) <= h_min)]
            raise IntegrationError(f"step size underflow for members {bad[:5].tolist()}",
                                   partial=_pack(traj_s, traj_y, status, s, y, n_rhs, drift))
        acc = idx[ok]
        if acc.size:
            s_acc = s[acc] + hs[ok]
            y_acc = y_new[ok]
            f_acc = K[6][ok]  # FSAL
            fired = np.zeros(acc.size, bool)
            frac = np.ones(acc.size)
            labels = np.array([None] * acc.size, dtype=object)
            ev_new = []
            for e_i, ev in enumerate(events):
                v0 = ev_prev[e_i][acc]
                v1 = ev.fn(s_acc, y_acc)
                ev_new.append(v1)
                cross = (np.sign(v0) != np.sign(v1)) & (v0 != 0)
                if ev.direction > 0:
                    cross &= v1 > v0
                elif ev.direction < 0:
                    cross &= v1 < v0
                if np.any(cross):
                    u = _locate(ev.fn, s[acc][cross], hs[ok][cross], y[acc][cross],
                                f[acc][cross], y_acc[cross], f_acc[cross], v0[cross])
                    sel = np.nonzero(cross)[0]
                    better = u < frac[sel]
                    frac[sel[better]] = u[better]
                    fired[sel[better]] = True
                    labels[sel[better]] = ev.label
            if np.any(fired):
                fi = np.nonzero(fired)[0]
                yi = _hermite(hs[ok][fi], y[acc][fi], f[acc][fi], y_acc[fi], f_acc[fi], frac[fi])
                s_acc[fi] = s[acc][fi] + frac[fi] * hs[ok][fi]
                y_acc[fi] = yi
                f_acc[fi] = rhs(s_acc[fi], yi)
                n_rhs += 1
            s[acc] = s_acc
            y[acc] = y_acc
            f[acc] = f_acc
            for e_i in range(len(events)):
                ev_prev[e_i][acc] = ev_new[e_i]
            if invariant is not None:
                drift[acc] = np.maximum(drift[acc], np.abs(invariant(y_acc) - inv0[acc]))
            if record:
                for j, i in enumerate(acc):
                    traj_s[i].append(float(s_acc[j]))
                    traj_y[i].append(y_acc[j].copy())
            done_h = np.abs(s_end[acc] - s_acc) <= 1e-14 * np.maximum(1.0, np.abs(s_end[acc]))
            for j in np.nonzero(fired)[0]:
                status[acc[j]] = labels[j]
            stop = fired | done_h
            active[acc[stop]] = False
            err_prev[acc] = np.maximum(err[ok], 1e-4)
        h[idx] = h_next
        rem = np.abs(s_end - s)
        h = np.where(active, np.minimum(h, rem), h)
    return _pack(traj_s, traj_y, status, s, y, n_rhs, drift)


def _locate(fn, s0, hs, y0, f0, y1, f1, v0, iters: int = 50):
    # bisection on the Hermite interpolant; returns fraction in (0, 1]
    lo = np.zeros(s0.size)
    hi = np.ones(s0.size)
    sgn0 = np.sign(v0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ym = _hermite(hs, y0, f0, y1, f1, mid)
        vm = fn(s0 + mid * hs, ym)
        same = np.sign(vm) == sgn0
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return hi


def _pack(traj_s, traj_y, status, s, y, n_rhs, drift):
    if traj_s is not None:
        ts = [np.array(v) for v in traj_s]
        ys = [np.array(v) for v in traj_y]
    else:
        ts, ys = [], []
    return BatchResult(ts, ys, status.copy(), s.copy(), y.copy(), n_rhs, drift.copy())
