import numpy as np
import pytest

from degzero.dynamics import (CriticalPointError, chart_jet, divergence, flow, flow_batch, flow_physical,
                              polar_decompose, write_trajectory_csv)
from degzero.symbol import default_model, unperturbed_model

TP = 2 * np.pi


def _shell_states(atlas, rng, n):
    _, st = atlas.random_states(rng, n)
    return np.array(st)


def test_q_independent_symbol_moves_straight():
    # g = sin(phi): shell phi = 0, field (0, 1) with constant p
    tr = flow(unperturbed_model(), np.array([0.3, 0.1, 0.0]), 2.0)
    assert np.allclose(tr.states[:, 0], 0.3, atol=1e-12)
    assert np.allclose(np.diff(tr.states[:, 2]), 0.0, atol=1e-12)
    assert np.allclose(tr.log_rho, 0.0, atol=1e-12)


def test_energy_drift_is_small(atlas, rng):
    st = _shell_states(atlas, rng, 8)
    trs = flow_batch(default_model(), st, 200.0, energy_tol=1e-8)
    assert max(np.max(np.abs(t.h_residual)) for t in trs) <= 1e-8


def test_seed_off_shell_is_rejected():
    with pytest.raises(ValueError):
        flow(default_model(), np.array([0.1, 0.1, 0.5]), 1.0)


def test_time_reversal_returns_to_start(atlas, rng):
    st = _shell_states(atlas, rng, 5)
    h = default_model()
    fw = flow_batch(h, st, 3.0, tol=1e-12)
    ends = np.array([t.states[-1] for t in fw])
    bw = flow_batch(h, ends, -3.0, tol=1e-12)
    back = np.array([t.states[-1] for t in bw])
    d = np.abs((back - st[:, :3] + 0.5) % 1.0 - 0.5)[:, :2]
    assert d.max() <= 1e-6
    dphi = np.abs((back[:, 2] - st[:, 2] + np.pi) % TP - np.pi)
    assert dphi.max() <= 1e-6


def test_rescaled_and_physical_time_agree(atlas, rng):
    st = _shell_states(atlas, rng, 3)
    h = default_model()
    for s0 in st:
        tr = flow(h, s0, 0.5, tol=1e-12)
        T = tr.t[-1]
        z = flow_physical(h, s0[:2], [np.cos(s0[2]), np.sin(s0[2])], T)
        rho = np.exp(tr.log_rho[-1])
        p = rho * np.array([np.cos(tr.states[-1, 2]), np.sin(tr.states[-1, 2])])
        dq = (z[:2] - tr.states[-1, :2] + 0.5) % 1.0 - 0.5
        assert np.max(np.abs(dq)) <= 1e-6
        assert np.max(np.abs(z[2:] - p)) <= 1e-6


def test_polar_frame_of_q_independent_symbol():
    fr = polar_decompose(unperturbed_model(), [0.3, 0.8, 0.0])
    assert fr.a == 0.0 and fr.div_mu == pytest.approx(0.0, abs=1e-15)


def test_polar_identity_on_grid(atlas):
    assert atlas.polar_residual() <= 1e-6


def test_polar_frame_matches_physical_flow(atlas, rng):
    h = default_model()
    st = _shell_states(atlas, rng, 4)
    dt = 1e-4
    for s0 in st:
        fr = polar_decompose(h, s0)
        p0 = np.array([np.cos(s0[2]), np.sin(s0[2])])
        zp = flow_physical(h, s0[:2], p0, dt)
        zm = flow_physical(h, s0[:2], p0, -dt)
        a_fd = (np.linalg.norm(zp[2:]) - np.linalg.norm(zm[2:])) / (2 * dt)
        W_fd = (zp[:2] - zm[:2]) / (2 * dt)
        assert abs(a_fd - fr.a) <= 1e-6
        assert np.max(np.abs(W_fd - fr.W)) <= 1e-6


def test_critical_level_is_refused():
    from degzero.symbol import constant_symbol
    with pytest.raises(CriticalPointError):
        polar_decompose(constant_symbol(0.0), [0.1, 0.1, 0.1])


def _fields():
    def W(q):
        x, y = q[..., 0], q[..., 1]
        return np.stack([np.sin(TP * x) + 0.3 * np.cos(TP * y), np.cos(TP * (x + y))], -1)

    def mu(q):
        return 2.0 + np.sin(TP * q[..., 0]) * np.cos(TP * q[..., 1])

    def f(q):
        return 1.5 + np.cos(TP * q[..., 1])

    def df(q):
        return np.stack([np.zeros(q.shape[:-1]), -TP * np.sin(TP * q[..., 1])], -1)

    return W, mu, f, df


def test_divergence_of_constant_field_is_zero(rng):
    q = rng.random((10, 2))
    d = divergence(lambda q: np.ones(q.shape[:-1] + (2,)), lambda q: np.ones(q.shape[:-1]), q)
    assert np.max(np.abs(d)) <= 1e-12


def test_divergence_product_rule(rng):
    W, mu, f, df = _fields()
    q = rng.random((20, 2))
    lhs = divergence(lambda q: f(q)[..., None] * W(q), mu, q, h=2e-3)
    rhs = np.sum(df(q) * W(q), axis=-1) + f(q) * divergence(W, mu, q, h=2e-3)
    assert np.max(np.abs(lhs - rhs)) <= 1e-8


def test_divergence_density_rule(rng):
    W, mu, f, df = _fields()
    q = rng.random((20, 2))
    lhs = divergence(W, lambda q: f(q) * mu(q), q, h=2e-3)
    rhs = np.sum(df(q) * W(q), axis=-1) / f(q) + divergence(W, mu, q, h=2e-3)
    assert np.max(np.abs(lhs - rhs)) <= 1e-8


def test_chart_divergence_matches_stencil(atlas, rng):
    # analytic div_mu from the jet against a stencil over the branch graph
    br = atlas.branches[0]
    q = rng.random((6, 2))
    d_an = br.div_mu(br.lift(q))
    d_fd = divergence(lambda Q: br.W(br.lift(Q)), lambda Q: br.mu(br.lift(Q)), q, h=2e-3)
    assert np.max(np.abs(d_an - d_fd)) <= 1e-7


def test_trajectory_csv(tmp_path):
    tr = flow(unperturbed_model(), np.array([0.3, 0.1, 0.0]), 1.0)
    write_trajectory_csv(tr, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "s,t,x,y,phi,log_rho,h_residual" and len(lines) == tr.s.size + 1


def test_chart_jet_rejects_vertical_tangent():
    with pytest.raises(CriticalPointError):
        chart_jet(unperturbed_model(), np.array([0.1]), np.array([0.2]), np.array([np.pi / 2]))
