import numpy as np
import pytest

from degzero.foliation import (Component, FoliationAtlas, FoliationError, NonHyperbolicError, ScaledBranch,
                               Section, TorusFieldBranch, assemble_simple_structure, check_morse_smale,
                               classify_jacobian, find_cycles, find_singular_points, verify_attractor)
from degzero.symbol import unperturbed_model

TP = 2 * np.pi


def W_node(q):
    # sink (0,0), source (1/2,1/2), saddles (1/2,0) [trace -1] and (0,1/2) [trace +1]
    return np.stack([-np.sin(TP * q[..., 0]) / TP, -np.sin(TP * q[..., 1]) / np.pi], -1)


def W_cycles(q):
    # attracting circle x = 1/4, repelling circle x = 3/4, multipliers e^{-+0.6 pi}
    return np.stack([0.3 * np.cos(TP * q[..., 0]), np.ones(q.shape[:-1])], -1)


def W_connection(q):
    # saddles joined along y = 0 and y = 1/2 (invariant lines)
    x, y = q[..., 0], q[..., 1]
    return np.stack([np.sin(TP * x), -np.sin(TP * y) * (np.cos(TP * x) + 0.5)], -1)


@pytest.fixture(scope="module")
def node_atlas():
    return FoliationAtlas.from_branches([TorusFieldBranch(W_node, label="node")], grid=32)


@pytest.fixture(scope="module")
def cycle_atlas():
    return FoliationAtlas.from_branches([TorusFieldBranch(W_cycles, label="cycles")], grid=32)


def test_unperturbed_model_has_no_singular_points_and_non_hyperbolic_leaves():
    at = FoliationAtlas.from_symbol(unperturbed_model(), grid=32)
    pts, _ = find_singular_points(at)
    assert pts == []
    with pytest.raises(NonHyperbolicError):
        find_cycles(at)


def test_default_model_zeros_and_cycles(atlas, features):
    pts, cyc, notes = features
    # g_phi != 0 on the shell of the default model, so W has no zeros
    assert pts == []
    assert len(cyc) == 4
    att = [c for c in cyc if c.stability == "attracting"]
    assert len(att) == 2 and all(abs(c.multiplier) < 1 for c in att)
    for c in cyc:
        assert c.residual <= 1e-8
        assert tuple(abs(w) for w in c.winding) == (0, 1)


def test_multiplier_independent_of_section(atlas, features):
    _, cyc, _ = features
    secs = [Section(b, 1, v) for b in range(2) for v in (0.3, 0.7)]
    cyc2, _ = find_cycles(atlas, secs)
    for c in cyc:
        same = [d for d in cyc2 if d.branch == c.branch and abs(((d.anchor[0] - c.anchor[0]) + 0.5) % 1 - 0.5) < 1e-3]
        assert same
        assert all(abs(d.multiplier - c.multiplier) <= 1e-6 * max(1, abs(c.multiplier)) for d in same)


def test_attracting_cycle_attracts_nearby_seeds(atlas, structure):
    from degzero.foliation import flow_chart
    for comp in structure.K_plus:
        cy = comp.source
        br = atlas.branches[cy.branch]
        q = np.array([[cy.anchor[0] + 0.05, 0.2], [cy.anchor[0] - 0.05, 0.6]])
        res = flow_chart(br, br.lift(q), 30.0, record=False)
        assert np.all(structure.dist_plus(cy.branch, res.y_final) < 1e-3)


def test_node_field_classification(node_atlas):
    pts, _ = find_singular_points(node_atlas)
    assert len(pts) == 4
    got = sorted((tuple(np.round(p.q, 6) % 1), p.cls, p.stability) for p in pts)
    assert got == [((0.0, 0.0), "node", "ws"), ((0.0, 0.5), "saddle", "wu"),
                   ((0.5, 0.0), "saddle", "ws"), ((0.5, 0.5), "node", "wu")]
    assert all(np.linalg.norm(W_node(p.q)) <= 1e-10 for p in pts)


def test_singular_point_count_stable_under_refinement(node_atlas):
    n1 = len(find_singular_points(node_atlas)[0])
    n2 = len(find_singular_points(node_atlas.refined(2))[0])
    assert n1 == n2


def test_classify_jacobian_examples():
    assert classify_jacobian(np.diag([-1.0, -2.0]))[:2] == ("node", "ws")
    assert classify_jacobian(np.diag([1.0, -2.0]))[:2] == ("saddle", "ws")
    assert classify_jacobian(np.array([[-1.0, 2.0], [-2.0, -1.0]]))[:2] == ("focus", "ws")
    for J in (np.diag([-1.0, -2.0]), np.diag([1.0, -2.0]), np.diag([3.0, -0.5])):
        a, b = classify_jacobian(J), classify_jacobian(2 * J)
        assert a[:2] == b[:2] and np.allclose(np.sort(b[2].real), 2 * np.sort(a[2].real))
    with pytest.raises(NonHyperbolicError):
        classify_jacobian(np.diag([1.0, -1.0]))
    with pytest.raises(NonHyperbolicError):
        classify_jacobian(np.diag([0.0, -1.0]))


def test_toy_cycle_multipliers(cycle_atlas):
    cyc, _ = find_cycles(cycle_atlas)
    assert len(cyc) == 2
    by = {c.stability: c for c in cyc}
    assert by["attracting"].multiplier == pytest.approx(np.exp(-0.6 * np.pi), rel=1e-6)
    assert by["repelling"].multiplier == pytest.approx(np.exp(0.6 * np.pi), rel=1e-6)
    assert by["attracting"].anchor[0] % 1 == pytest.approx(0.25, abs=1e-8)


def test_cycle_count_stable_under_refinement(cycle_atlas):
    assert len(find_cycles(cycle_atlas)[0]) == len(find_cycles(cycle_atlas.refined(2))[0])


def test_toy_cycles_simple_structure(cycle_atlas, rng):
    S = assemble_simple_structure(cycle_atlas, rng=rng, n_seeds=30)
    assert [c.kind for c in S.K_plus] == ["cycle"] and [c.kind for c in S.K_minus] == ["cycle"]
    assert S.K_plus[0].source.stability == "attracting"
    assert S.basin["both_fraction"] == 1.0


def test_saddle_connection_is_reported():
    at = FoliationAtlas.from_branches([TorusFieldBranch(W_connection, label="sc")], grid=32)
    pts, _ = find_singular_points(at)
    ms = check_morse_smale(at, pts, [])
    assert not ms["passed"]
    assert any("saddle connection suspected" in r for r in ms["reasons"])


def test_morse_smale_verdict_stable_under_tolerance(atlas, features):
    pts, cyc, _ = features
    a = check_morse_smale(atlas, pts, cyc, tol_sc=1e-4)["passed"]
    b = check_morse_smale(atlas, pts, cyc, tol_sc=5e-5)["passed"]
    assert a and b


def test_structure_components_disjoint(atlas, structure):
    for c in structure.K_plus:
        assert np.min(structure.dist_minus(c.branch, c.states)) > 0.1


def test_rescaling_invariance_of_classification():
    base = TorusFieldBranch(W_node, label="node")
    for f, gf in ((lambda q: 2.0 * np.ones(q.shape[:-1]), lambda q: np.zeros(q.shape)),
                  (lambda q: 1 + 0.5 * np.sin(TP * q[..., 0]),
                   lambda q: np.stack([0.5 * TP * np.cos(TP * q[..., 0]), np.zeros(q.shape[:-1])], -1))):
        at = FoliationAtlas.from_branches([ScaledBranch(base, f, gf)], grid=32)
        pts, _ = find_singular_points(at)
        got = sorted((tuple(np.round(p.q, 6) % 1), p.cls, p.stability) for p in pts)
        assert [g[1:] for g in got] == [("node", "ws"), ("saddle", "wu"), ("saddle", "ws"), ("node", "wu")]


def test_stable_node_is_an_attractor(node_atlas):
    pts, _ = find_singular_points(node_atlas)
    sink = [p for p in pts if p.cls == "node" and p.stability == "ws"][0]
    comp = [Component("point", 0, sink.state[None, :], sink)]
    assert verify_attractor(node_atlas, comp, 0.06)[0]
    assert verify_attractor(node_atlas, comp, 0.03)[0]


def test_attracting_set_plus_isolated_saddle_is_not_an_attractor(node_atlas):
    pts, _ = find_singular_points(node_atlas)
    sink = [p for p in pts if p.cls == "node" and p.stability == "ws"][0]
    b = [p for p in pts if p.cls == "saddle" and p.stability == "ws"][0]
    comps = [Component("point", 0, sink.state[None, :], sink), Component("point", 0, b.state[None, :], b)]
    ok, witness = verify_attractor(node_atlas, comps, 0.05)
    assert not ok and witness is not None


def test_default_attractor_verified(atlas, structure):
    assert verify_attractor(atlas, structure.K_plus, 0.05)[0]


def test_direction_sets_are_conormal_circles(structure):
    P = structure.direction_set("+")
    assert P.shape[1] == 3
    # attracting circles sit at x = 1/4 on both sheets
    assert np.allclose(P[:, 0], 0.25, atol=1e-6)
    with pytest.raises(FoliationError):
        from degzero.foliation import SimpleStructure
        SimpleStructure(K_plus=[Component("point", 0, np.zeros((1, 2)), None)], K_minus=[], points=[],
                        cycles=[], nb=1).direction_set("+")
