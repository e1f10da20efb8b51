"""Shared, session-scoped objects for the default model.

The atlas for the default model is built once on a 64 x 64 grid per sheet;
structures, escape functions and eigendecompositions derived from it are
cached here so unit and acceptance tests share the work.
"""

import numpy as np
import pytest

from degzero.foliation import FoliationAtlas, assemble_simple_structure, find_cycles, find_singular_points
from degzero.symbol import default_model

GRID = 64


@pytest.fixture(scope="session")
def spec():
    return default_model()


@pytest.fixture(scope="session")
def atlas(spec):
    return FoliationAtlas.from_symbol(spec, grid=GRID)


@pytest.fixture(scope="session")
def features(atlas):
    pts, pn = find_singular_points(atlas)
    cyc, cn = find_cycles(atlas)
    return pts, cyc, list(pn) + list(cn)


@pytest.fixture(scope="session")
def structure(atlas, features):
    pts, cyc, _ = features
    return assemble_simple_structure(atlas, pts, cyc)


@pytest.fixture(scope="session")
def lp_escape(atlas):
    from degzero.escape import synthesize_lp
    return synthesize_lp(atlas)


@pytest.fixture(scope="session")
def flow_escape(atlas, structure):
    from degzero.escape import construct_flow_method
    return construct_flow_method(atlas, structure)


@pytest.fixture(scope="session")
def eig16(spec):
    from degzero.quantize import quantize
    from degzero.spectral import eigendecompose
    M = quantize(spec, 16)
    return M, eigendecompose(M)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
