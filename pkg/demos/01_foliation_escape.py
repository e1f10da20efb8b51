"""Foliation of the shell boundary and an escape function for the default model.

Builds the two-sheet atlas, finds the closed cycles (one attracting, one
repelling per sheet), assembles (K+, K-) and synthesizes a degree-one escape
function by linear programming, then re-certifies it on a finer grid.

Run:  python3 demos/01_foliation_escape.py
"""

import numpy as np

from degzero.escape import certify, synthesize_lp
from degzero.foliation import FoliationAtlas, assemble_simple_structure, find_cycles, find_singular_points
from degzero.symbol import default_model


def main():
    spec = default_model()
    atlas = FoliationAtlas.from_symbol(spec, grid=32)
    print(f"sheets: {len(atlas.branches)}, max |a + div W| = {atlas.polar_residual():.2e}")

    pts, _ = find_singular_points(atlas)
    cycles, _ = find_cycles(atlas)
    print(f"singular points: {len(pts)}, closed cycles: {len(cycles)}")
    for c in cycles:
        print("  ", c)

    S = assemble_simple_structure(atlas, pts, cycles, rng=np.random.Generator(np.random.Philox(0)), n_seeds=50)
    b = S.basin
    print(f"basin: forward {b['forward_fraction']:.2f}, backward {b['backward_fraction']:.2f}")

    k = synthesize_lp(atlas)
    m = certify(k, atlas, refinement=4)
    print(f"LP escape margin {k.delta:.4f}, certified on 4x grid: {m:.4f}")


if __name__ == "__main__":
    main()
