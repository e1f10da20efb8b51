"""Forced waves: linear energy growth and the Sobolev threshold.

A broadband forcing at omega = 0 (orthogonal to the exact kernel of the
truncation) makes ||u(t)||^2 grow linearly until the energy reaches the
truncation edge.  The limiting-absorption approximants u_eps stay bounded in
H^{-1} and blow up in L^2.

Run:  python3 demos/03_waves.py
"""

import numpy as np

from degzero import waves as W
from degzero.quantize import quantize
from degzero.symbol import default_model


def forcing(M, seed, n_members):
    f = W.broadband_forcing(M.modes, W.make_rng(seed), n_members=n_members)
    _, Vk = W.exact_modes_at(M, 0.0)
    f.f = W.project_out(f.f, Vk)
    return f


def main():
    spec = default_model()
    _, M = quantize(spec, 24).real_gauge()
    f = forcing(M, 0, 8)

    TH, _ = W.heisenberg_time(M, 0.0)
    probe = W.evolve_forced(M, f, np.linspace(0, TH, 81), method="chebyshev")
    T2 = W.edge_time(probe, 0.05)
    res = W.evolve_forced(M, f, np.linspace(0, T2, 81), method="chebyshev")
    c, r2 = W.growth_slope(res, (T2 / 4, T2), t_guard=TH, r2_min=0.9)[:2]
    print(f"Heisenberg time {TH:.1f}, edge time {T2:.1f}: slope {c:.4f}, R^2 {r2:.3f}")

    _, M32 = quantize(spec, 32).real_gauge()
    f32 = forcing(M32, 3, 8)
    r = W.sobolev_scaling(M32, f32.f, 0.0, [0.04, 0.02, 0.01], [-1.0, 0.0], method="splu")
    for s, e in sorted(r["exponents"].items()):
        print(f"H^{s:+.0f}: ||u_eps|| ~ eps^(-{e:.3f})")


if __name__ == "__main__":
    main()
