"""Spectrum of the truncated quantization and a quasimode.

The eigenvalues of the Fourier-truncated operator fill the symbol range
[h-, h+] with shrinking gaps as the truncation grows, and a Lagrangian
packet transported by the flow has an O(1/t) residual.

Run:  python3 demos/02_spectrum.py
"""

import numpy as np

from degzero.spectral import essential_spectrum_estimate, quasimode_test
from degzero.symbol import default_model


def main():
    spec = default_model()
    r = essential_spectrum_estimate(spec, N_list=(12, 24))
    for row in r["by_N"]:
        print(f"N={row['N']:3d}  dist to range {max(row['dist_min'], row['dist_max']):.4f}  "
              f"max interior gap {row['max_interior_gap']:.4f}")

    t = [2 * np.pi * K for K in range(2, 21, 2)]
    q = quasimode_test(spec, 0.3, (0.0, 0.0), (1.0, 0.0), t, eps=0.1, N=32)
    for o in q["curve"]:
        print(f"t={o['t']:7.2f}  residual {o['residual']:.4f}  admissible {o['admissible']}")
    print(f"fit exponent {q['fit_exponent']:.3f}")


if __name__ == "__main__":
    main()
