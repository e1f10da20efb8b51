"""Weyl law for the semiclassical family H_n of the three-dimensional model.

The radial model has a closed-form level-set volume that fixes the constant
n^2 / 4 pi^2; the default model is then counted against its numerically
computed volume.

Run:  python3 demos/04_weyl.py
"""

import numpy as np

from degzero.spectral import phase_volume, weyl_count
from degzero.symbol import default_model_3d, radial_model_3d


def main():
    J = (0.6, 0.9)
    G = lambda y: np.sqrt(1 / y ** 2 - 1)  # noqa: E731
    v = phase_volume(radial_model_3d().h1, J)["volume"]
    print(f"radial volume {v:.6f}, closed form {np.pi * (G(J[0]) ** 2 - G(J[1]) ** 2):.6f}")

    spec3 = default_model_3d()
    vol = phase_volume(spec3.h1, J)["volume"]
    for n in (10, 20):
        w = weyl_count(spec3, n, J, volume=vol)
        print(f"n={n:3d}  count {w.count}  prediction {w.prediction:.1f}  rel error {w.rel_error:.3f}")


if __name__ == "__main__":
    main()
