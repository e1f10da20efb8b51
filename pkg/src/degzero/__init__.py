"""Propagation of waves near a degenerate zero-order symbol on the torus.

Subpackages cover the symbol and its Hamiltonian flow (:mod:`symbol`,
:mod:`dynamics`), the foliation of the shell boundary (:mod:`foliation`),
escape functions (:mod:`escape`), quantization (:mod:`quantize`), spectral
diagnostics (:mod:`spectral`), forced and viscous wave evolution
(:mod:`waves`) and the command line interface (:mod:`cli`).
"""

__version__ = "0.1.0"
