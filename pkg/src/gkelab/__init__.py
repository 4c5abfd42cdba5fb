"""Numerical lab for canonical Kahler metrics on toric Fano manifolds.

Torus symmetry reduces the Ricci-Calabi energy, the sector operators L and
Lbar, their Hessian 2 L Lbar, the Matsushima eigen-decomposition and the
inverse Monge-Ampere flow to convex potentials on R^n plus per-Fourier-weight
elliptic operators on truncated grids. The package keeps exact polytope
combinatorics (toric) strictly separate from floating-point state (the rest)
so every numerical claim has a rational oracle to answer to.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "constants",
    "toric",
    "mesh",
    "kahler_state",
    "sector_ops",
    "spectra",
    "flow",
    "torus_oracle",
    "config",
    "reports",
    "cli",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
