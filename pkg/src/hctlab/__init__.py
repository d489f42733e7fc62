"""hctlab: a desk-scale laboratory for hidden-configuration trajectory theories.

Quantum evolution on uniform grids, permanently-disjoint branch trees,
Bohmian reference trajectories, classical ensembles weighted by the
final-condition measure, and exact lattice path sums, plus the scenario
library and CLI that tie them together.
"""

from .kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
