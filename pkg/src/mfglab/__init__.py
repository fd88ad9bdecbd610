"""Numerical laboratory for coupled forward-backward parabolic systems
driven by a common scalar noise, discretized on a binary scenario tree.

Subpackages by topic:

* :mod:`mfglab.grid`      periodic spatial grids, fields, norms, .fld I/O
* :mod:`mfglab.tree`      binary scenario trees (recombining or not)
* :mod:`mfglab.kernels`   finite-difference / spectral operators (numpy or jax)
* :mod:`mfglab.models`    Hamiltonians, interaction kernels, couplings, sources
* :mod:`mfglab.solver`    the coupled density / value-function solver
* :mod:`mfglab.carleman`  weighted-in-time energy inequalities
* :mod:`mfglab.stability` Lipschitz and Hoelder twin experiments
* :mod:`mfglab.inversion` source reconstruction from boundary data
* :mod:`mfglab.cli`       the ``mfg-lab`` command-line entry point
"""

from .grid import Field, Grid, GridError
from .models import MfgProblem
from .solver import MfgSolution, SolverConfig, solve_mfg
from .tree import CapacityError, ScenarioTree, TreeError

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "Field",
    "Grid",
    "GridError",
    "MfgProblem",
    "MfgSolution",
    "ScenarioTree",
    "SolverConfig",
    "TreeError",
    "solve_mfg",
    "__version__",
]
