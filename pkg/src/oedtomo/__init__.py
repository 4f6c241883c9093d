"""Optimal experimental design of projection angles for constrained tomography.

Modules: ``tomo`` (forward operators), ``datagen`` (training sets and noise),
``qp`` (constrained MAP solver), ``sensitivity`` (implicit differentiation),
``bayesrisk`` (closed-form risk), ``oed`` (design problems) and ``cli``.
"""

from .datagen import NoiseSpec, TrainingSet, generate, read_tomoset, write_tomoset
from .oed import (
    DesignVector,
    OedConfig,
    OedResult,
    ProblemA,
    ProblemB,
    alpha_sweep,
    beta_sweep,
    landscape_scan,
    solve_oed_a,
    solve_oed_b,
)
from .qp import ConstraintSpec, QpProblem, solve
from .tomo import Grid, ProjectionBank, assemble_forward_A, assemble_forward_B

__version__ = "0.1.0"

__all__ = [
    "ConstraintSpec",
    "DesignVector",
    "Grid",
    "NoiseSpec",
    "OedConfig",
    "OedResult",
    "ProblemA",
    "ProblemB",
    "ProjectionBank",
    "QpProblem",
    "TrainingSet",
    "alpha_sweep",
    "assemble_forward_A",
    "assemble_forward_B",
    "beta_sweep",
    "generate",
    "landscape_scan",
    "read_tomoset",
    "solve",
    "solve_oed_a",
    "solve_oed_b",
    "write_tomoset",
]
