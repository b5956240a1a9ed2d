"""Floquet-Bloch bands and Dirichlet-Neumann pencils for periodic magnetic Schroedinger operators."""

from importlib.metadata import PackageNotFoundError, version

from .bands import BandTable, EigensolverError, FlatBandReport, KPath, band_structure, flat_band_scan
from .fiber import FiberSystem, GelfandSample, assemble_fiber, assemble_slab, gelfand_transform
from .grid import TwistedGrid, build_grid, reflect, wrap
from .pencil import (
    CrosscheckReport,
    DegeneratePencilError,
    MultiplierSet,
    PencilReport,
    build_subspaces,
    assemble_dn_forms,
    crosscheck,
    multipliers,
    pencil_spectrum,
    reconstruct_solution,
    run_pencil,
)
from .problem import (
    CoefficientSpec,
    FluxQuantizationError,
    FourierTerm,
    Problem,
    ProblemError,
    build_problem,
    gauge_transform,
    symmetrize,
    validate,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = [
    "BandTable", "CoefficientSpec", "CrosscheckReport", "DegeneratePencilError",
    "EigensolverError", "FiberSystem", "FlatBandReport", "FluxQuantizationError",
    "FourierTerm", "GelfandSample", "KPath", "MultiplierSet", "PencilReport", "Problem",
    "ProblemError", "TwistedGrid", "assemble_dn_forms", "assemble_fiber", "assemble_slab",
    "band_structure", "build_grid", "build_problem", "build_subspaces", "crosscheck",
    "flat_band_scan", "gauge_transform", "gelfand_transform", "multipliers",
    "pencil_spectrum", "reconstruct_solution", "reflect", "run_pencil", "symmetrize",
    "validate", "wrap", "__version__",
]
