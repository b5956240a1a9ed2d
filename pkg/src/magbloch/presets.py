"""Named sample problems used by the CLI, tests and the acceptance suite."""

from __future__ import annotations

from .problem import CoefficientSpec, FourierTerm

__all__ = ["symmetric_suite", "asymmetric_control", "SUITE_NAMES"]


def _crystal_terms() -> tuple[FourierTerm, ...]:
    return (
        FourierTerm("V", (1, 0, 0), 0.8, "cos"),
        FourierTerm("V", (0, 1, 1), 0.5, "cos"),
        FourierTerm("V", (0, 0, 1), 0.6, "cos"),
        FourierTerm("g11", (0, 1, 0), 0.3, "cos"),
        FourierTerm("g22", (1, 0, 1), 0.2, "cos"),
        FourierTerm("g33", (0, 0, 1), 0.25, "cos"),
        FourierTerm("g12", (1, 1, 0), 0.1, "sin"),
        FourierTerm("g13", (0, 0, 1), 0.1, "sin"),
        FourierTerm("a1", (0, 1, 0), 0.3, "cos"),
        FourierTerm("a2", (1, 0, 1), 0.2, "sin"),
        FourierTerm("a3", (0, 1, 1), 0.2, "sin"),
    )


SUITE_NAMES = ("crystal", "magnetic_crystal", "landau")


def symmetric_suite() -> dict[str, CoefficientSpec]:
    """Three reflection-symmetric problems with flux 0 and 1.

    The two crystals have variable metric, periodic vector potential and
    potential; they are symmetrized on construction.
    """
    return {
        "crystal": CoefficientSpec("custom", _crystal_terms(), flux_integer=0, symmetrize=True),
        "magnetic_crystal": CoefficientSpec(
            "landau", _crystal_terms(), flux_integer=1, symmetrize=True
        ),
        "landau": CoefficientSpec("landau", flux_integer=1, symmetrize=True),
    }


def asymmetric_control() -> CoefficientSpec:
    """Free metric with a potential that is odd in x3 (breaks the reflection symmetry)."""
    return CoefficientSpec(
        "custom",
        (
            FourierTerm("V", (0, 0, 1), 0.7, "sin"),
            FourierTerm("V", (1, 1, 1), 0.4, "cos"),
        ),
    )
