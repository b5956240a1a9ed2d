"""Coefficient data for periodic magnetic Schrödinger operators.

The operator is

    H = <(-i grad - A), G (-i grad - A)> + V,    A(x) = (-b x2, 0, 0) + a(x),

on R^3 with G, a and V periodic with respect to (2 pi Z)^3.  Periodic
coefficients are stored as finite real Fourier series, so every evaluator is
smooth and exactly periodic.  The constant field b is stored through the
integer flux n0 = 2 pi b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from numbers import Integral, Real
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TARGETS",
    "FourierTerm",
    "CoefficientSpec",
    "Problem",
    "ValidationReport",
    "ProblemError",
    "FluxQuantizationError",
    "build_problem",
    "symmetrize",
    "validate",
    "gauge_transform",
    "quantized_flux",
    "parse_fourier_terms",
]

#: Coefficient slots a Fourier term may target.  Metric entries are symmetric,
#: so ``g21`` is accepted as an alias of ``g12`` and so on.
TARGETS = ("V", "a1", "a2", "a3", "g11", "g12", "g13", "g22", "g23", "g33")
_ALIASES = {"g21": "g12", "g31": "g13", "g32": "g23"}
PRESETS = ("free", "landau", "custom")

# Reflection R(x1, x2, x3) = (x1, x2, -x3) acts on vectors by this sign pattern.
_REFLECT = np.array([1.0, 1.0, -1.0])

FLUX_TOL = 1e-12


class ProblemError(ValueError):
    """Raised for malformed coefficient specifications."""


class FluxQuantizationError(ProblemError):
    """Raised when 2 pi b is not a nonnegative integer."""


@dataclass(frozen=True)
class FourierTerm:
    """One real Fourier mode ``amplitude * cos(m . x)`` (or ``sin``) added to ``target``."""

    target: str
    mode: tuple[int, int, int]
    amplitude: float
    phase: str = "cos"

    def __post_init__(self):
        target = _ALIASES.get(self.target, self.target)
        if target not in TARGETS:
            raise ProblemError(f"unknown Fourier target {self.target!r}")
        object.__setattr__(self, "target", target)
        mode = tuple(self.mode)
        if len(mode) != 3:
            raise ProblemError(f"mode vector must have 3 entries, got {mode!r}")
        ints = []
        for m in mode:
            if isinstance(m, bool) or not isinstance(m, (Integral, Real)):
                raise ProblemError(f"mode entries must be integers, got {mode!r}")
            if isinstance(m, Real) and not float(m).is_integer():
                raise ProblemError(f"mode entries must be integers, got {mode!r}")
            ints.append(int(m))
        object.__setattr__(self, "mode", tuple(ints))
        if self.phase not in ("cos", "sin"):
            raise ProblemError(f"phase must be 'cos' or 'sin', got {self.phase!r}")
        amp = float(self.amplitude)
        if not math.isfinite(amp):
            raise ProblemError("amplitude must be finite")
        object.__setattr__(self, "amplitude", amp)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        arg = x @ np.asarray(self.mode, dtype=float)
        wave = np.cos(arg) if self.phase == "cos" else np.sin(arg)
        return self.amplitude * wave

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Analytic gradient, shape ``x.shape``."""
        m = np.asarray(self.mode, dtype=float)
        arg = x @ m
        dwave = -np.sin(arg) if self.phase == "cos" else np.cos(arg)
        return self.amplitude * dwave[..., None] * m

    def reflected(self) -> FourierTerm:
        """The term ``t(R x)`` rewritten as a term in ``x``."""
        m1, m2, m3 = self.mode
        return replace(self, mode=(m1, m2, -m3))

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "mode": list(self.mode),
            "amplitude": self.amplitude,
            "phase": self.phase,
        }


def parse_fourier_terms(records: Iterable[Mapping]) -> tuple[FourierTerm, ...]:
    """Build terms from JSON-style records ``{target, mode, amplitude, phase}``."""
    terms = []
    for i, rec in enumerate(records):
        if not isinstance(rec, Mapping):
            raise ProblemError(f"fourier_terms[{i}] must be a mapping")
        unknown = set(rec) - {"target", "mode", "amplitude", "phase"}
        if unknown:
            raise ProblemError(f"fourier_terms[{i}]: unknown keys {sorted(unknown)}")
        try:
            terms.append(
                FourierTerm(
                    target=rec["target"],
                    mode=tuple(rec["mode"]),
                    amplitude=rec["amplitude"],
                    phase=rec.get("phase", "cos"),
                )
            )
        except KeyError as exc:
            raise ProblemError(f"fourier_terms[{i}]: missing key {exc}") from None
    return tuple(terms)


@dataclass(frozen=True)
class CoefficientSpec:
    """User-facing description of a problem.

    ``field_strength`` is an optional raw value of b.  It exists so that an
    unquantized field can be reported instead of silently rounded; it must
    agree with ``flux_integer`` when both are given.
    """

    kind: str
    fourier_terms: tuple[FourierTerm, ...] = ()
    flux_integer: int = 0
    symmetrize: bool = False
    field_strength: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "fourier_terms", tuple(self.fourier_terms))
        if isinstance(self.flux_integer, bool) or not isinstance(self.flux_integer, Integral):
            raise ProblemError(f"flux_integer must be an integer, got {self.flux_integer!r}")
        if self.flux_integer < 0:
            raise ProblemError("flux_integer must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> CoefficientSpec:
        """Parse the problem-file schema (keys ``preset``, ``flux_integer``, ...)."""
        allowed = {"preset", "flux_integer", "fourier_terms", "symmetrize", "field_strength"}
        unknown = set(data) - allowed
        if unknown:
            raise ProblemError(f"unknown problem keys {sorted(unknown)}")
        if "preset" not in data:
            raise ProblemError("problem definition needs a 'preset'")
        field_strength = data.get("field_strength")
        flux = data.get("flux_integer")
        if flux is None:
            flux = 0
            if field_strength is not None:
                n0 = quantized_flux(float(field_strength))
                flux = n0 if n0 is not None else 0
        return cls(
            kind=data["preset"],
            fourier_terms=parse_fourier_terms(data.get("fourier_terms", ())),
            flux_integer=flux,
            symmetrize=bool(data.get("symmetrize", False)),
            field_strength=None if field_strength is None else float(field_strength),
        )

    def to_dict(self) -> dict:
        out = {
            "preset": self.kind,
            "flux_integer": self.flux_integer,
            "fourier_terms": [t.to_dict() for t in self.fourier_terms],
            "symmetrize": self.symmetrize,
        }
        if self.field_strength is not None:
            out["field_strength"] = self.field_strength
        return out


def quantized_flux(b: float, tol: float = FLUX_TOL) -> int | None:
    """Return n0 if ``2 pi b`` is a nonnegative integer (within ``tol``), else None."""
    flux = 2.0 * math.pi * b
    n0 = round(flux)
    if n0 < 0 or abs(flux - n0) > tol * max(1.0, abs(flux)):
        return None
    return int(n0)


@dataclass(frozen=True)
class Problem:
    """Immutable operator coefficients with optional spectral shifts.

    ``lambda_shift`` replaces V by V - lambda and ``khat_shift`` replaces A by
    A - (k1, k2, 0); both are used for the slab reduction.
    """

    terms: tuple[FourierTerm, ...] = ()
    flux_integer: int | None = 0
    b: float = 0.0
    lambda_shift: float = 0.0
    khat_shift: tuple[float, float] = (0.0, 0.0)
    symmetric: bool = False
    name: str = "custom"
    _by_target: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_target: dict[str, list[FourierTerm]] = {t: [] for t in TARGETS}
        for term in self.terms:
            by_target[term.target].append(term)
        object.__setattr__(self, "_by_target", by_target)

    @property
    def quantized(self) -> bool:
        return self.flux_integer is not None

    def _series(self, target: str, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[:-1])
        for term in self._by_target[target]:
            out = out + term.evaluate(x)
        return out

    def eval_G(self, x) -> np.ndarray:
        """Metric at points ``x`` (shape ``(..., 3)``), returns ``(..., 3, 3)``."""
        x = np.asarray(x, dtype=float)
        G = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        for j in range(3):
            for l in range(j, 3):
                s = self._series(f"g{j + 1}{l + 1}", x)
                G[..., j, l] += s
                if l != j:
                    G[..., l, j] += s
        return G

    def eval_a(self, x) -> np.ndarray:
        """Periodic part of the vector potential, shape ``(..., 3)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([self._series(f"a{d}", x) for d in (1, 2, 3)], axis=-1)

    def eval_A(self, x) -> np.ndarray:
        """Full vector potential including the linear gauge term and ``khat_shift``.

        The linear term -b x2 uses the coordinates as given; callers on the
        cell pass local coordinates in [-pi, pi).
        """
        x = np.asarray(x, dtype=float)
        A = self.eval_a(x)
        A[..., 0] -= self.b * x[..., 1] + self.khat_shift[0]
        A[..., 1] -= self.khat_shift[1]
        return A

    def eval_V(self, x) -> np.ndarray:
        """Scalar potential minus ``lambda_shift``."""
        x = np.asarray(x, dtype=float)
        return self._series("V", x) - self.lambda_shift

    def with_shifts(self, khat=(0.0, 0.0), lam: float = 0.0) -> Problem:
        k1, k2 = khat
        return replace(self, khat_shift=(float(k1), float(k2)), lambda_shift=float(lam))

    def with_terms(self, extra: Sequence[FourierTerm]) -> Problem:
        return replace(self, terms=self.terms + tuple(extra), symmetric=False)

    def potential_floor(self) -> float:
        """Lower bound for V - lambda from the absolute sum of amplitudes."""
        total = sum(abs(t.amplitude) for t in self._by_target["V"])
        constant = sum(
            t.amplitude for t in self._by_target["V"] if t.phase == "cos" and t.mode == (0, 0, 0)
        )
        bound = constant - (total - abs(constant))
        return bound - self.lambda_shift


def build_problem(spec: CoefficientSpec, strict: bool = True) -> Problem:
    """Construct the operator coefficients described by ``spec``.

    With ``strict=False`` an unquantized ``field_strength`` is kept (with
    ``flux_integer=None``) so that :func:`validate` can report it; assembly
    refuses such problems.
    """
    if not isinstance(spec, CoefficientSpec):
        raise ProblemError("expected a CoefficientSpec")
    if not spec.kind:
        raise ProblemError("empty problem specification")
    if spec.kind not in PRESETS:
        raise ProblemError(f"unknown preset {spec.kind!r}; expected one of {PRESETS}")
    if spec.kind == "custom" and not spec.fourier_terms and spec.flux_integer == 0 \
            and not spec.field_strength:
        raise ProblemError("empty custom specification; use preset 'free'")
    n0: int | None = spec.flux_integer
    if spec.kind == "free" and n0 != 0:
        raise ProblemError("preset 'free' has zero field; use 'landau' for flux")
    b = n0 / (2.0 * math.pi)
    if spec.field_strength is not None:
        q = quantized_flux(spec.field_strength)
        if q is None:
            if strict:
                raise FluxQuantizationError(
                    f"2*pi*b = {2 * math.pi * spec.field_strength:.6g} is not a "
                    "nonnegative integer"
                )
            n0, b = None, float(spec.field_strength)
        elif q != spec.flux_integer and spec.flux_integer != 0:
            raise ProblemError("field_strength and flux_integer disagree")
        else:
            n0, b = q, q / (2.0 * math.pi)
    problem = Problem(terms=spec.fourier_terms, flux_integer=n0, b=b, name=spec.kind)
    if spec.symmetrize:
        problem = symmetrize(problem)
    return problem


def symmetrize(problem: Problem) -> Problem:
    """Average the coefficients with their mirror images under x3 -> -x3.

    Works on the Fourier terms, so the result is exact: each term is halved
    and paired with its reflected copy, with the sign pattern of ``R G R`` and
    ``R a`` applied.
    """
    sign = {"V": 1.0, "a1": 1.0, "a2": 1.0, "a3": -1.0}
    for j in range(3):
        for l in range(j, 3):
            sign[f"g{j + 1}{l + 1}"] = _REFLECT[j] * _REFLECT[l]
    merged: dict[tuple, float] = {}
    for term in problem.terms:
        for t, s in ((term, 1.0), (term.reflected(), sign[term.target])):
            mode, amp = t.mode, 0.5 * s * t.amplitude
            # cos is even and sin is odd, so a canonical sign of the mode vector
            # lets mirrored copies merge.
            if tuple(-m for m in mode) > mode:
                mode = tuple(-m for m in mode)
                if t.phase == "sin":
                    amp = -amp
            key = (t.target, mode, t.phase)
            merged[key] = merged.get(key, 0.0) + amp
    terms = tuple(
        FourierTerm(target, mode, amp, phase)
        for (target, mode, phase), amp in merged.items()
        if amp != 0.0 and not (phase == "sin" and mode == (0, 0, 0))
    )
    return replace(problem, terms=terms, symmetric=True)


@dataclass(frozen=True)
class ValidationReport:
    ellipticity_bounds: tuple[float, float]
    symmetry_residual: float
    flux: int | None
    flux_ok: bool
    periodicity_ok: bool
    symmetry_required: bool = False
    failures: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "ellipticity": list(self.ellipticity_bounds),
            "symmetry_residual": self.symmetry_residual,
            "flux": self.flux,
            "flux_ok": self.flux_ok,
            "periodicity_ok": self.periodicity_ok,
            "failures": list(self.failures),
        }


def sample_points(samples: int) -> np.ndarray:
    """Lattice of ``samples**3`` points in [-pi, pi)^3, shape ``(N, 3)``."""
    t = -math.pi + 2.0 * math.pi * np.arange(samples) / samples
    X = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return X.reshape(-1, 3)


def symmetry_residual(problem: Problem, x: np.ndarray) -> float:
    Rx = x * _REFLECT
    R = np.diag(_REFLECT)
    dG = problem.eval_G(Rx) - R @ problem.eval_G(x) @ R
    da = problem.eval_a(Rx) - problem.eval_a(x) * _REFLECT
    dV = problem.eval_V(Rx) - problem.eval_V(x)
    return float(max(np.abs(dG).max(), np.abs(da).max(), np.abs(dV).max()))


def validate(problem: Problem, samples: int = 17, require_symmetry: bool | None = None,
             symmetry_tol: float = 1e-12) -> ValidationReport:
    """Check ellipticity, flux quantization, periodicity and (optionally) symmetry."""
    if samples < 2:
        raise ProblemError("need at least 2 samples per axis")
    if require_symmetry is None:
        require_symmetry = problem.symmetric
    x = sample_points(samples)
    failures = []

    G = problem.eval_G(x)
    asym = np.abs(G - np.swapaxes(G, -1, -2)).max()
    if asym > 1e-14:
        failures.append(f"metric not symmetric (defect {asym:.3g})")
    eig = np.linalg.eigvalsh(G)
    c_est, C_est = float(eig[:, 0].min()), float(eig[:, -1].max())
    if c_est <= 0:
        where = x[int(np.argmin(eig[:, 0]))]
        failures.append(f"metric not positive definite at x={where.tolist()}")

    resid = symmetry_residual(problem, x)
    if require_symmetry and resid > symmetry_tol:
        failures.append(f"reflection symmetry defect {resid:.3g}")

    flux_ok = problem.flux_integer is not None and problem.flux_integer >= 0
    if flux_ok:
        # b is derived from n0, exact integer bookkeeping.
        flux_ok = problem.b == problem.flux_integer / (2.0 * math.pi)
    if not flux_ok:
        failures.append(f"flux 2*pi*b = {2 * math.pi * problem.b:.6g} is not an integer")

    periodic = True
    for d in range(3):
        shifted = x.copy()
        shifted[:, d] += 2.0 * math.pi
        periodic &= bool(np.allclose(problem.eval_G(shifted), G, rtol=0, atol=1e-12))
        periodic &= bool(np.allclose(problem.eval_a(shifted), problem.eval_a(x), rtol=0, atol=1e-12))
        periodic &= bool(np.allclose(problem.eval_V(shifted), problem.eval_V(x), rtol=0, atol=1e-12))
    if not periodic:
        failures.append("coefficients are not 2*pi-periodic")

    return ValidationReport(
        ellipticity_bounds=(c_est, C_est),
        symmetry_residual=resid,
        flux=problem.flux_integer,
        flux_ok=flux_ok,
        periodicity_ok=periodic,
        symmetry_required=bool(require_symmetry),
        failures=tuple(failures),
    )


def gauge_transform(problem: Problem, chi: Sequence[FourierTerm] | Sequence[Mapping]) -> Problem:
    """Replace a by a + grad(chi) for a periodic scalar ``chi`` given as Fourier terms.

    The gradient is taken analytically term by term, so the magnetic field is
    unchanged exactly.
    """
    extra = []
    for item in chi:
        if isinstance(item, Mapping):
            item = FourierTerm(target="V", mode=tuple(item["mode"]),
                               amplitude=item["amplitude"], phase=item.get("phase", "cos"))
        elif not isinstance(item, FourierTerm):
            raise ProblemError("chi must be given as Fourier terms")
        # d/dx_d [A cos(m.x)] = -A m_d sin(m.x);  d/dx_d [A sin(m.x)] = A m_d cos(m.x)
        for d in range(3):
            m_d = item.mode[d]
            if m_d == 0:
                continue
            if item.phase == "cos":
                extra.append(FourierTerm(f"a{d + 1}", item.mode, -item.amplitude * m_d, "sin"))
            else:
                extra.append(FourierTerm(f"a{d + 1}", item.mode, item.amplitude * m_d, "cos"))
    symmetric = problem.symmetric
    out = problem.with_terms(extra)
    if symmetric and symmetry_residual(out, sample_points(5)) <= 1e-12:
        out = replace(out, symmetric=True)
    return out
