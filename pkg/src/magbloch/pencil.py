"""Dirichlet-Neumann reduction of the slab problem to a linear pencil.

On a slab grid the form h0 (with potentials shifted by khat and lambda) is
restricted to grid functions that vanish on the top face and satisfy the
interior equations.  Two forms on that space,

    t0[u, v] = h0[u, v],    t1[u, v] = h0[u, J v],

define the pencil t0 + z t1.  A Bloch solution with face relation
``u|top = zeta u|bottom`` exists exactly when ``z = (zeta + 1/zeta) / 2`` is an
eigenvalue of the pencil (for reflection-symmetric coefficients), so unit
multipliers give the real quasimomenta k3 with ``zeta = exp(2 pi i k3)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.optimize as so
import scipy.sparse.linalg as sla

from .bands import DEFAULT_TOL, EigensolverError, solve_lowest
from .fiber import FiberSystem, assemble_fiber, assemble_slab
from .grid import TwistedGrid, reflect
from .problem import Problem

__all__ = [
    "SubspaceError",
    "DegeneratePencilError",
    "Subspaces",
    "DNForms",
    "PencilReport",
    "MultiplierSet",
    "CrosscheckReport",
    "build_subspaces",
    "assemble_dn_forms",
    "pencil_spectrum",
    "multipliers",
    "reconstruct_solution",
    "recover_psi",
    "run_pencil",
    "crosscheck",
]

log = logging.getLogger(__name__)

TOL_NULL = 1e-8
TOL_REAL = 1e-7
TOL_SINGULAR = 1e-13
TOL_UNIT = 1e-8
DENSE_INTERIOR_LIMIT = 8000


class SubspaceError(RuntimeError):
    """Interior solve failed; carries a conditioning report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class DegeneratePencilError(RuntimeError):
    def __init__(self, message, sigma_min_t1=None):
        super().__init__(message)
        self.sigma_min_t1 = sigma_min_t1


@dataclass
class Subspaces:
    """Bases of N (interior null space) and Z (interior solutions vanishing on top).

    Columns are full slab grid functions normalized in the mass norm.
    """

    N_basis: np.ndarray
    Z_basis: np.ndarray
    traces: np.ndarray  # bottom-face data of each Z column before normalization
    incompatible_directions: int
    interior_residual: float
    interior_sigma_max: float
    interior_sigma_min: float
    gram_condition: float

    @property
    def dim_N(self) -> int:
        return self.N_basis.shape[1]

    @property
    def dim_Z(self) -> int:
        return self.Z_basis.shape[1]


def _interior_dense(Hii, tol_null):
    mu, Q = la.eigh(Hii.toarray())
    if not np.all(np.isfinite(mu)):
        raise SubspaceError("interior eigen-decomposition failed")
    smax = float(np.max(np.abs(mu)))
    null = np.abs(mu) < tol_null * smax
    keep = ~null
    Qk, mk = Q[:, keep], mu[keep]

    def solve(rhs):
        # pseudo-inverse on the complement of the null space
        return Qk @ ((Qk.conj().T @ rhs) / mk[:, None])

    return Q[:, null], solve, smax, float(np.min(np.abs(mu)))


def _interior_sparse(Hii, tol_null):
    """Large interior blocks: sparse LU, only when the block is safely nonsingular."""
    n = Hii.shape[0]
    smax = float(abs(sla.eigsh(Hii, k=1, which="LM", return_eigenvectors=False)[0]))
    v0 = np.ones(n, dtype=Hii.dtype)
    small = sla.eigsh(Hii, k=min(4, n - 2), sigma=0.0, which="LM", v0=v0,
                      return_eigenvectors=False)
    smin = float(np.min(np.abs(small)))
    if smin < tol_null * smax:
        raise SubspaceError(
            "interior block is near-singular and too large for the dense path",
            {"sigma_max": smax, "sigma_min": smin, "interior_dofs": n},
        )
    lu = sla.splu(Hii.tocsc())
    return np.zeros((n, 0), dtype=complex), lu.solve, smax, smin


def build_subspaces(slab: FiberSystem, grid: TwistedGrid | None = None,
                    tol_null: float = TOL_NULL) -> Subspaces:
    """Construct N and Z for an assembled slab system.

    Bottom-face data that would make the interior problem unsolvable (a
    nonzero component against N, the discrete Fredholm alternative) are
    removed; the number removed is ``incompatible_directions``.
    """
    grid = grid or slab.grid
    if grid.mode != "slab":
        raise SubspaceError("build_subspaces needs a slab system")
    H = slab.H.tocsr()
    I, B, T = grid.interior, grid.bottom, grid.top
    HI = H[I]
    Hii = HI[:, I]
    HiB = HI[:, B].toarray()
    mass = slab.mass

    if len(I) > DENSE_INTERIOR_LIMIT:
        Qn, solve, smax, smin = _interior_sparse(Hii, tol_null)
    else:
        Qn, solve, smax, smin = _interior_dense(Hii, tol_null)

    # Compatible bottom data: H_IB g must be orthogonal to the interior null space.
    n_b = len(B)
    if Qn.shape[1]:
        C = Qn.conj().T @ HiB
        _, s, Vh = la.svd(C)
        rank = int(np.sum(s > tol_null * max(1.0, np.linalg.norm(HiB, 2))))
        traces = Vh[rank:].conj().T
        incompatible = rank
    else:
        traces = np.eye(n_b, dtype=complex)
        incompatible = 0
    if traces.shape[1] == 0:
        raise SubspaceError("no compatible bottom-face data",
                            {"sigma_max": smax, "sigma_min": smin})

    phi_I = solve(-HiB @ traces)
    if not np.all(np.isfinite(phi_I)):
        raise SubspaceError("interior solve produced non-finite values",
                            {"sigma_max": smax, "sigma_min": smin})

    ndof = grid.ndof
    Z = np.zeros((ndof, traces.shape[1]), dtype=complex)
    Z[B] = traces
    Z[I] = phi_I

    Nb = np.zeros((ndof, Qn.shape[1]), dtype=complex)
    Nb[I] = Qn
    if Nb.shape[1]:
        Nb /= np.sqrt(np.real(np.einsum("ij,i,ij->j", Nb.conj(), mass, Nb)))[None, :]
        Z -= Nb @ (Nb.conj().T @ (mass[:, None] * Z))
    Z[T] = 0.0

    norms = np.sqrt(np.real(np.einsum("ij,i,ij->j", Z.conj(), mass, Z)))
    Z /= norms[None, :]
    gram = Z.conj().T @ (mass[:, None] * Z)

    HZ = H @ Z
    hnorm = float(sla.norm(H, 1))
    resid = float(np.max(np.linalg.norm(HZ[I], axis=0) / np.linalg.norm(Z, axis=0))) / hnorm
    return Subspaces(
        N_basis=Nb,
        Z_basis=Z,
        traces=traces,
        incompatible_directions=incompatible,
        interior_residual=resid,
        interior_sigma_max=smax,
        interior_sigma_min=smin,
        gram_condition=float(np.linalg.cond(gram)),
    )


@dataclass
class DNForms:
    t0: np.ndarray
    t1: np.ndarray
    sigma_min_t1: float
    sigma_max_t1: float
    inertia_m: int
    t0_hermiticity: float
    t1_hermiticity: float

    @property
    def t1_condition_ratio(self) -> float:
        return self.sigma_min_t1 / self.sigma_max_t1 if self.sigma_max_t1 else 0.0


def _herm_defect(T: np.ndarray) -> float:
    scale = np.linalg.norm(T, 2)
    return float(np.linalg.norm(T - T.conj().T, 2) / scale) if scale else 0.0


def assemble_dn_forms(slab: FiberSystem, sub: Subspaces, grid: TwistedGrid | None = None,
                      inertia_tol: float = 1e-12) -> DNForms:
    """t0 = Z^* H Z and t1 = Z^* J H Z on the basis of ``sub``.

    ``inertia_m`` counts eigenvalues of t0 that are <= 0, with values within
    ``inertia_tol * ||t0||`` of zero counted as zero.
    """
    grid = grid or slab.grid
    Z = sub.Z_basis
    HZ = slab.H @ Z
    t0 = Z.conj().T @ HZ
    t1 = Z.conj().T @ reflect(grid, HZ)
    s = la.svdvals(t1)
    ev = la.eigvalsh(0.5 * (t0 + t0.conj().T))
    scale = float(np.max(np.abs(ev))) if ev.size else 0.0
    m = int(np.sum(ev <= inertia_tol * scale))
    return DNForms(
        t0=t0,
        t1=t1,
        sigma_min_t1=float(s.min()),
        sigma_max_t1=float(s.max()),
        inertia_m=m,
        t0_hermiticity=_herm_defect(t0),
        t1_hermiticity=_herm_defect(t1),
    )


@dataclass
class PencilReport:
    z_values: np.ndarray
    nonreal: np.ndarray
    inertia_m: int
    sigma_min_t1: float
    sigma_max_t1: float
    isotropy_residuals: np.ndarray  # (count_nonreal, 2): |c^* t0 c|, |c^* t1 c| for unit c
    isotropy_scale: float
    conjugation_defect: float

    @property
    def nonreal_count(self) -> int:
        return int(self.nonreal.sum())

    @property
    def bound_2m(self) -> int:
        return 2 * self.inertia_m

    @property
    def bound_ok(self) -> bool:
        return self.nonreal_count <= self.bound_2m

    @property
    def max_isotropy(self) -> float:
        if not len(self.isotropy_residuals):
            return 0.0
        return float(self.isotropy_residuals.sum(axis=1).max() / self.isotropy_scale)


def _conjugation_defect(z: np.ndarray) -> float:
    """max_j min_i |z_j - conj(z_i)| / (1 + |z_j|)."""
    if not len(z):
        return 0.0
    d = np.abs(z[:, None] - np.conj(z)[None, :]) / (1.0 + np.abs(z)[:, None])
    return float(d.min(axis=1).max())


def pencil_spectrum(forms: DNForms, tol_real: float = TOL_REAL,
                    tol_singular: float = TOL_SINGULAR) -> PencilReport:
    """Eigenvalues z with t0 + z t1 singular, i.e. the spectrum of -t1^{-1} t0."""
    ratio = forms.t1_condition_ratio
    if ratio <= tol_singular:
        raise DegeneratePencilError(
            f"t1 is numerically singular (sigma_min/sigma_max = {ratio:.3g})",
            sigma_min_t1=forms.sigma_min_t1,
        )
    # QZ on (t0, -t1): the same eigenvalues as -t1^{-1} t0 without forming the
    # inverse, which loses the moderate |z| eigenvalues when t1 is ill-conditioned.
    z, C = la.eig(forms.t0, -forms.t1)
    finite = np.isfinite(z)
    if not finite.all():
        raise DegeneratePencilError(
            f"{int((~finite).sum())} infinite pencil eigenvalues", sigma_min_t1=forms.sigma_min_t1
        )
    order = np.lexsort((z.imag, z.real))
    z, C = z[order], C[:, order]
    nonreal = np.abs(z.imag) > tol_real * (1.0 + np.abs(z))
    iso = []
    for j in np.flatnonzero(nonreal):
        c = C[:, j] / np.linalg.norm(C[:, j])
        iso.append((abs(np.vdot(c, forms.t0 @ c)), abs(np.vdot(c, forms.t1 @ c))))
    scale = float(np.linalg.norm(forms.t0, 2) + np.linalg.norm(forms.t1, 2))
    return PencilReport(
        z_values=z,
        nonreal=nonreal,
        inertia_m=forms.inertia_m,
        sigma_min_t1=forms.sigma_min_t1,
        sigma_max_t1=forms.sigma_max_t1,
        isotropy_residuals=np.array(iso).reshape(-1, 2),
        isotropy_scale=scale,
        conjugation_defect=_conjugation_defect(z),
    )


@dataclass
class MultiplierSet:
    z: np.ndarray
    zeta_plus: np.ndarray  # |zeta_plus| >= 1
    zeta_minus: np.ndarray  # 1 / zeta_plus
    on_unit_circle: np.ndarray
    k3: np.ndarray  # arccos(z) / (2 pi) for unit multipliers, NaN otherwise
    decay_rate: np.ndarray  # |log |zeta||

    def unit_k3(self) -> np.ndarray:
        """Sorted distinct k3 in [0, 1) with exp(2 pi i k3) a unit multiplier."""
        ks = self.k3[self.on_unit_circle]
        both = np.concatenate([ks, np.mod(1.0 - ks, 1.0)])
        both = np.sort(np.mod(both, 1.0))
        if not len(both):
            return both
        keep = np.concatenate([[True], np.diff(both) > 1e-9])
        out = both[keep]
        if len(out) > 1 and out[-1] - out[0] > 1.0 - 1e-9:
            out = out[:-1]
        return out

    def to_dict(self) -> dict:
        def cplx(a):
            return [[float(v.real), float(v.imag)] for v in a]

        return {
            "z": cplx(self.z),
            "zeta": [[p, m] for p, m in zip(cplx(self.zeta_plus), cplx(self.zeta_minus))],
            "on_unit_circle": [bool(b) for b in self.on_unit_circle],
            "k3": [None if np.isnan(k) else float(k) for k in self.k3],
            "decay_rate": [float(r) for r in self.decay_rate],
        }


def multipliers(report, tol_unit: float = TOL_UNIT, tol_real: float = TOL_REAL) -> MultiplierSet:
    """Roots of zeta^2 - 2 z zeta + 1 = 0 for every pencil eigenvalue.

    ``report`` is a PencilReport or an array of z values.
    """
    if isinstance(report, PencilReport):
        z = np.asarray(report.z_values, dtype=complex)
        real = ~report.nonreal
    else:
        z = np.atleast_1d(np.asarray(report, dtype=complex))
        real = np.abs(z.imag) <= tol_real * (1.0 + np.abs(z))
    s = np.sqrt(z * z - 1.0 + 0j)
    zp = np.where(np.abs(z + s) >= np.abs(z - s), z + s, z - s)
    # Real z in [-1, 1]: take the unit-modulus roots without cancellation.
    unit = real & (np.abs(z.real) <= 1.0 + tol_unit)
    zr = np.clip(z.real, -1.0, 1.0)
    theta = np.arccos(zr)
    zp = np.where(unit, np.exp(1j * theta), zp)
    zm = 1.0 / zp
    k3 = np.where(unit, theta / (2.0 * math.pi), np.nan)
    decay = np.where(unit, 0.0, np.abs(np.log(np.abs(zp))))
    return MultiplierSet(z=z, zeta_plus=zp, zeta_minus=zm, on_unit_circle=unit, k3=k3,
                         decay_rate=decay)


def reconstruct_solution(phi: np.ndarray, zeta: complex, omega: np.ndarray | None,
                         grid: TwistedGrid) -> np.ndarray:
    """u = phi + zeta J phi + omega."""
    u = np.asarray(phi, dtype=complex) + zeta * reflect(grid, phi)
    if omega is not None:
        u = u + omega
    return u


def recover_psi(u: np.ndarray, zeta: complex, grid: TwistedGrid) -> np.ndarray:
    """psi = (u - zeta J u) / (1 - zeta^2); inverts the reconstruction up to N."""
    return (u - zeta * reflect(grid, u)) / (1.0 - zeta * zeta)


@dataclass
class PencilRun:
    khat: tuple[float, float]
    lam: float
    subspaces: Subspaces
    forms: DNForms
    report: PencilReport
    multipliers: MultiplierSet

    def to_dict(self) -> dict:
        rep = self.report
        out = {
            "khat": list(self.khat),
            "lambda": self.lam,
            "dim_N": self.subspaces.dim_N,
            "dim_Z": self.subspaces.dim_Z,
            "incompatible_directions": self.subspaces.incompatible_directions,
            "inertia_m": rep.inertia_m,
            "nonreal_count": rep.nonreal_count,
            "bound_2m": rep.bound_2m,
            "bound_ok": rep.bound_ok,
            "sigma_min_t1": rep.sigma_min_t1,
            "sigma_ratio_t1": rep.sigma_min_t1 / rep.sigma_max_t1,
            "t0_hermiticity": self.forms.t0_hermiticity,
            "t1_hermiticity": self.forms.t1_hermiticity,
            "max_isotropy": rep.max_isotropy,
            "conjugation_defect": rep.conjugation_defect,
        }
        out.update(self.multipliers.to_dict())
        return out


def run_pencil(problem: Problem, grid: TwistedGrid, khat, lam: float,
               tol_null: float = TOL_NULL, tol_real: float = TOL_REAL,
               tol_singular: float = TOL_SINGULAR) -> PencilRun:
    """Assemble the slab at (khat, lam) and carry the reduction through to multipliers."""
    slab = assemble_slab(problem, grid, khat, lam)
    sub = build_subspaces(slab, grid, tol_null)
    forms = assemble_dn_forms(slab, sub, grid)
    report = pencil_spectrum(forms, tol_real, tol_singular)
    return PencilRun(
        khat=(float(khat[0]), float(khat[1])),
        lam=float(lam),
        subspaces=sub,
        forms=forms,
        report=report,
        multipliers=multipliers(report, tol_real=tol_real),
    )


# Cross-check against directly computed bands ---------------------------------

def _circular_distance(a: float, b: float) -> float:
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def matching_distance(S1, S2) -> float:
    """Symmetric (Hausdorff) distance between two sets on the circle R/Z."""
    S1, S2 = list(S1), list(S2)
    if not S1 and not S2:
        return 0.0
    if not S1 or not S2:
        return math.inf
    d12 = max(min(_circular_distance(a, b) for b in S2) for a in S1)
    d21 = max(min(_circular_distance(a, b) for a in S1) for b in S2)
    return max(d12, d21)


@dataclass
class CrosscheckReport:
    khat: tuple[float, float]
    lam: float
    S1: np.ndarray
    S2: np.ndarray
    distance: float
    tolerance: float
    flagged: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.distance <= self.tolerance and not self.flagged

    def to_dict(self) -> dict:
        return {
            "khat": list(self.khat),
            "lambda": self.lam,
            "S1_pencil": [float(x) for x in self.S1],
            "S2_bands": [float(x) for x in self.S2],
            "distance": self.distance if math.isfinite(self.distance) else None,
            "tolerance": self.tolerance,
            "flagged": self.flagged,
            "pass": self.passed,
        }


def band_crossings(problem: Problem, grid: TwistedGrid, khat, lam: float, n_bands: int,
                   nk3: int, tol: float = DEFAULT_TOL, seed: int = 0, xtol: float = 1e-7):
    """k3 in [0, 1) where some band lambda_n(khat, k3) equals ``lam``.

    The scan runs over the centred window k3 in [-1/2, 1/2]: the discrete bands
    are periodic in k3 only up to discretization error, and the window nearest
    k3 = 0 is the accurate one.  Sign changes are refined with Brent's method.
    Returns ``(roots mod 1, flagged)``.
    """
    cache = {}

    def bands_at(k3):
        key = float(k3)
        if key not in cache:
            system = assemble_fiber(problem, grid, (khat[0], khat[1], key))
            cache[key] = solve_lowest(system, n_bands, tol=tol, seed=seed)[0]
        return cache[key]

    ks = -0.5 + np.arange(nk3 + 1) / nk3
    vals = np.array([bands_at(k) for k in ks])
    roots, flagged = [], []

    def refine(n, lo, hi):
        try:
            roots.append(so.brentq(lambda k: bands_at(k)[n] - lam, lo, hi, xtol=xtol))
        except (ValueError, RuntimeError, EigensolverError) as exc:
            flagged.append({"band": n + 1, "interval": [float(lo), float(hi)],
                            "error": str(exc)})

    for n in range(n_bands):
        f = vals[:, n] - lam
        for j in range(nk3):
            a, b = f[j], f[j + 1]
            if a == 0.0:
                roots.append(ks[j])
            elif a * b < 0:
                refine(n, ks[j], ks[j + 1])
        # A band may touch lam and turn back between two samples; look for a
        # sign flip at each interior extremum of f that stays on one side.
        for j in range(1, nk3):
            a, c, b = f[j - 1], f[j], f[j + 1]
            s = np.sign(c)
            if s == 0 or np.sign(a) != s or np.sign(b) != s:
                continue
            if not (s * c < s * a and s * c <= s * b):
                continue
            if abs(c) > 2.0 * max(abs(a - c), abs(b - c)):
                continue  # too far from lam for the band to reach it in between
            opt = so.minimize_scalar(lambda k: s * (bands_at(k)[n] - lam),
                                     bounds=(ks[j - 1], ks[j + 1]), method="bounded",
                                     options={"xatol": xtol})
            if opt.fun < 0:
                refine(n, ks[j - 1], opt.x)
                refine(n, opt.x, ks[j + 1])
    if vals[:, -1].min() < lam:
        flagged.append({"band": n_bands, "error": "lambda above the highest computed band"})
    return _distinct(np.mod(np.array(roots), 1.0), 10 * xtol), flagged


def _distinct(values: np.ndarray, tol: float) -> np.ndarray:
    """Sorted values on R/Z with near-duplicates (within ``tol``) merged."""
    values = np.sort(values)
    if len(values) < 2:
        return values
    keep = np.concatenate([[True], np.diff(values) > tol])
    values = values[keep]
    if len(values) > 1 and values[-1] - values[0] > 1.0 - tol:
        values = values[:-1]
    return values


def crosscheck(problem: Problem, slab_grid: TwistedGrid, fiber_grid: TwistedGrid, khat,
               lam: float, n_bands: int = 8, nk3: int = 32, allowance: float = 0.0,
               tol: float = DEFAULT_TOL, seed: int = 0, **pencil_kw) -> CrosscheckReport:
    """Compare k3 from unit pencil multipliers with k3 from fiber band crossings."""
    if slab_grid.shape[:2] != fiber_grid.shape[:2]:
        raise ValueError("slab and fiber grids need matching transverse resolution")
    run = run_pencil(problem, slab_grid, khat, lam, **pencil_kw)
    S1 = run.multipliers.unit_k3()
    S2, flagged = band_crossings(problem, fiber_grid, khat, lam, n_bands, nk3, tol, seed)
    return CrosscheckReport(
        khat=(float(khat[0]), float(khat[1])),
        lam=float(lam),
        S1=S1,
        S2=S2,
        distance=matching_distance(S1, S2),
        tolerance=2.0 / nk3 + allowance,
        flagged=flagged,
    )
