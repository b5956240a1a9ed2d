"""Band functions of the fiber family and flat-band scans."""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .fiber import FiberSystem, assemble_fiber
from .grid import TwistedGrid
from .problem import Problem

__all__ = [
    "EigensolverError",
    "KPath",
    "BandTable",
    "FlatBandReport",
    "solve_lowest",
    "band_structure",
    "flat_band_scan",
    "k_grid",
    "worker_count",
]

log = logging.getLogger(__name__)

DENSE_LIMIT = 1000
DEFAULT_TOL = 1e-8


class EigensolverError(RuntimeError):
    """Iterative eigensolver did not reach the requested residual."""

    def __init__(self, message, eigenvalues=None, residuals=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues
        self.residuals = residuals


def worker_count() -> int:
    env = os.environ.get("MAGBLOCH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _residuals(A, vals, vecs) -> np.ndarray:
    R = A @ vecs - vecs * vals[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(vecs, axis=0)


def _fft_preconditioner(system: FiberSystem, shift: float):
    """Inverse of a shifted periodic Laplacian with the quasimomentum folded in, by FFT.

    Mode ``exp(i j x)`` gets the symbol ``sum_d (2 sin(h_d (j_d + k_d) / 2) / h_d)^2``
    with ``j_d`` wrapped to the centred range, so the preconditioner sees the
    same lowest mode as ``H`` at any k.
    """
    n = system.grid.node_shape
    h = system.grid.spacing
    k = np.asarray(system.k, dtype=float)
    symbol = np.zeros(n)
    for d in range(3):
        j = np.fft.fftfreq(n[d], d=1.0 / n[d])
        lam = (2.0 * np.sin(0.5 * h[d] * (j + k[d])) / h[d]) ** 2
        shape = [1, 1, 1]
        shape[d] = n[d]
        symbol = symbol + lam.reshape(shape)
    inv = 1.0 / (symbol + shift)

    def apply(X):
        X = np.asarray(X)
        cols = X.reshape(n + (-1,))
        Y = np.fft.ifftn(np.fft.fftn(cols, axes=(0, 1, 2)) * inv[..., None], axes=(0, 1, 2))
        return Y.reshape(X.shape)

    return sla.LinearOperator((system.ndof, system.ndof), matvec=apply, matmat=apply,
                              dtype=complex)


def solve_lowest(system: FiberSystem, n_bands: int, tol: float = DEFAULT_TOL, seed: int = 0,
                 maxiter: int = 400):
    """Lowest ``n_bands`` eigenpairs of ``(H, M)``.

    Returns ``(values, vectors, residuals)``; vectors are M-orthonormal and
    residuals are ``||M^{-1/2}(H v - lam M v)|| / ||v||_M``.  Small systems
    are solved densely; larger ones with preconditioned LOBPCG from a seeded
    random start block.
    """
    n = system.ndof
    if not 0 < n_bands < n:
        raise ValueError(f"n_bands must be in (0, {n}), got {n_bands}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = system.scaled()
    scale = 1.0 / np.sqrt(system.mass)

    if n <= DENSE_LIMIT:
        vals, Y = la.eigh(A.toarray(), subset_by_index=[0, n_bands - 1])
    else:
        vals, Y = _lobpcg(system, A, n_bands, tol, seed, maxiter)

    res = _residuals(A, vals, Y)
    if np.any(res > tol) or not np.all(np.isfinite(vals)):
        raise EigensolverError(
            f"eigensolver stopped with residuals up to {res.max():.3g} (tol {tol:.3g})",
            eigenvalues=vals, residuals=res,
        )
    Y = Y / np.linalg.norm(Y, axis=0)
    return vals, Y * scale[:, None], res


def _lobpcg(system, A, n_bands, tol, seed, maxiter):
    rng = np.random.default_rng(seed)
    n = system.ndof
    block = n_bands + max(1, min(3, n_bands // 2))
    X = rng.standard_normal((n, block)) + 1j * rng.standard_normal((n, block))
    shift = 1.0 + max(0.0, -system.potential_floor)
    T = _fft_preconditioner(system, shift)
    # lobpcg's tolerance is on the unnormalized residual; aim below the target.
    vals = None
    for _ in range(3):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            vals, Y = sla.lobpcg(A, X, M=T, tol=0.2 * tol, maxiter=maxiter, largest=False)
        order = np.argsort(vals)
        vals, Y = vals[order], Y[:, order]
        res = _residuals(A, vals[:n_bands], Y[:, :n_bands])
        if np.all(res <= tol):
            break
        X = Y
    if np.any(res > tol):
        log.info("lobpcg residual %.3g above tol, falling back to shift-invert", res.max())
        sigma = system.potential_floor - 1.0
        v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        vals, Y = sla.eigsh(A, k=n_bands, sigma=sigma, which="LM", v0=v0, tol=tol * 1e-2)
        order = np.argsort(vals)
        return vals[order], Y[:, order]
    return vals[:n_bands], Y[:, :n_bands]


@dataclass(frozen=True)
class KPath:
    """Piecewise-linear path through the dual cell.

    Each segment contributes ``samples`` points, its start included and its end
    excluded.  A closed path returns to the first waypoint, so it has
    ``len(waypoints) * samples`` points; an open path appends the last
    waypoint and has ``(len(waypoints) - 1) * samples + 1``.
    """

    waypoints: tuple[tuple[float, float, float], ...]
    samples: int = 10
    closed: bool = True

    def __post_init__(self):
        wps = tuple(tuple(float(c) for c in w) for w in self.waypoints)
        if len(wps) < 2:
            raise ValueError("a k-path needs at least two waypoints")
        if any(len(w) != 3 for w in wps):
            raise ValueError("waypoints must be 3-vectors")
        if self.samples < 2:
            raise ValueError("samples per segment must be >= 2")
        object.__setattr__(self, "waypoints", wps)

    def points(self) -> np.ndarray:
        wps = np.asarray(self.waypoints)
        ends = np.vstack([wps[1:], wps[:1]]) if self.closed else wps[1:]
        t = np.arange(self.samples)[:, None] / self.samples
        pts = [a[None, :] * (1 - t) + b[None, :] * t for a, b in zip(wps, ends)]
        if not self.closed:
            pts.append(wps[-1:])
        return np.concatenate(pts, axis=0)


def k_grid(size: int) -> np.ndarray:
    """Uniform ``size**3`` grid on [0, 1)^3, C order."""
    t = np.arange(size) / size
    K = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return K.reshape(-1, 3)


@dataclass
class BandTable:
    kpoints: np.ndarray
    values: np.ndarray  # (n_bands, n_k), NaN where a k-point failed
    residuals: np.ndarray
    errors: dict = field(default_factory=dict)

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    def arc_length(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.kpoints, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def rows(self):
        """``(k1, k2, k3, band_index, lambda, residual)`` in k-major order."""
        for j, k in enumerate(self.kpoints):
            for n in range(self.n_bands):
                yield (k[0], k[1], k[2], n + 1, self.values[n, j], self.residuals[n, j])


def _solve_k(problem, grid, k, n_bands, tol, seed):
    system = assemble_fiber(problem, grid, k)
    vals, _, res = solve_lowest(system, n_bands, tol=tol, seed=seed)
    return vals, res


def band_structure(problem: Problem, grid: TwistedGrid, path, n_bands: int,
                   tol: float = DEFAULT_TOL, seed: int = 0, workers: int | None = None
                   ) -> BandTable:
    """Lowest bands at every point of ``path`` (a KPath or an array of k-points).

    Solver failures are recorded per k-point in ``BandTable.errors`` and the
    scan continues.
    """
    if grid.mode != "fiber":
        raise ValueError("band_structure needs a fiber-mode grid")
    kpts = path.points() if isinstance(path, KPath) else np.atleast_2d(np.asarray(path, float))
    values = np.full((n_bands, len(kpts)), np.nan)
    residuals = np.full((n_bands, len(kpts)), np.nan)
    errors = {}
    workers = workers or worker_count()

    def task(j):
        try:
            return j, _solve_k(problem, grid, kpts[j], n_bands, tol, seed), None
        except EigensolverError as exc:
            return j, None, exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, range(len(kpts))))
    else:
        results = [task(j) for j in range(len(kpts))]
    for j, out, exc in results:
        if exc is not None:
            errors[j] = str(exc)
            if exc.eigenvalues is not None:
                values[:, j] = np.asarray(exc.eigenvalues)[:n_bands]
                residuals[:, j] = np.asarray(exc.residuals)[:n_bands]
            continue
        values[:, j], residuals[:, j] = out
    return BandTable(kpoints=kpts, values=values, residuals=residuals, errors=errors)


@dataclass
class FlatBandReport:
    oscillations: np.ndarray
    band_min: np.ndarray
    band_max: np.ndarray
    grid_shape: tuple[int, int, int]
    kgrid_size: int
    tol: float
    failed_kpoints: int = 0

    @property
    def min_oscillation(self) -> float:
        return float(np.min(self.oscillations))

    def to_dict(self) -> dict:
        return {
            "oscillations": [float(x) for x in self.oscillations],
            "band_min": [float(x) for x in self.band_min],
            "band_max": [float(x) for x in self.band_max],
            "min_oscillation": self.min_oscillation,
            "grid": list(self.grid_shape),
            "kgrid_size": self.kgrid_size,
            "solver_tol": self.tol,
            "failed_kpoints": self.failed_kpoints,
        }


def flat_band_scan(problem: Problem, grid: TwistedGrid, kgrid_size: int, n_bands: int,
                   tol: float = DEFAULT_TOL, seed: int = 0, workers: int | None = None
                   ) -> FlatBandReport:
    """Oscillation max_k - min_k of each of the lowest bands over a k-grid on [0, 1)^3."""
    table = band_structure(problem, grid, k_grid(kgrid_size), n_bands, tol, seed, workers)
    ok = ~np.isnan(table.values).any(axis=0)
    vals = table.values[:, ok] if ok.any() else table.values
    lo, hi = np.nanmin(vals, axis=1), np.nanmax(vals, axis=1)
    return FlatBandReport(
        oscillations=hi - lo,
        band_min=lo,
        band_max=hi,
        grid_shape=grid.shape,
        kgrid_size=kgrid_size,
        tol=tol,
        failed_kpoints=int((~ok).sum()),
    )
