"""Discrete quadratic forms h(k) and h0 on twisted grids.

Every grid cell contributes a sum of nonnegative terms.  For a cell with
center x_c and corners p + tau, tau in {0, 1}^3, and for each choice of base
corner sigma the covariant gradient is

    w_d = -i (v(edge_d(sigma) end) - v(edge_d(sigma) start)) / h_d + (k_d - A_d(x_c)) vbar,

where edge_d(sigma) is the edge of the cell in direction d through corner
sigma and vbar is the mean of the eight corner values.  The cell term is

    vol * [ mean_sigma <G(x_c) w, w> + V(x_c) mean_tau |v(p + tau)|^2 ].

Averaging over base corners makes the stencil invariant under every
coordinate reflection of the cell, and the potential term lumps to the
diagonal mass, so a constant added to V shifts the spectrum exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .grid import TwistedGrid
from .problem import Problem

__all__ = [
    "FiberSystem",
    "AssemblyError",
    "assemble_fiber",
    "assemble_slab",
    "GelfandSample",
    "gelfand_transform",
    "dump_coo",
]

# Corner offsets in C order: tau = (t1, t2, t3), index 4 t1 + 2 t2 + t3.
CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


class AssemblyError(ValueError):
    pass


def _difference_blocks(h: np.ndarray) -> np.ndarray:
    """D[sigma, d, :] maps the 8 corner values to the d-difference on edge_d(sigma)."""
    D = np.zeros((8, 3, 8))
    for s, sigma in enumerate(CORNERS):
        for d in range(3):
            start = sigma.copy()
            start[d] = 0
            end = start.copy()
            end[d] = 1
            D[s, d, 4 * end[0] + 2 * end[1] + end[2]] += 1.0 / h[d]
            D[s, d, 4 * start[0] + 2 * start[1] + start[2]] -= 1.0 / h[d]
    return D


def _stencil_tables(h: np.ndarray):
    D = _difference_blocks(h)
    # S[d, e] = mean_sigma D_sigma[d]^T D_sigma[e]
    S = np.einsum("sdi,sej->deij", D, D) / 8.0
    Dbar = D.mean(axis=0)
    return S, Dbar


@dataclass(frozen=True)
class FiberSystem:
    """Assembled form ``H`` (sparse Hermitian) with diagonal mass ``M``."""

    H: sp.csr_matrix
    mass: np.ndarray
    grid: TwistedGrid
    k: tuple[float, float, float]
    lambda_shift: float = 0.0
    potential_floor: float = 0.0
    meta: Mapping = field(default_factory=dict)

    @property
    def M(self) -> sp.dia_matrix:
        return sp.diags(self.mass)

    @property
    def ndof(self) -> int:
        return self.H.shape[0]

    def scaled(self) -> sp.csr_matrix:
        """M^{-1/2} H M^{-1/2}, the equivalent standard Hermitian matrix."""
        s = 1.0 / np.sqrt(self.mass)
        return sp.csr_matrix(self.H.multiply(s[:, None]).multiply(s[None, :]))

    def hermiticity_defect(self) -> float:
        """max|H - H*| / max|H|."""
        diff = self.H - self.H.conj().T
        scale = abs(self.H).max()
        return float(abs(diff).max() / scale) if diff.nnz else 0.0

    def form(self, u: np.ndarray, v: np.ndarray | None = None) -> complex:
        """h[u, v] = v^* H u."""
        v = u if v is None else v
        return complex(np.vdot(v, self.H @ u))

    def lower_bound_shift(self) -> float:
        """Shift gamma >= 0 with H + gamma M positive semidefinite (from the potential floor)."""
        return max(0.0, -self.potential_floor)


def _assemble(problem: Problem, grid: TwistedGrid, k) -> sp.csr_matrix:
    if problem.flux_integer is None:
        raise AssemblyError("field strength is not flux-quantized")
    if problem.flux_integer != grid.flux:
        raise AssemblyError(
            f"problem flux {problem.flux_integer} does not match grid flux {grid.flux}"
        )
    n1, n2, n3 = grid.shape
    h = grid.spacing
    vol = grid.cell_volume
    S, Dbar = _stencil_tables(h)

    I1, I2, I3 = np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3), indexing="ij")
    base = np.stack([I1.ravel(), I2.ravel(), I3.ravel()], axis=-1)
    ncell = base.shape[0]
    centers = -math.pi + (base + 0.5) * h

    G = problem.eval_G(centers)
    q = np.asarray(k, dtype=float)[None, :] - problem.eval_A(centers)
    V = problem.eval_V(centers)

    # Local 8x8 matrices.
    K = np.einsum("cde,deij->cij", G, S)
    Gq = np.einsum("cde,ce->cd", G, q)
    r = Gq @ Dbar  # (ncell, 8)
    s = np.einsum("cd,cd->c", q, Gq)
    ones = np.full(8, 1.0 / 8.0)
    L = K.astype(complex)
    L += 1j * r[:, :, None] * ones[None, None, :]
    L -= 1j * ones[None, :, None] * r[:, None, :]
    L += s[:, None, None] * (ones[:, None] * ones[None, :])[None]
    L[:, np.arange(8), np.arange(8)] += (V / 8.0)[:, None]
    L *= vol

    corner_nodes = base[:, None, :] + CORNERS[None, :, :]
    dof, phase, _ = grid.canonical(
        corner_nodes[..., 0], corner_nodes[..., 1], corner_nodes[..., 2]
    )
    # v_local[tau] = phase[tau] * v[dof[tau]], so H[dof_i, dof_j] += conj(ph_i) L_ij ph_j.
    vals = np.conj(phase)[:, :, None] * L * phase[:, None, :]
    rows = np.broadcast_to(dof[:, :, None], (ncell, 8, 8))
    cols = np.broadcast_to(dof[:, None, :], (ncell, 8, 8))
    H = sp.coo_matrix(
        (vals.ravel(), (rows.ravel(), cols.ravel())), shape=(grid.ndof, grid.ndof)
    ).tocsr()
    H.sum_duplicates()
    return H


def assemble_fiber(problem: Problem, grid: TwistedGrid, k) -> FiberSystem:
    """Assemble h(k) for real quasimomentum ``k`` on a fiber-mode grid."""
    if grid.mode != "fiber":
        raise AssemblyError("assemble_fiber needs a fiber-mode grid")
    k = tuple(float(x) for x in k)
    if len(k) != 3:
        raise AssemblyError("k must have three components")
    H = _assemble(problem, grid, k)
    return FiberSystem(
        H=H,
        mass=grid.mass_diagonal(),
        grid=grid,
        k=k,
        lambda_shift=problem.lambda_shift,
        potential_floor=problem.potential_floor(),
    )


def assemble_slab(problem: Problem, grid: TwistedGrid, khat=(0.0, 0.0), lam: float = 0.0
                  ) -> FiberSystem:
    """Assemble h0 for the potentials A - (khat, 0) and V - lam on a slab grid."""
    if grid.mode != "slab":
        raise AssemblyError("assemble_slab needs a slab-mode grid")
    shifted = problem.with_shifts(khat, lam)
    H = _assemble(shifted, grid, (0.0, 0.0, 0.0))
    return FiberSystem(
        H=H,
        mass=grid.mass_diagonal(),
        grid=grid,
        k=(float(khat[0]), float(khat[1]), 0.0),
        lambda_shift=float(lam),
        potential_floor=shifted.potential_floor(),
    )


def dump_coo(system: FiberSystem, path) -> None:
    """Write ``H`` as ``row col re im`` lines (0-based indices)."""
    coo = system.H.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"# {system.ndof} {system.ndof} {coo.nnz}\n")
        for i in order:
            v = coo.data[i]
            fh.write(f"{coo.row[i]} {coo.col[i]} {v.real:.17e} {v.imag:.17e}\n")


# Gelfand transform ---------------------------------------------------------

@dataclass(frozen=True)
class GelfandSample:
    """Samples of f on the closed node lattice of each cell ``Omega + 2 pi n``.

    ``values[n]`` has shape ``(n1 + 1, n2 + 1, n3 + 1)`` and holds
    ``f(x + 2 pi n)`` at the nodes ``x_d(i) = -pi + i h_d``, i = 0..n_d.
    """

    shape: tuple[int, int, int]
    flux: int
    values: Mapping[tuple[int, int, int], np.ndarray]

    @classmethod
    def from_function(cls, f, support, shape, flux: int = 0) -> GelfandSample:
        shape = tuple(int(s) for s in shape)
        axes = [-math.pi + 2.0 * math.pi * np.arange(s + 1) / s for s in shape]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        values = {}
        for n in support:
            n = tuple(int(c) for c in n)
            values[n] = np.asarray(f(X + 2.0 * math.pi * np.asarray(n, dtype=float)), dtype=complex)
        return cls(shape=shape, flux=flux, values=values)

    def node_axes(self):
        return [-math.pi + 2.0 * math.pi * np.arange(s + 1) / s for s in self.shape]

    def norm_squared(self) -> float:
        """Riemann sum of |f|^2 over the periodic node set of every support cell."""
        vol = float(np.prod([2.0 * math.pi / s for s in self.shape]))
        return float(sum(np.sum(np.abs(v[:-1, :-1, :-1]) ** 2) for v in self.values.values()) * vol)


def gelfand_transform(sample: GelfandSample, k) -> np.ndarray:
    """Finite-sum transform on the closed node lattice.

    ``(U f)(x, k) = sum_n exp(-i k.(x + 2 pi n)) exp(i 2 pi b n2 x1) f(x + 2 pi n)``
    with ``2 pi b = n0``.  The result has the shape of one cell of samples.
    """
    k = np.asarray(k, dtype=float)
    x1, x2, x3 = np.meshgrid(*sample.node_axes(), indexing="ij")
    X = np.stack([x1, x2, x3], axis=-1)
    out = np.zeros(x1.shape, dtype=complex)
    for n, fvals in sample.values.items():
        y = X + 2.0 * math.pi * np.asarray(n, dtype=float)
        factor = np.exp(-1j * (y @ k) + 1j * sample.flux * n[1] * x1)
        out += factor * fvals
    return out
