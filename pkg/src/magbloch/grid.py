"""Node grids on the cell (-pi, pi)^3 with flux-twisted identifications.

Nodes sit at ``x_d(i) = -pi + i h_d`` with ``h_d = 2 pi / n_d``.  In ``fiber``
mode all three directions wrap; in ``slab`` mode x3 is open and the nodes
``i3 = 0`` and ``i3 = n3`` form the bottom and top faces.

Crossing the x2 seam picks up the magnetic-translation phase
``exp(-i n0 x1)``, which compensates the jump of the gauge term -b x2 across
the cell.  The x1 and x3 seams carry phase 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.sparse as sp

__all__ = ["TwistedGrid", "GridError", "build_grid", "wrap", "reflect"]

MIN_NODES = 4


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class TwistedGrid:
    mode: Literal["fiber", "slab"]
    shape: tuple[int, int, int]
    flux: int = 0

    def __post_init__(self):
        if self.mode not in ("fiber", "slab"):
            raise GridError(f"mode must be 'fiber' or 'slab', got {self.mode!r}")
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3:
            raise GridError("grid needs three sizes")
        if min(shape) < MIN_NODES:
            raise GridError(f"every grid size must be >= {MIN_NODES}, got {shape}")
        if self.flux is None or int(self.flux) != self.flux or self.flux < 0:
            raise GridError(f"flux must be a nonnegative integer, got {self.flux!r}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "flux", int(self.flux))

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * math.pi / np.asarray(self.shape, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def node_shape(self) -> tuple[int, int, int]:
        n1, n2, n3 = self.shape
        return (n1, n2, n3 + 1) if self.mode == "slab" else (n1, n2, n3)

    @property
    def ndof(self) -> int:
        return int(np.prod(self.node_shape))

    def coordinate(self, axis: int, i) -> np.ndarray:
        return -math.pi + np.asarray(i) * self.spacing[axis]

    def index(self, i1, i2, i3):
        """Linear dof index of in-range nodes (C order)."""
        _, s2, s3 = self.node_shape
        return (np.asarray(i1) * s2 + np.asarray(i2)) * s3 + np.asarray(i3)

    def unravel(self, dof):
        return np.unravel_index(dof, self.node_shape)

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(ndof, 3)`` in dof order."""
        axes = [self.coordinate(d, np.arange(s)) for d, s in enumerate(self.node_shape)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return X.reshape(-1, 3)

    # Slab faces ----------------------------------------------------------
    def _face(self, i3: int) -> np.ndarray:
        if self.mode != "slab":
            raise GridError("faces exist only in slab mode")
        n1, n2, _ = self.shape
        I1, I2 = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
        return self.index(I1.ravel(), I2.ravel(), i3)

    @property
    def bottom(self) -> np.ndarray:
        """Dofs on the face x3 = -pi, ordered by (i1, i2)."""
        return self._face(0)

    @property
    def top(self) -> np.ndarray:
        """Dofs on the face x3 = +pi, ordered by (i1, i2)."""
        return self._face(self.shape[2])

    @property
    def interior(self) -> np.ndarray:
        if self.mode != "slab":
            return np.arange(self.ndof)
        _, _, i3 = self.unravel(np.arange(self.ndof))
        return np.flatnonzero((i3 > 0) & (i3 < self.shape[2]))

    def mass_diagonal(self) -> np.ndarray:
        """Lumped mass: h1 h2 h3 per node, halved on slab faces (trapezoid rule in x3)."""
        m = np.full(self.ndof, self.cell_volume)
        if self.mode == "slab":
            m[self.bottom] *= 0.5
            m[self.top] *= 0.5
        return m

    # Seam handling -------------------------------------------------------
    def canonical(self, i1, i2, i3):
        """Map possibly out-of-range node indices to ``(dof, phase, valid)``.

        x1 and x2 wrap in both modes, x3 wraps in fiber mode only.  The phase
        relates the value at the requested node to the stored value:
        ``v(i1, i2 + q n2, .) = exp(-i q n0 x1(i1)) v(i1, i2, .)``.
        """
        n1, n2, n3 = self.shape
        i1, i2, i3 = (np.asarray(i, dtype=np.int64) for i in (i1, i2, i3))
        j1 = np.mod(i1, n1)
        q2, j2 = np.divmod(i2, n2)
        if self.mode == "fiber":
            j3 = np.mod(i3, n3)
            valid = np.ones(np.broadcast(i1, i2, i3).shape, dtype=bool)
        else:
            j3 = i3
            valid = (i3 >= 0) & (i3 <= n3)
            j3 = np.clip(j3, 0, n3)
        x1 = self.coordinate(0, j1)
        if self.flux:
            phase = np.exp(-1j * self.flux * q2 * x1)
        else:
            phase = np.ones(np.broadcast(j1, q2).shape, dtype=complex)
        dof = self.index(j1, j2, j3)
        return np.broadcast_to(dof, valid.shape), np.broadcast_to(phase, valid.shape), valid

    def reflected_index(self, i3):
        n3 = self.shape[2]
        if self.mode == "slab":
            return n3 - np.asarray(i3)
        return np.mod(n3 - np.asarray(i3), n3)

    def reflection_permutation(self) -> np.ndarray:
        """``perm`` with ``(J v)[j] = v[perm[j]]``."""
        i1, i2, i3 = self.unravel(np.arange(self.ndof))
        return self.index(i1, i2, self.reflected_index(i3))

    def reflection_matrix(self) -> sp.csr_matrix:
        perm = self.reflection_permutation()
        n = self.ndof
        return sp.csr_matrix((np.ones(n), (np.arange(n), perm)), shape=(n, n))


def build_grid(mode: str, n1: int, n2: int, n3: int, n0: int = 0) -> TwistedGrid:
    """Construct a fiber or slab grid with ``n0`` flux quanta per x1-x2 cell face."""
    return TwistedGrid(mode=mode, shape=(n1, n2, n3), flux=n0)


def wrap(grid: TwistedGrid, i1: int, i2: int, i3: int, axis: int, step: int = 1):
    """Step from node ``(i1, i2, i3)`` along ``axis`` (0, 1, 2) by ``step``.

    Returns ``(dof, phase)``, or ``None`` when the step leaves the slab through
    a face (the caller treats that as a boundary).
    """
    node = [i1, i2, i3]
    for d, (i, s) in enumerate(zip(node, grid.node_shape)):
        if not 0 <= i < s:
            raise GridError(f"node {tuple(node)} outside the grid")
    node[axis] += step
    dof, phase, valid = grid.canonical(*node)
    if not bool(valid):
        return None
    return int(dof), complex(phase)


def reflect(grid: TwistedGrid, v: np.ndarray) -> np.ndarray:
    """Apply J, ``(J v)(i1, i2, i3) = v(i1, i2, reflect(i3))``.

    ``v`` may carry extra trailing axes (e.g. a block of column vectors).
    """
    v = np.asarray(v)
    if v.shape[0] != grid.ndof:
        raise GridError(f"expected {grid.ndof} rows, got {v.shape[0]}")
    return v[grid.reflection_permutation()]
