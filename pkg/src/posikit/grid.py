"""Tensor-product collocation grids with lumped quadrature weights.

The grid is the measurement layer: every norm, mass and bilinear form in the
package is defined through the diagonal quadrature

    [u, v] = sum_z  w_z * u(z) * v(z),

taken over the active node set (nodes carrying an essential boundary value
are excluded and get weight zero).  Diagonal weights are chosen deliberately:
pointwise clamping and the discrete inner product then commute exactly, so
the energy identities checked in :mod:`posikit.diagnostics` hold to rounding.

Boundary handling per axis:

* ``periodic``   -- nodes a + i*h on [a, b), h = (b-a)/N, weight h each;
* ``dirichlet``  -- homogeneous essential condition; nodes a + i*h on [a, b],
  the two end nodes are excluded from the active set (weight 0), interior
  weight h;
* ``neumann``    -- natural condition; all N+1 nodes active, trapezoidal
  weights (h/2 at the ends, h inside).

Grids are immutable after construction and safe to share between threads.
Field values are plain ``numpy`` arrays shaped like ``grid.shape``; values
stored at excluded nodes must equal the prescribed boundary value (0 for
every model in this package).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PERIODIC = "periodic"
DIRICHLET = "dirichlet"
NEUMANN = "neumann"

_VALID_BCS = (PERIODIC, DIRICHLET, NEUMANN)


@dataclass(frozen=True, eq=False)
class Grid:
    """Immutable tensor-product grid; build with :func:`build_grid`.

    Equality and hashing are by identity: two grids are "the same grid" only
    if they are the same object, which is what operator/field ownership
    checks need.
    """

    extents: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    bcs: tuple[str, ...]
    axes: tuple[np.ndarray, ...]
    spacings: tuple[float, ...]
    weights: np.ndarray = field(repr=False)   # zero at excluded nodes
    active: np.ndarray = field(repr=False)    # boolean mask of the active set

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def fully_periodic(self) -> bool:
        return all(bc == PERIODIC for bc in self.bcs)

    @property
    def all_active(self) -> bool:
        return bool(self.active.all())

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(ax) for ax in self.axes)

    @property
    def measure(self) -> float:
        """Product of axis lengths (the volume of the domain)."""
        out = 1.0
        for a, b in self.extents:
            out *= b - a
        return out

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays broadcast to ``shape`` (meshgrid, ij indexing)."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def check_field(self, u: np.ndarray) -> np.ndarray:
        u = np.asanyarray(u)
        if u.shape != self.shape:
            raise ValueError(
                f"field shape {u.shape} does not match grid shape {self.shape}"
            )
        return u

    # -- quadrature ---------------------------------------------------------

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """Weighted discrete inner product over the active node set."""
        u = self.check_field(u)
        v = self.check_field(v)
        return float(np.sum(self.weights * u * v))

    def norm(self, u: np.ndarray) -> float:
        """Norm induced by :meth:`inner`."""
        u = self.check_field(u)
        return float(np.sqrt(np.sum(self.weights * u * u)))

    def mass(self, u: np.ndarray) -> float:
        """Inner product of ``u`` against the constant-one field."""
        u = self.check_field(u)
        return float(np.sum(self.weights * u))


def _axis_nodes(a: float, b: float, n: int, bc: str):
    h = (b - a) / n
    if bc == PERIODIC:
        nodes = a + h * np.arange(n)
        w = np.full(n, h)
        act = np.ones(n, dtype=bool)
    else:
        nodes = a + h * np.arange(n + 1)
        w = np.full(n + 1, h)
        if bc == DIRICHLET:
            w[0] = w[-1] = 0.0
            act = np.ones(n + 1, dtype=bool)
            act[0] = act[-1] = False
        else:  # neumann: trapezoidal lumping keeps every node
            w[0] = w[-1] = 0.5 * h
            act = np.ones(n + 1, dtype=bool)
    return nodes, w, act, h


def build_grid(extents, counts, bcs) -> Grid:
    """Build a 1D or 2D grid.

    Parameters
    ----------
    extents : (a, b) or sequence of (a, b)
        Interval per axis.
    counts : int or sequence of int
        Number of subintervals per axis (collocation count for periodic
        axes).  At least 4 per axis.
    bcs : str or sequence of str
        One of ``periodic``, ``dirichlet``, ``neumann`` per axis.
    """
    if np.isscalar(extents[0]):
        extents = (tuple(extents),)
    else:
        extents = tuple(tuple(e) for e in extents)
    if np.isscalar(counts):
        counts = (int(counts),) * len(extents)
    else:
        counts = tuple(int(c) for c in counts)
    if isinstance(bcs, str):
        bcs = (bcs,) * len(extents)
    else:
        bcs = tuple(bcs)

    if not 1 <= len(extents) <= 2:
        raise ValueError("only 1D and 2D grids are supported")
    if not (len(extents) == len(counts) == len(bcs)):
        raise ValueError("extents, counts and bcs must have matching lengths")

    axes, axw, axact, spacings = [], [], [], []
    for (a, b), n, bc in zip(extents, counts, bcs):
        if bc not in _VALID_BCS:
            raise ValueError(f"unknown boundary condition {bc!r}")
        if not b > a:
            raise ValueError(f"axis extent ({a}, {b}) is not positive")
        if n < 4:
            raise ValueError(f"need at least 4 points per axis, got {n}")
        nodes, w, act, h = _axis_nodes(float(a), float(b), n, bc)
        axes.append(nodes)
        axw.append(w)
        axact.append(act)
        spacings.append(h)

    if len(axes) == 1:
        weights = axw[0].copy()
        active = axact[0].copy()
    else:
        weights = np.multiply.outer(axw[0], axw[1])
        active = np.logical_and.outer(axact[0], axact[1])
    weights.setflags(write=False)
    active.setflags(write=False)

    return Grid(
        extents=extents,
        counts=counts,
        bcs=bcs,
        axes=tuple(ax for ax in axes),
        spacings=tuple(spacings),
        weights=weights,
        active=active,
    )


def inner(u: np.ndarray, v: np.ndarray, g: Grid) -> float:
    return g.inner(u, v)


def norm(u: np.ndarray, g: Grid) -> float:
    return g.norm(u)


def mass(u: np.ndarray, g: Grid) -> float:
    return g.mass(u)


# -- field snapshots ---------------------------------------------------------


def write_snapshot(path, u: np.ndarray, g: Grid, t: float) -> None:
    """Write a field as text: header ``nx [ny] t``, then row-major values."""
    u = g.check_field(u)
    dims = " ".join(str(s) for s in g.shape)
    with open(path, "w") as fh:
        fh.write(f"{dims} {t!r}\n")
        for x in np.ravel(u, order="C"):
            fh.write(f"{float(x)!r}\n")


def read_snapshot(path) -> tuple[np.ndarray, float]:
    """Read a snapshot written by :func:`write_snapshot`."""
    with open(path) as fh:
        header = fh.readline().split()
        shape = tuple(int(s) for s in header[:-1])
        t = float(header[-1])
        values = np.array([float(line) for line in fh])
    if values.size != int(np.prod(shape)):
        raise ValueError(f"snapshot {path}: expected {np.prod(shape)} values, "
                         f"got {values.size}")
    return values.reshape(shape, order="C"), t
