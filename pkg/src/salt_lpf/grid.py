"""Staggered grid, boundary conditions and overlapping domain decomposition.

Array layout
------------
Every field lives on a ``(d + 2) x (d + 2)`` array indexed ``[a, b]`` with ``a``
the x index and ``b`` the y index; index 0 and ``d + 1`` are ghost layers.
A :class:`StaggeredState` stores ``u``, ``v`` and ``eta`` stacked along an extra
axis of length 3, optionally preceded by any number of batch axes (an ensemble
is simply a state with a leading particle axis).

Physical positions of array index ``(a, b)`` with ``dx = 1/d``::

    eta  ((a - 0.5) dx, (b - 0.5) dx)    cell centres
    u    ((a - 1.0) dx, (b - 0.5) dx)    west faces
    v    ((a - 0.5) dx, (b - 1.0) dx)    south faces

so ``v[:, 1]`` sits on the southern wall and ``v[:, d + 1]`` on the northern one.

Decomposition boxes, observation locations and overlap rectangles use
*interior* indices ``0 .. d - 1`` (array index minus one). With periodic
east-west wrapping a box may extend below 0 or past ``d - 1``; such x indices
are taken modulo ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

U, V, ETA = 0, 1, 2
FIELD_NAMES = ("u", "v", "eta")


@dataclass(frozen=True)
class GridSpec:
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"grid size must be positive, got {self.d}")

    @property
    def dx(self) -> float:
        return 1.0 / self.d

    @property
    def ghost(self) -> int:
        return 1

    @property
    def extent(self) -> int:
        return self.d + 2

    @property
    def shape(self) -> tuple[int, int, int]:
        return (3, self.extent, self.extent)

    def coords(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) of every array point for ``kind`` in {'u', 'v', 'eta'}."""
        a = np.arange(self.extent, dtype=float)
        offsets = {"u": (1.0, 0.5), "v": (0.5, 1.0), "eta": (0.5, 0.5)}
        if kind not in offsets:
            raise ValueError(f"unknown staggering {kind!r}")
        ox, oy = offsets[kind]
        return np.meshgrid((a - ox) * self.dx, (a - oy) * self.dx, indexing="ij")

    def zeros(self, *batch: int) -> "StaggeredState":
        return StaggeredState(np.zeros(batch + self.shape))


class StaggeredState:
    """(u, v, eta) on the C-grid, stored as one array of shape ``(..., 3, d+2, d+2)``.

    Restricted blocks reuse the class with shape ``(..., 3, nx, ny)``.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=float)
        if data.ndim < 3 or data.shape[-3] != 3:
            raise ValueError(f"expected (..., 3, nx, ny) array, got shape {data.shape}")
        self.data = data

    @classmethod
    def from_fields(cls, u, v, eta) -> "StaggeredState":
        return cls(np.stack(np.broadcast_arrays(u, v, eta), axis=-3))

    @classmethod
    def stack(cls, states: Sequence["StaggeredState"]) -> "StaggeredState":
        return cls(np.stack([s.data for s in states]))

    @property
    def u(self) -> np.ndarray:
        return self.data[..., U, :, :]

    @property
    def v(self) -> np.ndarray:
        return self.data[..., V, :, :]

    @property
    def eta(self) -> np.ndarray:
        return self.data[..., ETA, :, :]

    @property
    def d(self) -> int:
        return self.data.shape[-1] - 2

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-3]

    def __len__(self) -> int:
        if not self.batch_shape:
            raise TypeError("unbatched state has no length")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> "StaggeredState":
        return StaggeredState(self.data[idx])

    def __iter__(self) -> Iterator["StaggeredState"]:
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "StaggeredState":
        return StaggeredState(self.data.copy())

    def interior(self) -> np.ndarray:
        return self.data[..., 1:-1, 1:-1]

    def __repr__(self) -> str:
        return f"StaggeredState(batch={self.batch_shape}, d={self.d})"


def fill_ghosts(data: np.ndarray) -> np.ndarray:
    """In-place version of :func:`apply_boundary_conditions` on a raw state array."""
    u = data[..., U, :, :]
    v = data[..., V, :, :]
    eta = data[..., ETA, :, :]
    d = data.shape[-1] - 2
    # south/north: Neumann for u and eta, Dirichlet (odd mirror) for v
    for f in (u, eta):
        f[..., :, 0] = f[..., :, 1]
        f[..., :, d + 1] = f[..., :, d]
    v[..., :, 1] = 0.0
    v[..., :, d + 1] = 0.0
    v[..., :, 0] = -v[..., :, 2]
    # east/west periodic, full columns so the corner ghosts agree
    data[..., 0, :] = data[..., d, :]
    data[..., d + 1, :] = data[..., 1, :]
    return data


def apply_boundary_conditions(state: StaggeredState) -> StaggeredState:
    """Return a copy with ghost cells set: EW periodic, v = 0 on the SN walls,
    zero normal derivative of u and eta at the SN walls."""
    return StaggeredState(fill_ghosts(state.data.copy()))


# --------------------------------------------------------------------------
# index rectangles and decomposition


@dataclass(frozen=True)
class Rect:
    """Inclusive interior-index rectangle ``[x0, x1] x [y0, y1]``."""

    x0: int
    x1: int
    y0: int
    y1: int

    @property
    def nx(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def ny(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def contains(self, ix, iy, d: int, wrap_ew: bool = True):
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        in_y = (iy >= self.y0) & (iy <= self.y1)
        if wrap_ew:
            in_x = ((ix - self.x0) % d) < self.nx
        else:
            in_x = (ix >= self.x0) & (ix <= self.x1)
        out = in_x & in_y
        return bool(out) if out.ndim == 0 else out

    def x_indices(self, d: int) -> np.ndarray:
        """Interior x indices covered, wrapped into ``0 .. d-1``."""
        return np.arange(self.x0, self.x1 + 1) % d

    def y_indices(self) -> np.ndarray:
        return np.arange(self.y0, self.y1 + 1)


@dataclass(frozen=True)
class Overlap:
    """Overlap rectangle with its owning regions.

    ``owners`` is ``(west, east)`` for EW overlaps, ``(south, north)`` for SN
    overlaps and ``(sw, se, nw, ne)`` for corner overlaps.
    """

    rect: Rect
    owners: tuple[int, ...]


@dataclass(frozen=True)
class Decomposition:
    grid: GridSpec
    n_loc: int
    overlap_halfwidth: int
    wrap_ew: bool
    base: tuple[Rect, ...]
    boxes: tuple[Rect, ...]
    cores: tuple[Rect, ...]
    ew_overlaps: tuple[Overlap, ...]
    sn_overlaps: tuple[Overlap, ...]
    corner_overlaps: tuple[Overlap, ...]
    layout: tuple[tuple[int, int], ...] = field(repr=False)

    @property
    def c(self) -> int:
        return math.isqrt(self.n_loc)

    @property
    def p_ov(self) -> float:
        """Overlap half-width as a fraction of the smallest base square side."""
        return self.overlap_halfwidth / min(b.nx for b in self.base)

    def region_index(self, cx: int, cy: int) -> int:
        return cx * self.c + cy

    def extended_shape(self, j: int) -> tuple[int, int]:
        """Base square grown by the half-width on every side, before wall clamping."""
        if self.c == 1:
            return self.base[j].shape
        h = self.overlap_halfwidth
        return (self.base[j].nx + 2 * h, self.base[j].ny + 2 * h)

    def all_pieces(self) -> list[Rect]:
        return (
            list(self.cores)
            + [o.rect for o in self.ew_overlaps]
            + [o.rect for o in self.sn_overlaps]
            + [o.rect for o in self.corner_overlaps]
        )

    def regions_containing(self, ix, iy) -> list[int]:
        d = self.grid.d
        return [j for j, box in enumerate(self.boxes) if box.contains(ix, iy, d, self.wrap_ew)]


def _split(d: int, c: int) -> list[tuple[int, int]]:
    sizes = [d // c + (1 if i < d % c else 0) for i in range(c)]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return [(int(s), int(s + n - 1)) for s, n in zip(starts, sizes)]


def _axis_layout(d: int, c: int, h: int, wrap: bool):
    """Per-axis base spans, box spans, core spans and overlap strips.

    Strips are ``(start, end, low_col, high_col)``.
    """
    base = _split(d, c)
    if c == 1:
        return base, list(base), list(base), []
    strips = []
    boundaries = range(c) if wrap else range(1, c)
    if h > 0:
        for col in boundaries:
            x = base[col][0]
            strips.append((x - h, x + h - 1, (col - 1) % c, col))
    boxes, cores = [], []
    for col, (s, e) in enumerate(base):
        lo_open = wrap or col > 0
        hi_open = wrap or col < c - 1
        boxes.append((s - h if lo_open else s, e + h if hi_open else e))
        cores.append((s + h if lo_open else s, e - h if hi_open else e))
    return base, boxes, cores, strips


def build_decomposition(
    grid: GridSpec, n_loc: int, overlap_halfwidth: int, wrap_ew: bool = True
) -> Decomposition:
    """Split the interior into ``n_loc = c*c`` overlapping squares.

    Base squares come from splitting each axis into ``c`` nearly equal spans
    (the first ``d mod c`` spans are one point longer). Each base square is
    grown by ``overlap_halfwidth`` points on every side; east-west growth wraps
    around when ``wrap_ew`` is set, growth through the SN walls is dropped.
    Region ``j = cx * c + cy`` with ``cx`` counting eastwards, ``cy`` northwards.
    """
    c = math.isqrt(n_loc)
    if n_loc < 1 or c * c != n_loc:
        raise ValueError(f"n_loc must be a perfect square, got {n_loc}")
    if c > grid.d:
        raise ValueError(f"{c} subregions per axis do not fit a grid of {grid.d}")
    h = int(overlap_halfwidth)
    if h < 0:
        raise ValueError("overlap half-width must be non-negative")
    if c > 1 and 2 * h >= grid.d // c:
        raise ValueError(
            f"overlap half-width {h} too large for subregions of {grid.d // c} points"
        )
    if c == 1:
        h = 0

    xb, xbox, xcore, xstrip = _axis_layout(grid.d, c, h, wrap_ew)
    yb, ybox, ycore, ystrip = _axis_layout(grid.d, c, h, False)

    layout = tuple((cx, cy) for cx in range(c) for cy in range(c))
    j_of = {cc: j for j, cc in enumerate(layout)}

    base = tuple(Rect(*xb[cx], *yb[cy]) for cx, cy in layout)
    boxes = tuple(Rect(*xbox[cx], *ybox[cy]) for cx, cy in layout)
    cores = tuple(Rect(*xcore[cx], *ycore[cy]) for cx, cy in layout)

    ew = tuple(
        Overlap(Rect(s, e, *ycore[cy]), (j_of[(lo, cy)], j_of[(hi, cy)]))
        for (s, e, lo, hi) in xstrip
        for cy in range(c)
    )
    sn = tuple(
        Overlap(Rect(*xcore[cx], s, e), (j_of[(cx, lo)], j_of[(cx, hi)]))
        for cx in range(c)
        for (s, e, lo, hi) in ystrip
    )
    corners = tuple(
        Overlap(
            Rect(xs, xe, ys, ye),
            (j_of[(xlo, ylo)], j_of[(xhi, ylo)], j_of[(xlo, yhi)], j_of[(xhi, yhi)]),
        )
        for (xs, xe, xlo, xhi) in xstrip
        for (ys, ye, ylo, yhi) in ystrip
    )
    return Decomposition(grid, n_loc, h, wrap_ew, base, boxes, cores, ew, sn, corners, layout)


# --------------------------------------------------------------------------
# restriction


def _box_index(box: Rect, d: int) -> tuple[np.ndarray, np.ndarray]:
    if box.y0 < 0 or box.y1 > d - 1 or box.nx < 1 or box.ny < 1:
        raise ValueError(f"box {box} outside interior of size {d}")
    if box.nx > d:
        raise ValueError(f"box {box} wider than the domain")
    xi = box.x_indices(d) + 1
    yi = box.y_indices() + 1
    return xi[:, None], yi[None, :]


def restrict_field(state: StaggeredState, box: Rect) -> StaggeredState:
    """Copy of all three fields over ``box``; block shape ``(..., 3, nx, ny)``."""
    xi, yi = _box_index(box, state.d)
    return StaggeredState(state.data[..., xi, yi])


def restrict_array(arr: np.ndarray, box: Rect, d: int) -> np.ndarray:
    xi, yi = _box_index(box, d)
    return arr[..., xi, yi]


def write_block(state: StaggeredState, box: Rect, block: StaggeredState) -> None:
    """Write ``block`` back over ``box`` in place (inverse of :func:`restrict_field`)."""
    xi, yi = _box_index(box, state.d)
    state.data[..., xi, yi] = block.data


# --------------------------------------------------------------------------
# distances


def region_distance(box: Rect, z, grid: GridSpec, wrap_ew: bool = True):
    """Euclidean distance (physical units) from interior grid point(s) ``z`` to ``box``.

    ``z`` is ``(ix, iy)``, scalars or arrays. Zero inside the box. With
    ``wrap_ew`` the x gap is minimised over periodic images.
    """
    ix = np.asarray(z[0], dtype=float)
    iy = np.asarray(z[1], dtype=float)
    gy = np.maximum(np.maximum(box.y0 - iy, iy - box.y1), 0.0)
    if wrap_ew:
        shifts = grid.d * np.arange(-2, 3)
        xs = ix[..., None] + shifts
        gx = np.maximum(np.maximum(box.x0 - xs, xs - box.x1), 0.0).min(axis=-1)
    else:
        gx = np.maximum(np.maximum(box.x0 - ix, ix - box.x1), 0.0)
    dist = np.hypot(gx, gy) * grid.dx
    return float(dist) if dist.ndim == 0 else dist
