"""Graded quadtree partitions of the unit square.

A partition is a set of dyadic square cells with pairwise disjoint
interiors whose closures cover [0,1]^2.  Cells are addressed by
``(level, i, j)`` with side length ``2**-level``; iteration order is the
lexicographic order of these keys, which keeps every downstream
computation reproducible.

Refinement replaces marked cells by their four children and then closes
the mesh so that edge-adjacent active cells differ by at most one level
(1-level grading).  Edges at a level interface are the finer side's
facets; a coarse neighbour's facet is represented by two half-edges so
jump integrals see a single polynomial trace per side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

__all__ = [
    "Cell",
    "Edge",
    "Partition",
    "ShapeReport",
    "uniform_partition",
    "refine",
    "edges",
    "support_extension",
    "shape_report",
]

# classification of a dyadic cell relative to a partition
ACTIVE = "active"        # the cell itself is active
INSIDE = "inside"        # strictly contained in an active cell
REFINED = "refined"      # strictly subdivided into finer active cells


@dataclass(frozen=True, order=True)
class Cell:
    """Dyadic square cell ``[i, i+1] x [j, j+1]`` scaled by ``2**-level``."""

    level: int
    i: int
    j: int

    def __post_init__(self):
        n = 1 << self.level
        if not (0 <= self.i < n and 0 <= self.j < n):
            raise ValueError(f"cell index {self} outside the unit square")

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        s = self.side
        return (self.i * s, (self.i + 1) * s, self.j * s, (self.j + 1) * s)

    @property
    def center(self) -> tuple[float, float]:
        s = self.side
        return ((self.i + 0.5) * s, (self.j + 0.5) * s)

    def children(self) -> tuple["Cell", "Cell", "Cell", "Cell"]:
        L, i, j = self.level + 1, 2 * self.i, 2 * self.j
        return (Cell(L, i, j), Cell(L, i + 1, j),
                Cell(L, i, j + 1), Cell(L, i + 1, j + 1))

    def parent(self) -> "Cell":
        if self.level == 0:
            raise ValueError("root cell has no parent")
        return Cell(self.level - 1, self.i >> 1, self.j >> 1)

    def ancestor(self, level: int) -> "Cell":
        """The containing dyadic cell at a coarser (or equal) level."""
        if level > self.level:
            raise ValueError("ancestor level must not exceed the cell level")
        shift = self.level - level
        return Cell(level, self.i >> shift, self.j >> shift)

    def contains(self, x: float, y: float) -> bool:
        x0, x1, y0, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(frozen=True)
class Edge:
    """Axis-aligned facet segment of an active cell.

    ``axis`` is the direction of the normal (0: vertical edge, normal
    along x; 1: horizontal edge, normal along y).  ``level`` is the
    level of the finer owner, so the length is ``2**-level``.  Interior
    edges carry both owners with ``plus`` the owner of lower cell key;
    boundary edges carry the single owner in ``plus`` and an outward
    unit normal.
    """

    kind: str                  # "interior" | "boundary"
    axis: int                  # 0 or 1
    level: int
    fixed: float               # coordinate along `axis`
    lo: float                  # start of the tangent interval
    plus: Cell
    minus: Cell | None
    normal: tuple[float, float]

    @property
    def length(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def key(self) -> tuple:
        return (self.axis, self.level,
                round(self.fixed * (1 << self.level)),
                round(self.lo * (1 << self.level)))


@dataclass(frozen=True)
class ShapeReport:
    """Worst-case mesh regularity figures for a partition/space pair."""

    max_edge_ratio: float       # max h_tau / h_sigma over cells and their facets
    max_extension_ratio: float  # max diam(omega_tau) / h_tau
    max_overlap_count: int      # max number of cells in any omega_tau


class Partition:
    """Immutable graded quadtree partition of the unit square."""

    def __init__(self, cells: Iterable[Cell], generation: int = 0,
                 validate: bool = True):
        self.cells: tuple[Cell, ...] = tuple(sorted(cells))
        self.generation = generation
        self._cell_set = frozenset(self.cells)
        if not self.cells:
            raise ValueError("partition needs at least one cell")
        self.max_level = max(c.level for c in self.cells)
        if validate:
            self._validate()

    # -- basic queries ------------------------------------------------

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[Cell]:
        return iter(self.cells)

    def __contains__(self, c: Cell) -> bool:
        return c in self._cell_set

    def __eq__(self, other) -> bool:
        return isinstance(other, Partition) and self.cells == other.cells

    def __hash__(self) -> int:
        return hash(self.cells)

    def classify(self, c: Cell) -> str:
        """Relation of an arbitrary dyadic cell to the partition."""
        if c in self._cell_set:
            return ACTIVE
        probe = c
        while probe.level > 0:
            probe = probe.parent()
            if probe in self._cell_set:
                return INSIDE
        return REFINED

    def find_cell(self, x: float, y: float) -> Cell:
        """Active cell containing the point (half-open convention)."""
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"point ({x}, {y}) outside the unit square")
        c = Cell(0, 0, 0)
        while c not in self._cell_set:
            if c.level > self.max_level:
                raise RuntimeError("point location failed; broken partition")
            half = c.side / 2.0
            x0, _, y0, _ = c.bounds
            ci = 2 * c.i + (1 if x >= x0 + half else 0)
            cj = 2 * c.j + (1 if y >= y0 + half else 0)
            n = 1 << (c.level + 1)
            c = Cell(c.level + 1, min(ci, n - 1), min(cj, n - 1))
        return c

    def cells_in_box(self, x0: float, x1: float, y0: float, y1: float) -> list[Cell]:
        """Active cells whose interior overlaps the open box (sorted)."""
        found: list[Cell] = []

        def descend(c: Cell):
            cx0, cx1, cy0, cy1 = c.bounds
            if cx1 <= x0 or cx0 >= x1 or cy1 <= y0 or cy0 >= y1:
                return
            state = self.classify(c)
            if state == ACTIVE:
                found.append(c)
            elif state == REFINED:
                for ch in c.children():
                    descend(ch)
            # INSIDE cannot occur when descending from the root

        descend(Cell(0, 0, 0))
        return sorted(found)

    def neighbors_across(self, c: Cell, direction: str) -> list[Cell]:
        """Active cells sharing the given facet of ``c`` (may be empty on G)."""
        n = 1 << c.level
        if direction == "left":
            if c.i == 0:
                return []
            probe = Cell(c.level, c.i - 1, c.j)
        elif direction == "right":
            if c.i == n - 1:
                return []
            probe = Cell(c.level, c.i + 1, c.j)
        elif direction == "down":
            if c.j == 0:
                return []
            probe = Cell(c.level, c.i, c.j - 1)
        elif direction == "up":
            if c.j == n - 1:
                return []
            probe = Cell(c.level, c.i, c.j + 1)
        else:
            raise ValueError(f"unknown direction {direction!r}")
        return self._resolve_neighbor(probe, direction)

    def _resolve_neighbor(self, probe: Cell, direction: str) -> list[Cell]:
        state = self.classify(probe)
        if state == ACTIVE:
            return [probe]
        if state == INSIDE:
            anc = probe
            while anc.level > 0:
                anc = anc.parent()
                if anc in self._cell_set:
                    return [anc]
            raise RuntimeError("inconsistent partition")
        # refined: recurse into the two children adjacent to the shared facet
        kids = probe.children()
        if direction == "left":       # facet is probe's right side
            touching = [k for k in kids if k.i == 2 * probe.i + 1]
        elif direction == "right":
            touching = [k for k in kids if k.i == 2 * probe.i]
        elif direction == "down":
            touching = [k for k in kids if k.j == 2 * probe.j + 1]
        else:
            touching = [k for k in kids if k.j == 2 * probe.j]
        out: list[Cell] = []
        for k in touching:
            out.extend(self._resolve_neighbor(k, direction))
        return out

    # -- invariants ---------------------------------------------------

    def _validate(self):
        # disjointness: no cell may have an active strict ancestor
        for c in self.cells:
            probe = c
            while probe.level > 0:
                probe = probe.parent()
                if probe in self._cell_set:
                    raise ValueError(f"overlapping cells: {c} inside {probe}")
        # exact cover: dyadic areas sum to 1 (integer arithmetic)
        scale = self.max_level
        total = sum(4 ** (scale - c.level) for c in self.cells)
        if total != 4 ** scale:
            raise ValueError("cells do not cover the unit square")
        # 1-level grading across edges
        for c in self.cells:
            for direction in ("left", "right", "down", "up"):
                for nb in self.neighbors_across(c, direction):
                    if abs(nb.level - c.level) > 1:
                        raise ValueError(
                            f"grading violated between {c} and {nb}")

    # -- plain-text dump ---------------------------------------------

    def dump(self) -> str:
        """One ``level i j`` record per active cell, deterministic order."""
        return "".join(f"{c.level} {c.i} {c.j}\n" for c in self.cells)

    @staticmethod
    def from_dump(text: str, generation: int = 0) -> "Partition":
        cells = []
        for line in text.strip().splitlines():
            level, i, j = (int(tok) for tok in line.split())
            cells.append(Cell(level, i, j))
        return Partition(cells, generation=generation)


def uniform_partition(levels: int) -> Partition:
    """Uniform dyadic partition with ``4**levels`` cells."""
    if levels < 0:
        raise ValueError("levels must be non-negative")
    n = 1 << levels
    return Partition(
        (Cell(levels, i, j) for i in range(n) for j in range(n)),
        validate=False,
    )


def refine(p: Partition, marked: Iterable[Cell]) -> Partition:
    """Replace marked cells by their children and restore 1-level grading.

    Raises if a marked cell is not active (stale marking).  An empty
    marked set returns ``p`` unchanged.
    """
    marked = sorted(set(marked))
    if not marked:
        return p
    for m in marked:
        if m not in p:
            raise ValueError(f"stale marking: {m} is not an active cell")

    active = set(p.cells)

    def split(c: Cell):
        active.remove(c)
        active.update(c.children())
        # closure: any active neighbour two levels coarser than the new
        # children must be split as well
        for direction in ("left", "right", "down", "up"):
            for nb in _neighbors_in_set(active, c, direction):
                if nb.level < c.level:
                    split(nb)

    for m in marked:
        if m in active:  # may already be gone via closure
            split(m)
    return Partition(active, generation=p.generation + 1)


def _neighbors_in_set(active: set[Cell], c: Cell, direction: str) -> list[Cell]:
    """Active cells adjacent to the facet of ``c`` in a transient cell set."""
    n = 1 << c.level
    if direction == "left":
        if c.i == 0:
            return []
        probe = Cell(c.level, c.i - 1, c.j)
    elif direction == "right":
        if c.i == n - 1:
            return []
        probe = Cell(c.level, c.i + 1, c.j)
    elif direction == "down":
        if c.j == 0:
            return []
        probe = Cell(c.level, c.i, c.j - 1)
    else:
        if c.j == n - 1:
            return []
        probe = Cell(c.level, c.i, c.j + 1)

    def resolve(cell: Cell) -> list[Cell]:
        if cell in active:
            return [cell]
        anc = cell
        while anc.level > 0:
            anc = anc.parent()
            if anc in active:
                return [anc]
        kids = cell.children()
        if direction == "left":
            touching = [k for k in kids if k.i % 2 == 1]
        elif direction == "right":
            touching = [k for k in kids if k.i % 2 == 0]
        elif direction == "down":
            touching = [k for k in kids if k.j % 2 == 1]
        else:
            touching = [k for k in kids if k.j % 2 == 0]
        out: list[Cell] = []
        for k in touching:
            out.extend(resolve(k))
        return out

    return resolve(probe)


def edges(p: Partition) -> tuple[list[Edge], list[Edge]]:
    """Interior and boundary edge lists in deterministic order.

    At a level interface the edges are the finer cells' facets, each
    owned by the fine cell and the coarse neighbour.  Boundary edges are
    exactly the facets of active cells on the domain boundary.
    """
    interior: dict[tuple, Edge] = {}
    boundary: list[Edge] = []

    for c in p.cells:
        x0, x1, y0, y1 = c.bounds
        facets = (
            ("left", 0, x0, y0, (-1.0, 0.0)),
            ("right", 0, x1, y0, (1.0, 0.0)),
            ("down", 1, y0, x0, (0.0, -1.0)),
            ("up", 1, y1, x0, (0.0, 1.0)),
        )
        for direction, axis, fixed, lo, outward in facets:
            nbs = p.neighbors_across(c, direction)
            if not nbs:
                boundary.append(Edge("boundary", axis, c.level, fixed, lo,
                                     plus=c, minus=None, normal=outward))
                continue
            for nb in nbs:
                if nb.level > c.level:
                    continue  # finer neighbour registers the half-edges
                if nb.level == c.level:
                    fine = c  # same level: canonical via key dedup
                else:
                    fine = c  # c is the finer side
                plus, minus = sorted(
                    (c, nb), key=lambda q: (q.level, q.i, q.j))
                e = Edge("interior", axis, fine.level, fixed, lo,
                         plus=plus, minus=minus,
                         normal=(1.0, 0.0) if axis == 0 else (0.0, 1.0))
                interior.setdefault(e.key, e)

    return sorted(interior.values(), key=lambda e: e.key), \
        sorted(boundary, key=lambda e: e.key)


def support_extension(p: Partition, space_handle, tau: Cell) -> set[Cell]:
    """Cells met by supports of basis functions whose support meets tau."""
    if tau not in p:
        raise ValueError(f"{tau} is not an active cell")
    tx0, tx1, ty0, ty1 = tau.bounds
    boxes = []
    for fn in space_handle.active:
        bx0, bx1, by0, by1 = space_handle.support_box(fn)
        if bx0 < tx1 and bx1 > tx0 and by0 < ty1 and by1 > ty0:
            boxes.append((bx0, bx1, by0, by1))
    if not boxes:
        return {tau}
    hx0 = min(b[0] for b in boxes)
    hx1 = max(b[1] for b in boxes)
    hy0 = min(b[2] for b in boxes)
    hy1 = max(b[3] for b in boxes)
    out: set[Cell] = set()
    for c in p.cells_in_box(hx0, hx1, hy0, hy1):
        cx0, cx1, cy0, cy1 = c.bounds
        for bx0, bx1, by0, by1 in boxes:
            if bx0 < cx1 and bx1 > cx0 and by0 < cy1 and by1 > cy0:
                out.add(c)
                break
    out.add(tau)
    return out


def shape_report(p: Partition, space_handle) -> ShapeReport:
    """Exact regularity maxima over all cells of the partition."""
    interior, bdry = edges(p)
    by_cell: dict[Cell, list[Edge]] = {c: [] for c in p.cells}
    for e in interior:
        by_cell[e.plus].append(e)
        by_cell[e.minus].append(e)
    for e in bdry:
        by_cell[e.plus].append(e)

    max_edge_ratio = 0.0
    max_ext = 0.0
    max_overlap = 0
    for c in p.cells:
        for e in by_cell[c]:
            max_edge_ratio = max(max_edge_ratio, c.side / e.length)
        ext = support_extension(p, space_handle, c)
        max_overlap = max(max_overlap, len(ext))
        corners = []
        for q in ext:
            qx0, qx1, qy0, qy1 = q.bounds
            corners.extend(((qx0, qy0), (qx0, qy1), (qx1, qy0), (qx1, qy1)))
        diam = 0.0
        for a in range(len(corners)):
            xa, ya = corners[a]
            for b in range(a + 1, len(corners)):
                xb, yb = corners[b]
                d2 = (xa - xb) ** 2 + (ya - yb) ** 2
                if d2 > diam:
                    diam = d2
        max_ext = max(max_ext, diam ** 0.5 / c.side)
    return ShapeReport(max_edge_ratio, max_ext, max_overlap)
