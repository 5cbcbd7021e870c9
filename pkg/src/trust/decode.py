"""Turn head outputs (or ground-truth targets) into a table structure.

Pipeline: threshold query scores into contiguous runs, keep the
highest-scoring line per run, intersect row and column lines into a
grid of basic cells, then merge adjacent basic cells whose vertex link
votes agree, completing every merged component to its bounding
rectangle so the result is an exact rectangular tiling. The final
partition serializes to an HTML-like table tree.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo
from .teds import TableTree

LL, RR, TT, BB = 0, 1, 2, 3


@dataclass
class SeparatorLine:
    orientation: str          # "row" or "col"
    query_index: int          # argmax representative of its run
    run: tuple                # (first, last) inclusive query indices
    start_point: np.ndarray
    angle_deg: float
    score: float

    @property
    def direction(self) -> np.ndarray:
        if self.orientation == "col":
            return geo.col_line_direction(self.angle_deg)
        return geo.row_line_direction(self.angle_deg)


@dataclass
class GridStructure:
    row_lines: list
    col_lines: list
    vertices: np.ndarray      # (R, C, 2) centerline intersections
    basic_cells: np.ndarray   # (R+1, C+1, 4, 2) quads, TL TR BR BL

    @property
    def n_grid_rows(self) -> int:
        return len(self.row_lines) + 1

    @property
    def n_grid_cols(self) -> int:
        return len(self.col_lines) + 1


@dataclass
class PartitionCell:
    r0: int
    r1: int
    c0: int
    c1: int
    confidence: float = 1.0


@dataclass
class CellPartition:
    n_rows: int               # basic grid rows (R+1)
    n_cols: int
    cells: list = field(default_factory=list)

    def validate_tiling(self) -> None:
        cover = np.zeros((self.n_rows, self.n_cols), dtype=np.int32)
        for cell in self.cells:
            cover[cell.r0:cell.r1 + 1, cell.c0:cell.c1 + 1] += 1
        if (cover != 1).any():
            raise ValueError("partition does not tile the basic grid exactly once")


# -- separators ---------------------------------------------------------------


def decode_separators(scores: np.ndarray, offsets: np.ndarray,
                      angle_logits: np.ndarray, alpha: float,
                      orientation: str, image_size: tuple) -> list:
    """Group above-threshold queries into runs; keep each run's best line."""
    w, h = image_size
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[0]
    lines = []
    i = 0
    while i < k:
        if scores[i] <= alpha:
            i += 1
            continue
        j = i
        while j + 1 < k and scores[j + 1] > alpha:
            j += 1
        rep = i + int(np.argmax(scores[i:j + 1]))
        angle = int(np.argmax(angle_logits[rep])) - 45
        if orientation == "col":
            anchor = rep * w / k
            start = np.array([anchor, float(offsets[rep]) * h])
        else:
            anchor = rep * h / k
            start = np.array([float(offsets[rep]) * w, anchor])
        lines.append(SeparatorLine(orientation=orientation, query_index=rep,
                                   run=(i, j), start_point=start,
                                   angle_deg=float(angle), score=float(scores[rep])))
        i = j + 1
    return lines


def _bounds_quad(bounds) -> np.ndarray:
    arr = np.asarray(bounds, dtype=np.float64)
    if arr.shape == (4, 2):
        return arr
    w, h = bounds
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def build_grid(row_lines: list, col_lines: list, bounds) -> GridStructure:
    """Intersect centerlines (treated as infinite) into vertices and cells.

    The outer table boundary acts as implicit separators: boundary edges
    of ``bounds`` (a table quad or an (w, h) image size) close the grid.
    """
    quad = _bounds_quad(bounds)
    row_lines = sorted(row_lines, key=lambda l: l.start_point[1])
    col_lines = sorted(col_lines, key=lambda l: l.start_point[0])

    # boundary pseudo-lines from the quad edges
    row_pts = [(quad[0], quad[1] - quad[0])] + \
        [(l.start_point, l.direction) for l in row_lines] + [(quad[3], quad[2] - quad[3])]
    col_pts = [(quad[0], quad[3] - quad[0])] + \
        [(l.start_point, l.direction) for l in col_lines] + [(quad[1], quad[2] - quad[1])]

    r, c = len(row_lines), len(col_lines)
    _warn_same_orientation_crossings(row_lines, quad, horizontal=True)
    _warn_same_orientation_crossings(col_lines, quad, horizontal=False)

    corners = np.zeros((r + 2, c + 2, 2))
    for i, (p, d) in enumerate(row_pts):
        for j, (q, e) in enumerate(col_pts):
            pt = geo.line_intersect(p, d, q, e)
            if pt is None:
                # parallel: fall back to the anchor projection
                pt = np.array([q[0], p[1]])
            corners[i, j] = pt

    vertices = corners[1:r + 1, 1:c + 1].copy()
    cells = np.zeros((r + 1, c + 1, 4, 2))
    for i in range(r + 1):
        for j in range(c + 1):
            cells[i, j, 0] = corners[i, j]
            cells[i, j, 1] = corners[i, j + 1]
            cells[i, j, 2] = corners[i + 1, j + 1]
            cells[i, j, 3] = corners[i + 1, j]
    return GridStructure(row_lines=row_lines, col_lines=col_lines,
                         vertices=vertices, basic_cells=cells)


def _warn_same_orientation_crossings(lines: list, quad: np.ndarray, horizontal: bool) -> None:
    extent = quad[:, 1 if not horizontal else 0]
    lo, hi = extent.min(), extent.max()
    for a, b in zip(lines, lines[1:]):
        pt = geo.line_intersect(a.start_point, a.direction, b.start_point, b.direction)
        if pt is None:
            continue
        coord = pt[0] if horizontal else pt[1]
        if lo <= coord <= hi:
            warnings.warn(
                f"two {a.orientation} lines intersect inside the table near {pt.round(1)}",
                stacklevel=3)


# -- merging ------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def merge_cells_from_edges(n_rows: int, n_cols: int, edges: list,
                           confidences: Optional[dict] = None) -> CellPartition:
    """Union-find over linked adjacent basic cells; complete components to
    bounding rectangles; union overlapping rectangles until a fixed point."""
    uf = _UnionFind(n_rows * n_cols)
    for (a, b) in edges:
        uf.union(a[0] * n_cols + a[1], b[0] * n_cols + b[1])

    groups: dict = {}
    for r in range(n_rows):
        for c in range(n_cols):
            root = uf.find(r * n_cols + c)
            groups.setdefault(root, []).append((r, c))

    rects = []
    for members in groups.values():
        rs = [m[0] for m in members]
        cs = [m[1] for m in members]
        rects.append([min(rs), max(rs), min(cs), max(cs)])

    # bounding boxes may overlap other rectangles; union to fixed point
    # (each union removes one rectangle, so this terminates)
    changed = True
    while changed:
        changed = False
        for i in range(len(rects)):
            if rects[i] is None:
                continue
            for j in range(i + 1, len(rects)):
                if rects[j] is None:
                    continue
                a, b = rects[i], rects[j]
                if a[0] <= b[1] and b[0] <= a[1] and a[2] <= b[3] and b[2] <= a[3]:
                    rects[i] = [min(a[0], b[0]), max(a[1], b[1]),
                                min(a[2], b[2]), max(a[3], b[3])]
                    rects[j] = None
                    changed = True
    final = [r for r in rects if r is not None]

    cells = []
    for r0, r1, c0, c1 in sorted(final):
        conf = 1.0
        if confidences and (r1 > r0 or c1 > c0):
            votes = [v for e, v in confidences.items()
                     if r0 <= e[0][0] <= r1 and c0 <= e[0][1] <= c1]
            if votes:
                conf = float(np.mean(votes))
        cells.append(PartitionCell(r0, r1, c0, c1, confidence=conf))
    part = CellPartition(n_rows=n_rows, n_cols=n_cols, cells=cells)
    part.validate_tiling()
    return part


def edge_vote_pairs(n_grid_rows: int, n_grid_cols: int):
    """Adjacent basic-cell pairs with the vertex votes observing each edge.

    Yields ((cell_a, cell_b), [(vertex_r, vertex_c, attr), ...]) where the
    vertices are the in-grid endpoints of the shared edge.
    """
    r_sep, c_sep = n_grid_rows - 1, n_grid_cols - 1
    for r in range(r_sep):
        for c in range(n_grid_cols):
            votes = []
            if c - 1 >= 0:
                votes.append((r, c - 1, RR))
            if c < c_sep:
                votes.append((r, c, LL))
            yield ((r, c), (r + 1, c)), votes
    for r in range(n_grid_rows):
        for c in range(c_sep):
            votes = []
            if r - 1 >= 0:
                votes.append((r - 1, c, BB))
            if r < r_sep:
                votes.append((r, c, TT))
            yield ((r, c), (r, c + 1)), votes


def resolve_merges(vertex_link_probs: np.ndarray, row_lines: list, col_lines: list,
                   grid: GridStructure, tau: float) -> CellPartition:
    """Merge decision per shared edge: average of its (up to two) redundant
    vertex votes, read at the representative query pair of each vertex."""
    nr, nc = grid.n_grid_rows, grid.n_grid_cols
    row_q = [l.query_index for l in grid.row_lines]
    col_q = [l.query_index for l in grid.col_lines]

    edges = []
    confidences = {}
    for (a, b), votes in edge_vote_pairs(nr, nc):
        if not votes:
            continue
        vals = [float(vertex_link_probs[row_q[vr], col_q[vc], attr]) for vr, vc, attr in votes]
        avg = float(np.mean(vals))
        if avg > tau:
            edges.append((a, b))
            confidences[(a, b)] = avg
    return merge_cells_from_edges(nr, nc, edges, confidences)


def links_implied_by_partition(partition: CellPartition) -> list:
    """Adjacent same-cell pairs implied by a partition (for idempotence)."""
    owner = np.zeros((partition.n_rows, partition.n_cols), dtype=np.int32)
    for i, cell in enumerate(partition.cells):
        owner[cell.r0:cell.r1 + 1, cell.c0:cell.c1 + 1] = i
    edges = []
    for r in range(partition.n_rows - 1):
        for c in range(partition.n_cols):
            if owner[r, c] == owner[r + 1, c]:
                edges.append(((r, c), (r + 1, c)))
    for r in range(partition.n_rows):
        for c in range(partition.n_cols - 1):
            if owner[r, c] == owner[r, c + 1]:
                edges.append(((r, c), (r, c + 1)))
    return edges


def heuristic_merge(image: np.ndarray, grid: GridStructure,
                    ink_threshold: float = 0.55, side_offset: float = 3.0,
                    min_crossing_frac: float = 0.3) -> CellPartition:
    """Merge neighbours whose shared edge is crossed by content ink.

    Samples the interior of each shared edge segment and tests for dark
    pixels on both sides of the edge; a ruling stroke on the edge itself
    does not trigger a merge. Splitting-model post-processing baseline.
    """
    gray = image.mean(axis=-1) if image.ndim == 3 else image
    hgt, wid = gray.shape

    def dark(pt) -> bool:
        x, y = int(round(pt[0])), int(round(pt[1]))
        if 0 <= x < wid and 0 <= y < hgt:
            return gray[y, x] < ink_threshold
        return False

    nr, nc = grid.n_grid_rows, grid.n_grid_cols
    cells = grid.basic_cells
    edges = []
    for (a, b), _votes in edge_vote_pairs(nr, nc):
        qa = cells[a[0], a[1]]
        if a[0] + 1 == b[0]:      # vertical neighbours: edge = bottom of a
            p0, p1 = qa[3], qa[2]
        else:                     # horizontal neighbours: edge = right of a
            p0, p1 = qa[1], qa[2]
        seg = p1 - p0
        norm = np.linalg.norm(seg)
        if norm < 2 * side_offset:
            continue
        normal = np.array([-seg[1], seg[0]]) / norm
        ts = np.linspace(0.15, 0.85, 9)
        crossings = 0
        for t in ts:
            p = p0 + t * seg
            if dark(p + side_offset * normal) and dark(p - side_offset * normal):
                crossings += 1
        if crossings / len(ts) >= min_crossing_frac:
            edges.append((a, b))
    return merge_cells_from_edges(nr, nc, edges)


# -- output assembly --------------------------------------------------------------------


def emit_table_tree(partition: CellPartition, texts: Optional[dict] = None) -> TableTree:
    """One tr per grid row; td at each cell origin with its spans."""
    partition.validate_tiling()
    by_origin = {(cell.r0, cell.c0): cell for cell in partition.cells}
    body = TableTree("tbody")
    for r in range(partition.n_rows):
        row = TableTree("tr")
        for c in range(partition.n_cols):
            cell = by_origin.get((r, c))
            if cell is None:
                continue
            text = texts.get((r, c), "") if texts else ""
            row.children.append(TableTree("td", rowspan=cell.r1 - cell.r0 + 1,
                                          colspan=cell.c1 - cell.c0 + 1, text=text))
        body.children.append(row)
    return TableTree("table", children=[body])


def cell_polygons(partition: CellPartition, grid: GridStructure) -> list:
    """Physical quad for each cell from its outermost basic-cell corners."""
    quads = []
    bc = grid.basic_cells
    for cell in partition.cells:
        quads.append(np.array([
            bc[cell.r0, cell.c0, 0],
            bc[cell.r0, cell.c1, 1],
            bc[cell.r1, cell.c1, 2],
            bc[cell.r1, cell.c0, 3],
        ]))
    return quads


# -- targets round trip --------------------------------------------------------------------


def targets_to_head_arrays(q, v) -> dict:
    """Express ground-truth targets in the shape the decoder consumes."""
    def onehot(classes, n=91):
        out = np.zeros((classes.shape[0], n))
        out[np.arange(classes.shape[0]), classes] = 1.0
        return out

    return {
        "row_scores": q.row_class.astype(np.float64),
        "row_offsets": q.row_offset.astype(np.float64),
        "row_angle_logits": onehot(q.row_angle),
        "col_scores": q.col_class.astype(np.float64),
        "col_offsets": q.col_offset.astype(np.float64),
        "col_angle_logits": onehot(q.col_angle),
        "vertex_link_probs": v.links.astype(np.float64),
    }


def decode_table(heads: dict, image_size: tuple, alpha: float = 0.5, tau: float = 0.5,
                 merge: str = "vbm", bounds=None, image: Optional[np.ndarray] = None,
                 texts: Optional[dict] = None):
    """Full decode: separators -> grid -> merges -> tree.

    Returns (tree, partition, grid). ``merge`` selects the vertex-vote
    path or the image-heuristic baseline (which needs ``image``).
    """
    if merge not in ("vbm", "heuristic"):
        raise ValueError(f"unknown merge mode '{merge}'")
    row_lines = decode_separators(heads["row_scores"], heads["row_offsets"],
                                  heads["row_angle_logits"], alpha, "row", image_size)
    col_lines = decode_separators(heads["col_scores"], heads["col_offsets"],
                                  heads["col_angle_logits"], alpha, "col", image_size)
    grid = build_grid(row_lines, col_lines, bounds if bounds is not None else image_size)
    if merge == "vbm":
        partition = resolve_merges(heads["vertex_link_probs"], row_lines, col_lines, grid, tau)
    else:
        if image is None:
            raise ValueError("heuristic merge needs the source image")
        partition = heuristic_merge(image, grid)
    tree = emit_table_tree(partition, texts)
    return tree, partition, grid
