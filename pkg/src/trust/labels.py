"""Ground-truth construction: separator bands, query labels, vertex labels.

A TableAnnotation pairs the logical grid (cells with spans) with physical
geometry (table quad, internal separator parallelograms). Query labels
mark which uniformly spaced row/column anchor lines cross a separator
band, along with the start-point offset on the table boundary and the
band angle class. Vertex labels mark which of the four basic-grid pairs
around each row/column separator intersection belong to one spanning
cell, replicated over every positive (row query, column query) pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geometry as geo

ANGLE_CLASSES = 91  # integer degrees in [-45, +45], class = angle + 45

# vertex attribute order along the last axis
LL, RR, TT, BB = 0, 1, 2, 3


class AnnotationError(ValueError):
    """Raised when an annotation violates its grid or geometry invariants."""


class BandAngleError(ValueError):
    """Raised when a separator band angle leaves the [-45, 45] range."""


@dataclass
class Cell:
    r: int
    c: int
    rs: int = 1
    cs: int = 1
    text: str = ""
    empty: bool = False
    box: Optional[np.ndarray] = None  # content quad; generator-side only, not serialized


@dataclass
class SeparatorBand:
    orientation: str  # "row" or "col"
    quad: np.ndarray  # 4x2 points, TL TR BR BL order

    @property
    def centerline(self) -> tuple:
        q = self.quad
        if self.orientation == "col":
            p0 = (q[0] + q[1]) / 2.0
            p1 = (q[3] + q[2]) / 2.0
        else:
            p0 = (q[0] + q[3]) / 2.0
            p1 = (q[1] + q[2]) / 2.0
        d = p1 - p0
        n = np.linalg.norm(d)
        return p0, (d / n if n > 0 else d)

    @property
    def angle_deg(self) -> float:
        _, d = self.centerline
        if self.orientation == "col":
            return geo.col_angle_of_direction(d)
        return geo.row_angle_of_direction(d)


@dataclass
class TableAnnotation:
    n_rows: int
    n_cols: int
    cells: list
    table_quad: np.ndarray  # 4x2, TL TR BR BL
    row_bands: list = field(default_factory=list)
    col_bands: list = field(default_factory=list)
    image_size: tuple = (0, 0)  # (w, h)
    image_name: str = ""
    # generator-side pre-warp grid track boundaries; not serialized
    row_tracks: Optional[np.ndarray] = None
    col_tracks: Optional[np.ndarray] = None

    def validate(self) -> None:
        cover = np.zeros((self.n_rows, self.n_cols), dtype=np.int32)
        for cell in self.cells:
            if cell.rs < 1 or cell.cs < 1:
                raise AnnotationError(f"cell at ({cell.r},{cell.c}) has non-positive span")
            if cell.r + cell.rs > self.n_rows or cell.c + cell.cs > self.n_cols:
                raise AnnotationError(f"cell at ({cell.r},{cell.c}) spans outside the {self.n_rows}x{self.n_cols} grid")
            cover[cell.r:cell.r + cell.rs, cell.c:cell.c + cell.cs] += 1
        if (cover != 1).any():
            raise AnnotationError("cells do not tile the logical grid exactly once")
        if not geo.is_convex(self.table_quad):
            raise AnnotationError("table quad is not convex")
        for bands, axis in ((self.row_bands, 1), (self.col_bands, 0)):
            centers = [b.centerline[0][axis] for b in bands]
            if any(b2 < b1 for b1, b2 in zip(centers, centers[1:])):
                raise AnnotationError("separator bands are not sorted along their axis")

    def grid_index(self) -> np.ndarray:
        """(n_rows, n_cols) map of basic grid position -> cell list index."""
        idx = np.full((self.n_rows, self.n_cols), -1, dtype=np.int32)
        for i, cell in enumerate(self.cells):
            idx[cell.r:cell.r + cell.rs, cell.c:cell.c + cell.cs] = i
        return idx


@dataclass
class QueryTargets:
    row_class: np.ndarray   # (N,) 0/1
    row_offset: np.ndarray  # (N,) normalized by image height
    row_angle: np.ndarray   # (N,) class in [0, 90]
    row_band: np.ndarray    # (N,) band index, -1 when negative
    col_class: np.ndarray
    col_offset: np.ndarray
    col_angle: np.ndarray
    col_band: np.ndarray

    @property
    def row_mask(self) -> np.ndarray:
        return self.row_class

    @property
    def col_mask(self) -> np.ndarray:
        return self.col_class


@dataclass
class VertexTargets:
    links: np.ndarray  # (N, M, 4) 0/1
    valid: np.ndarray  # (N, M, 4) 0/1


def count_runs(classes: np.ndarray) -> int:
    """Number of maximal contiguous runs of positive entries."""
    c = np.asarray(classes).astype(bool)
    return int(np.count_nonzero(c[1:] & ~c[:-1]) + (1 if c.size and c[0] else 0))


# -- separator bands -----------------------------------------------------------


def _frame_of_quad(quad: np.ndarray):
    """Affine local frame of a (possibly rotated) table quad."""
    origin = quad[0]
    ex = quad[1] - quad[0]
    ey = quad[3] - quad[0]
    basis = np.stack([ex, ey], axis=1)
    inv = np.linalg.inv(basis)

    def to_frame(pts):
        return (np.atleast_2d(pts) - origin) @ inv.T

    def from_frame(pts):
        return np.atleast_2d(pts) @ basis.T + origin

    return to_frame, from_frame


def build_separator_bands(annotation: TableAnnotation,
                          boundaries_rows: Optional[list] = None,
                          boundaries_cols: Optional[list] = None,
                          max_halfwidth_frac: float = 0.35) -> tuple:
    """Widest bands between content boxes of adjacent non-spanning cells.

    Works in the table quad's local frame, so rigidly rotated annotations
    produce correspondingly rotated bands. Spanning cells do not constrain
    the band passing through them. Boundary positions default to an even
    grid split in the local frame; the generator passes its sampled grid.
    Band growth is capped at ``max_halfwidth_frac`` of the neighbouring
    track extent so bands around empty cells or inside wide spans never
    collide (two capped bands keep >= 30% of a track between them).
    """
    annotation.validate()
    to_frame, from_frame = _frame_of_quad(annotation.table_quad)
    nr, nc = annotation.n_rows, annotation.n_cols
    row_b = boundaries_rows if boundaries_rows is not None else [k / nr for k in range(nr + 1)]
    col_b = boundaries_cols if boundaries_cols is not None else [k / nc for k in range(nc + 1)]

    boxes: dict = {}
    for cell in annotation.cells:
        if cell.box is None or cell.empty:
            continue
        fb = to_frame(cell.box)
        boxes[(cell.r, cell.c)] = (fb[:, 0].min(), fb[:, 0].max(), fb[:, 1].min(), fb[:, 1].max())

    def band_interval(k, along_col: bool):
        bound = col_b[k] if along_col else row_b[k]
        prev_b = col_b[k - 1] if along_col else row_b[k - 1]
        next_b = col_b[k + 1] if along_col else row_b[k + 1]
        lo = bound - max_halfwidth_frac * (bound - prev_b)
        hi = bound + max_halfwidth_frac * (next_b - bound)
        for cell in annotation.cells:
            box = boxes.get((cell.r, cell.c))
            if box is None:
                continue
            x0, x1, y0, y1 = box
            if along_col:
                if cell.c + cell.cs == k:   # touches boundary from the left
                    lo = max(lo, x1)
                elif cell.c == k:           # touches from the right
                    hi = min(hi, x0)
                # cells with cell.c < k < cell.c+cs span across: no constraint
            else:
                if cell.r + cell.rs == k:
                    lo = max(lo, y1)
                elif cell.r == k:
                    hi = min(hi, y0)
        return lo, hi, bound

    w = np.linalg.norm(annotation.table_quad[1] - annotation.table_quad[0])
    h = np.linalg.norm(annotation.table_quad[3] - annotation.table_quad[0])

    col_bands = []
    for k in range(1, nc):
        lo, hi, bound = band_interval(k, along_col=True)
        if (hi - lo) * w < 1.0:
            warnings.warn(f"degenerate column band at boundary {k}, clamped to 1 pixel", stacklevel=2)
            lo, hi = bound - 0.5 / w, bound + 0.5 / w
        quad = from_frame(np.array([[lo, 0.0], [hi, 0.0], [hi, 1.0], [lo, 1.0]]))
        col_bands.append(SeparatorBand("col", quad))

    row_bands = []
    for k in range(1, nr):
        lo, hi, bound = band_interval(k, along_col=False)
        if (hi - lo) * h < 1.0:
            warnings.warn(f"degenerate row band at boundary {k}, clamped to 1 pixel", stacklevel=2)
            lo, hi = bound - 0.5 / h, bound + 0.5 / h
        quad = from_frame(np.array([[0.0, lo], [1.0, lo], [1.0, hi], [0.0, hi]]))
        row_bands.append(SeparatorBand("row", quad))

    return row_bands, col_bands


# -- query labels ------------------------------------------------------------------


def _angle_class(angle_deg: float) -> int:
    if not (-45.0 - 1e-6 <= angle_deg <= 45.0 + 1e-6):
        raise BandAngleError(f"band angle {angle_deg:.2f} outside [-45, 45]")
    cls = geo.round_half_away(angle_deg) + 45
    return min(max(cls, 0), ANGLE_CLASSES - 1)


def assign_query_labels(row_bands: list, col_bands: list, n_row_queries: int,
                        n_col_queries: int, image_size: tuple,
                        table_quad: np.ndarray) -> QueryTargets:
    """Label anchors whose line crosses a band inside the table's extent.

    Column query j anchors the vertical line x = j*w/M; its offset is the
    y where that line meets the table's top boundary edge (normalized by
    h), and its angle class is the rounded band angle + 45. Rows are the
    symmetric construction against the left boundary edge.
    """
    w, h = image_size
    n, m = n_row_queries, n_col_queries
    quad = np.asarray(table_quad, dtype=np.float64)

    col_class = np.zeros(m, dtype=np.int8)
    col_offset = np.zeros(m, dtype=np.float64)
    col_angle = np.zeros(m, dtype=np.int64)
    col_band = np.full(m, -1, dtype=np.int64)
    for j in range(m):
        x = j * w / m
        table_iv = geo.vline_quad_interval(x, quad)
        if table_iv is None:
            continue
        for bi, band in enumerate(col_bands):
            band_iv = geo.vline_quad_interval(x, band.quad)
            if band_iv is None:
                continue
            lo = max(table_iv[0], band_iv[0])
            hi = min(table_iv[1], band_iv[1])
            if hi - lo > 1e-6:
                col_class[j] = 1
                col_band[j] = bi
                col_offset[j] = geo.y_on_line_at_x(quad[0], quad[1], x) / h
                col_angle[j] = _angle_class(band.angle_deg)
                break

    row_class = np.zeros(n, dtype=np.int8)
    row_offset = np.zeros(n, dtype=np.float64)
    row_angle = np.zeros(n, dtype=np.int64)
    row_band = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        y = i * h / n
        table_iv = geo.hline_quad_interval(y, quad)
        if table_iv is None:
            continue
        for bi, band in enumerate(row_bands):
            band_iv = geo.hline_quad_interval(y, band.quad)
            if band_iv is None:
                continue
            lo = max(table_iv[0], band_iv[0])
            hi = min(table_iv[1], band_iv[1])
            if hi - lo > 1e-6:
                row_class[i] = 1
                row_band[i] = bi
                row_offset[i] = geo.x_on_line_at_y(quad[0], quad[3], y) / w
                row_angle[i] = _angle_class(band.angle_deg)
                break

    return QueryTargets(row_class, row_offset, row_angle, row_band,
                        col_class, col_offset, col_angle, col_band)


# -- vertex labels --------------------------------------------------------------------


def grid_vertex_links(annotation: TableAnnotation) -> np.ndarray:
    """(R, C, 4) merge attributes at ground-truth grid vertices.

    Vertex (r, c) is the intersection of internal row separator r and
    internal column separator c; a cell's index equals its bottom-right
    corner vertex. Merging cells (r, c) and (r+1, c) sets LL at vertex
    (r, c) and RR at vertex (r, c-1); merging (r, c) and (r, c+1) sets
    TT at vertex (r, c) and BB at vertex (r-1, c).
    """
    annotation.validate()
    nr, nc = annotation.n_rows, annotation.n_cols
    idx = annotation.grid_index()
    links = np.zeros((max(nr - 1, 0), max(nc - 1, 0), 4), dtype=np.int8)
    for r in range(nr - 1):
        for c in range(nc):
            if idx[r, c] == idx[r + 1, c]:
                if c < nc - 1:
                    links[r, c, LL] = 1
                if c - 1 >= 0:
                    links[r, c - 1, RR] = 1
    for r in range(nr):
        for c in range(nc - 1):
            if idx[r, c] == idx[r, c + 1]:
                if r < nr - 1:
                    links[r, c, TT] = 1
                if r - 1 >= 0:
                    links[r - 1, c, BB] = 1
    return links


def build_vertex_targets(annotation: TableAnnotation, q: QueryTargets) -> VertexTargets:
    """Replicate grid-vertex labels to every positive query pair."""
    gt = grid_vertex_links(annotation)
    n = q.row_class.shape[0]
    m = q.col_class.shape[0]
    links = np.zeros((n, m, 4), dtype=np.int8)
    valid = np.zeros((n, m, 4), dtype=np.int8)
    pos_rows = np.nonzero(q.row_class)[0]
    pos_cols = np.nonzero(q.col_class)[0]
    for i in pos_rows:
        r = q.row_band[i]
        for j in pos_cols:
            c = q.col_band[j]
            valid[i, j, :] = 1
            if 0 <= r < gt.shape[0] and 0 <= c < gt.shape[1]:
                links[i, j, :] = gt[r, c, :]
    return VertexTargets(links=links, valid=valid)


# -- reference trees and JSON schema ----------------------------------------------------


def annotation_to_tree(annotation: TableAnnotation, with_text: bool = False):
    """Reference TableTree (all rows under tbody) for TEDS comparison."""
    from .teds import TableTree

    by_origin = {(cell.r, cell.c): cell for cell in annotation.cells}
    covered = annotation.grid_index()
    body = TableTree("tbody")
    for r in range(annotation.n_rows):
        row = TableTree("tr")
        for c in range(annotation.n_cols):
            cell = by_origin.get((r, c))
            if cell is None:
                continue
            td = TableTree("td", rowspan=cell.rs, colspan=cell.cs,
                           text=(cell.text if with_text and not cell.empty else ""))
            row.children.append(td)
        body.children.append(row)
    assert (covered >= 0).all()
    return TableTree("table", children=[body])


def annotation_to_json(annotation: TableAnnotation) -> dict:
    return {
        "image": annotation.image_name,
        "size": {"w": int(annotation.image_size[0]), "h": int(annotation.image_size[1])},
        "n_rows": annotation.n_rows,
        "n_cols": annotation.n_cols,
        "table_quad": [[float(x), float(y)] for x, y in annotation.table_quad],
        "cells": [{"r": cell.r, "c": cell.c, "rs": cell.rs, "cs": cell.cs,
                   "text": cell.text, "empty": cell.empty} for cell in annotation.cells],
        "row_bands": [{"quad": [[float(x), float(y)] for x, y in b.quad],
                       "angle": float(b.angle_deg)} for b in annotation.row_bands],
        "col_bands": [{"quad": [[float(x), float(y)] for x, y in b.quad],
                       "angle": float(b.angle_deg)} for b in annotation.col_bands],
    }


def annotation_from_json(data: dict) -> TableAnnotation:
    cells = [Cell(r=c["r"], c=c["c"], rs=c["rs"], cs=c["cs"],
                  text=c.get("text", ""), empty=bool(c.get("empty", False)))
             for c in data["cells"]]
    ann = TableAnnotation(
        n_rows=data["n_rows"],
        n_cols=data["n_cols"],
        cells=cells,
        table_quad=np.asarray(data["table_quad"], dtype=np.float64),
        row_bands=[SeparatorBand("row", np.asarray(b["quad"], dtype=np.float64))
                   for b in data["row_bands"]],
        col_bands=[SeparatorBand("col", np.asarray(b["quad"], dtype=np.float64))
                   for b in data["col_bands"]],
        image_size=(data["size"]["w"], data["size"]["h"]),
        image_name=data.get("image", ""),
    )
    ann.validate()
    return ann


def scale_annotation(annotation: TableAnnotation, sx: float, sy: float,
                     new_size: tuple) -> TableAnnotation:
    """Scale all geometry (resize-with-pad keeps the origin fixed)."""
    s = np.array([sx, sy], dtype=np.float64)

    def scale_band(b: SeparatorBand) -> SeparatorBand:
        return SeparatorBand(b.orientation, b.quad * s)

    return replace(
        annotation,
        table_quad=annotation.table_quad * s,
        row_bands=[scale_band(b) for b in annotation.row_bands],
        col_bands=[scale_band(b) for b in annotation.col_bands],
        cells=[replace(c, box=(c.box * s if c.box is not None else None)) for c in annotation.cells],
        image_size=new_size,
    )
