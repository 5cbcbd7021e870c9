"""Seedable synthetic table generator across four difficulty categories:
lined (C1), unlined (C2), spanning cells (C3), rotation and linear
perspective (C4). Produces an image plus a TableAnnotation whose bands,
cells and quad describe exactly what was drawn.

Text is rendered as glyph-like dash blocks, not real fonts; the structure
signal (content layout, ruling lines, gaps) is what matters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import geometry as geo
from .labels import (BandAngleError, Cell, SeparatorBand, TableAnnotation,
                     assign_query_labels, build_separator_bands, count_runs)

CATEGORIES = ("C1", "C2", "C3", "C4")

_WORDS = ("lorem ipsum dolor sit amet consectetur adipiscing elit sed eiusmod "
          "tempor incididunt labore dolore magna aliqua enim minim veniam").split()


class GenSpecError(ValueError):
    """Raised when a generation spec violates its category constraints."""


@dataclass
class GenSpec:
    seed: int = 0
    category: str = "C1"
    rows: tuple = (2, 5)
    cols: tuple = (2, 5)
    span_prob: float = 0.0          # probability a table receives spanning cells
    empty_prob: float = 0.1         # per-cell probability of an empty cell
    line_visibility: str = "all"    # all | none | mixed
    rotation_range: tuple = (0.0, 0.0)
    perspective_jitter: float = 0.0  # corner displacement, fraction of canvas
    canvas: int = 160
    stroke_width: int = 1
    noise_sigma: float = 2.0        # gray levels of background noise
    min_track: int = 20             # minimum row/column track extent, px
    min_gap: float = 6.0            # minimum content gap across a boundary, px

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise GenSpecError(f"unknown category '{self.category}' (field: category)")
        if self.category == "C1" and (self.line_visibility != "all" or self.span_prob > 0):
            raise GenSpecError("C1 requires all separators drawn and no spanning cells")
        if self.category == "C2" and (self.line_visibility != "none" or self.span_prob > 0):
            raise GenSpecError("C2 requires no separators drawn and no spanning cells")
        if self.category == "C3" and self.span_prob <= 0:
            raise GenSpecError("C3 requires spanning cells enabled (field: span_prob)")
        if self.category == "C4" and self.rotation_range == (0.0, 0.0) and self.perspective_jitter == 0:
            raise GenSpecError("C4 requires rotation or perspective enabled")
        if abs(self.rotation_range[0]) > 20 or abs(self.rotation_range[1]) > 20:
            raise GenSpecError("rotation range limited to +-20 degrees")

    @staticmethod
    def for_category(category: str, seed: int = 0, canvas: int = 160, **overrides) -> "GenSpec":
        presets = {
            "C1": dict(line_visibility="all", span_prob=0.0),
            "C2": dict(line_visibility="none", span_prob=0.0),
            "C3": dict(line_visibility="mixed", span_prob=1.0),
            "C4": dict(line_visibility="mixed", span_prob=0.6,
                       rotation_range=(-10.0, 10.0), perspective_jitter=0.02),
        }
        if category not in presets:
            raise GenSpecError(f"unknown category '{category}' (field: category)")
        kw = dict(presets[category])
        kw.update(overrides)
        return GenSpec(seed=seed, category=category, canvas=canvas, **kw)


def derive_seed(base_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{base_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- logical/physical sampling ---------------------------------------------------


def _sample_tracks(rng, total: float, count: int, min_track: float) -> Optional[np.ndarray]:
    for _ in range(20):
        weights = rng.uniform(0.7, 1.4, count)
        sizes = weights / weights.sum() * total
        if sizes.min() >= min_track:
            return np.concatenate([[0.0], np.cumsum(sizes)])
    return None


def _sample_spans(rng, nr: int, nc: int) -> list:
    shapes = [(1, 2), (1, 3), (2, 1), (3, 1), (2, 2)]
    n_spans = int(rng.integers(1, 3))
    taken = np.zeros((nr, nc), dtype=bool)
    spans = []
    for k in range(n_spans):
        for _ in range(10):
            rs, cs = shapes[int(rng.integers(0, len(shapes)))]
            if rs > nr or cs > nc:
                continue
            if k == 0 and rng.random() < 0.5 and cs <= nc:
                r0 = 0  # header bias: first span often a top-row colspan
                rs, cs = 1, int(rng.integers(2, min(3, nc) + 1))
            else:
                r0 = int(rng.integers(0, nr - rs + 1))
            c0 = int(rng.integers(0, nc - cs + 1))
            if not taken[r0:r0 + rs, c0:c0 + cs].any():
                taken[r0:r0 + rs, c0:c0 + cs] = True
                spans.append((r0, c0, rs, cs))
                break
    return spans


def _words(rng, lo=1, hi=3) -> str:
    n = int(rng.integers(lo, hi + 1))
    return " ".join(_WORDS[int(rng.integers(0, len(_WORDS)))] for _ in range(n))


def sample_table_spec(rng: np.random.Generator, spec: GenSpec) -> TableAnnotation:
    """Sample an axis-aligned table: grid, spans, contents, bands."""
    cv = spec.canvas
    for _ in range(50):
        nr = int(rng.integers(spec.rows[0], spec.rows[1] + 1))
        nc = int(rng.integers(spec.cols[0], spec.cols[1] + 1))
        mx0, mx1 = rng.uniform(6, 14, 2)
        my0, my1 = rng.uniform(6, 14, 2)
        x0, x1 = mx0, cv - mx1
        y0, y1 = my0, cv - my1
        col_pos = _sample_tracks(rng, x1 - x0, nc, spec.min_track)
        row_pos = _sample_tracks(rng, y1 - y0, nr, spec.min_track)
        if col_pos is None or row_pos is None:
            continue
        col_pos = col_pos + x0
        row_pos = row_pos + y0

        spans = _sample_spans(rng, nr, nc) if (spec.span_prob > 0 and rng.random() < spec.span_prob) else []
        covered = np.zeros((nr, nc), dtype=bool)
        cells = []
        for (r0, c0, rs, cs) in spans:
            cells.append(Cell(r0, c0, rs, cs, text=_words(rng)))
            covered[r0:r0 + rs, c0:c0 + cs] = True
        for r in range(nr):
            for c in range(nc):
                if not covered[r, c]:
                    empty = bool(rng.random() < spec.empty_prob)
                    cells.append(Cell(r, c, text=("" if empty else _words(rng)), empty=empty))

        half_gap = spec.min_gap / 2.0
        for cell in cells:
            cx0, cx1 = col_pos[cell.c], col_pos[cell.c + cell.cs]
            cy0, cy1 = row_pos[cell.r], row_pos[cell.r + cell.rs]
            gx = rng.uniform(half_gap, half_gap + 1.5)
            gy = rng.uniform(half_gap, half_gap + 1.5)
            ax0, ax1 = cx0 + gx, cx1 - gx
            ay0, ay1 = cy0 + gy, cy1 - gy
            if ax1 - ax0 < 4 or ay1 - ay0 < 3:
                cell.box = np.array([[ax0, ay0], [ax1, ay0], [ax1, ay1], [ax0, ay1]])
                continue
            frac_w = rng.uniform(0.55, 1.0) if cell.cs > 1 else rng.uniform(0.55, 1.0)
            frac_h = rng.uniform(0.55, 0.95) if cell.rs > 1 else rng.uniform(0.35, 0.9)
            bw = max(4.0, frac_w * (ax1 - ax0))
            bh = max(3.0, frac_h * (ay1 - ay0))
            bx = ax0 + rng.uniform(0, (ax1 - ax0) - bw)
            by = ay0 + rng.uniform(0, (ay1 - ay0) - bh)
            cell.box = np.array([[bx, by], [bx + bw, by], [bx + bw, by + bh], [bx, by + bh]])

        ann = TableAnnotation(
            n_rows=nr, n_cols=nc, cells=cells,
            table_quad=np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]),
            image_size=(cv, cv), row_tracks=row_pos, col_tracks=col_pos)
        width, height = x1 - x0, y1 - y0
        ann.row_bands, ann.col_bands = build_separator_bands(
            ann,
            boundaries_rows=[(p - y0) / height for p in row_pos],
            boundaries_cols=[(p - x0) / width for p in col_pos])
        return ann
    raise RuntimeError("could not sample a feasible table after bounded retries")


# -- rasterization -------------------------------------------------------------------


def _draw_hsegment(img: np.ndarray, y: float, x0: float, x1: float, value: int, width: int) -> None:
    h, w = img.shape[:2]
    yy = int(round(y))
    for dy in range(-(width // 2), width - width // 2):
        yq = yy + dy
        if 0 <= yq < h:
            img[yq, max(0, int(round(x0))):min(w, int(round(x1)) + 1)] = value


def _draw_vsegment(img: np.ndarray, x: float, y0: float, y1: float, value: int, width: int) -> None:
    h, w = img.shape[:2]
    xx = int(round(x))
    for dx in range(-(width // 2), width - width // 2):
        xq = xx + dx
        if 0 <= xq < w:
            img[max(0, int(round(y0))):min(h, int(round(y1)) + 1), xq] = value


def draw_segment(img: np.ndarray, p0, p1, value, width: int = 1) -> None:
    """Rasterize an arbitrary 2-D segment by dense point sampling."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) * 2)))
    ts = np.linspace(0.0, 1.0, n)
    pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
    xs = np.round(pts[:, 0]).astype(int)
    ys = np.round(pts[:, 1]).astype(int)
    h, w = img.shape[:2]
    r = width // 2
    for dx in range(-r, width - r):
        for dy in range(-r, width - r):
            xq = xs + dx
            yq = ys + dy
            ok = (xq >= 0) & (xq < w) & (yq >= 0) & (yq < h)
            img[yq[ok], xq[ok]] = value


def _draw_glyph_block(img: np.ndarray, rng, box: np.ndarray) -> None:
    x0, y0 = box[0]
    x1, y1 = box[2]
    x0i, y0i, x1i, y1i = int(round(x0)), int(round(y0)), int(round(x1)), int(round(y1))
    line_h = int(rng.integers(3, 5))
    gap = int(rng.integers(2, 4))
    y = y0i
    while y + line_h <= y1i:
        x = x0i
        while x < x1i:
            seg = int(rng.integers(3, 9))
            if rng.random() < 0.8:
                shade = int(rng.integers(20, 90))
                img[y:y + line_h, x:min(x + seg, x1i)] = shade
            x += seg + int(rng.integers(1, 3))
        y += line_h + gap


def _visible_flags(rng, spec: GenSpec, n: int) -> np.ndarray:
    if spec.line_visibility == "all":
        return np.ones(n, dtype=bool)
    if spec.line_visibility == "none":
        return np.zeros(n, dtype=bool)
    mode = rng.random()
    if mode < 0.4:
        return np.ones(n, dtype=bool)
    if mode < 0.6:
        return np.zeros(n, dtype=bool)
    return rng.random(n) < 0.5


def rasterize(annotation: TableAnnotation, spec: GenSpec,
              rng: np.random.Generator) -> np.ndarray:
    """Draw an axis-aligned annotation: glyph blocks, rulings, noise."""
    cv = spec.canvas
    gray = np.full((cv, cv), 255, dtype=np.int32)

    for cell in annotation.cells:
        if cell.empty or cell.box is None:
            continue
        _draw_glyph_block(gray, rng, cell.box)

    row_vis = _visible_flags(rng, spec, len(annotation.row_bands))
    col_vis = _visible_flags(rng, spec, len(annotation.col_bands))
    quad = annotation.table_quad
    x0, y0 = quad[0]
    x1, y1 = quad[2]
    shade = int(rng.integers(10, 70))
    spans = [c for c in annotation.cells if c.rs > 1 or c.cs > 1]

    if spec.line_visibility != "none":
        for edge in range(4):
            draw_segment(gray, quad[edge], quad[(edge + 1) % 4], shade, spec.stroke_width)

    def span_blocks(kind: str, k: int) -> list:
        # track intervals occupied by spanning cells crossing separator k;
        # no ruling is drawn through a spanning cell's region
        rt, ct = annotation.row_tracks, annotation.col_tracks
        blocks = []
        for s in spans:
            if kind == "col" and s.c < k + 1 < s.c + s.cs:
                if rt is not None:
                    blocks.append((rt[s.r] + 1, rt[s.r + s.rs] - 1))
                elif s.box is not None:
                    blocks.append((s.box[:, 1].min() - 2, s.box[:, 1].max() + 2))
            if kind == "row" and s.r < k + 1 < s.r + s.rs:
                if ct is not None:
                    blocks.append((ct[s.c] + 1, ct[s.c + s.cs] - 1))
                elif s.box is not None:
                    blocks.append((s.box[:, 0].min() - 2, s.box[:, 0].max() + 2))
        return sorted(blocks)

    def draw_ruling(fixed: float, lo: float, hi: float, blocks: list, vertical: bool):
        pos = lo
        for b0, b1 in blocks + [(hi, hi)]:
            if b0 > pos:
                if vertical:
                    _draw_vsegment(gray, fixed, pos, min(b0, hi), shade, spec.stroke_width)
                else:
                    _draw_hsegment(gray, fixed, pos, min(b0, hi), shade, spec.stroke_width)
            pos = max(pos, b1)

    for k, band in enumerate(annotation.col_bands):
        if not col_vis[k]:
            continue
        cx = band.centerline[0][0]
        draw_ruling(cx, y0, y1, span_blocks("col", k), vertical=True)
    for k, band in enumerate(annotation.row_bands):
        if not row_vis[k]:
            continue
        cy = band.centerline[0][1]
        draw_ruling(cy, x0, x1, span_blocks("row", k), vertical=False)

    if spec.noise_sigma > 0:
        gray = gray + np.round(rng.normal(0, spec.noise_sigma, gray.shape)).astype(np.int32)
    gray = np.clip(gray, 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


# -- projective warp ----------------------------------------------------------------


def apply_warp(image: np.ndarray, annotation: TableAnnotation, rotation_deg: float,
               perspective_disp: Optional[np.ndarray] = None) -> tuple:
    """Apply one projective transform to pixels and to all geometry.

    ``perspective_disp`` holds per-corner (4, 2) pixel displacements of the
    canvas corners. Raises BandAngleError if a warped band leaves the
    [-45, 45] angle range.
    """
    h, w = image.shape[:2]
    hmat = geo.rotation_homography(rotation_deg, ((w - 1) / 2.0, (h - 1) / 2.0))
    if perspective_disp is not None and np.any(perspective_disp != 0):
        src = np.array([[0, 0], [w - 1.0, 0], [w - 1.0, h - 1.0], [0, h - 1.0]])
        hp = geo.homography_from_points(src, src + np.asarray(perspective_disp, dtype=np.float64))
        hmat = hp @ hmat

    def warp_band(band: SeparatorBand) -> SeparatorBand:
        out = SeparatorBand(band.orientation, geo.apply_homography(hmat, band.quad))
        if not (-45.0 <= out.angle_deg <= 45.0):
            raise BandAngleError(f"warped band angle {out.angle_deg:.1f} outside [-45, 45]")
        return out

    warped_ann = replace(
        annotation,
        table_quad=geo.apply_homography(hmat, annotation.table_quad),
        row_bands=[warp_band(b) for b in annotation.row_bands],
        col_bands=[warp_band(b) for b in annotation.col_bands],
        cells=[replace(c, box=(geo.apply_homography(hmat, c.box) if c.box is not None else None))
               for c in annotation.cells],
    )

    if abs(rotation_deg) < 1e-12 and (perspective_disp is None or not np.any(perspective_disp)):
        return image.copy(), warped_ann

    inv = np.linalg.inv(hmat)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.stack([xs.reshape(-1), ys.reshape(-1), np.ones(h * w)], axis=1)
    src = pts @ inv.T
    sx = src[:, 0] / src[:, 2]
    sy = src[:, 1] / src[:, 2]
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)

    def sample(yy, xx):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        out = np.full((h * w, image.shape[2]), 255.0, dtype=np.float32)
        out[valid] = image[yy[valid], xx[valid]].astype(np.float32)
        return out

    p00 = sample(y0, x0)
    p01 = sample(y0, x0 + 1)
    p10 = sample(y0 + 1, x0)
    p11 = sample(y0 + 1, x0 + 1)
    fx = fx[:, None]
    fy = fy[:, None]
    blended = (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
               + p10 * (1 - fx) * fy + p11 * fx * fy)
    warped = np.clip(np.round(blended), 0, 255).astype(np.uint8).reshape(h, w, image.shape[2])
    return warped, warped_ann


# -- per-sample generation with validity loop ----------------------------------------


def anchors_per_side(canvas: int) -> int:
    return canvas // 4


def generate_sample(spec: GenSpec, index: int, n_queries: Optional[int] = None) -> tuple:
    """Deterministically generate (image, annotation) for one corpus index.

    C4 warps are shrunk geometrically until every band keeps exactly one
    run of positive anchors at the training query resolution, so labels
    always round-trip.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, index))
    nq = n_queries or anchors_per_side(spec.canvas)
    ann = sample_table_spec(rng, spec)
    image = rasterize(ann, spec, rng)

    rot = float(rng.uniform(*spec.rotation_range)) if spec.rotation_range != (0.0, 0.0) else 0.0
    disp = None
    if spec.perspective_jitter > 0:
        disp = rng.uniform(-spec.perspective_jitter, spec.perspective_jitter, (4, 2)) * spec.canvas

    scale = 1.0
    for _ in range(10):
        try:
            w_img, w_ann = apply_warp(image, ann, rot * scale,
                                      None if disp is None else disp * scale)
        except BandAngleError:
            scale *= 0.7
            continue
        if _labels_consistent(w_ann, nq):
            return w_img, w_ann
        scale *= 0.7
    return image.copy(), ann  # unwarped tables always validate by construction


def _labels_consistent(ann: TableAnnotation, nq: int) -> bool:
    try:
        q = assign_query_labels(ann.row_bands, ann.col_bands, nq, nq,
                                ann.image_size, ann.table_quad)
    except BandAngleError:
        return False
    return (count_runs(q.row_class) == len(ann.row_bands)
            and count_runs(q.col_class) == len(ann.col_bands))
