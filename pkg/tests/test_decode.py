import numpy as np
import pytest

from trust import decode as D
from trust.decode import (CellPartition, PartitionCell, build_grid, cell_polygons,
                          decode_separators, decode_table, emit_table_tree,
                          links_implied_by_partition, merge_cells_from_edges,
                          resolve_merges, targets_to_head_arrays)
from trust.labels import assign_query_labels, build_vertex_targets
from trust.teds import serialize_table_html, teds

from test_labels import simple_annotation, rotate_annotation


def onehot(cls, k, n=91):
    out = np.zeros((k, n))
    out[np.arange(k), cls] = 1.0
    return out


# -- decode_separators ---------------------------------------------------------


def test_runs_and_representatives():
    scores = np.array([0.1, 0.7, 0.9, 0.6, 0.2, 0.8])
    lines = decode_separators(scores, np.zeros(6), onehot(np.full(6, 45), 6),
                              alpha=0.5, orientation="col", image_size=(60, 60))
    assert [(l.run, l.query_index) for l in lines] == [((1, 3), 2), ((5, 5), 5)]
    assert lines[0].score == pytest.approx(0.9)


def test_all_below_threshold_empty():
    lines = decode_separators(np.full(5, 0.3), np.zeros(5), onehot(np.full(5, 45), 5),
                              0.5, "row", (50, 50))
    assert lines == []


def test_tie_breaks_to_lower_index():
    scores = np.array([0.0, 0.9, 0.9, 0.0])
    lines = decode_separators(scores, np.zeros(4), onehot(np.full(4, 45), 4),
                              0.5, "col", (40, 40))
    assert lines[0].query_index == 1


def test_invariant_to_subthreshold_queries():
    scores = np.array([0.0, 0.9, 0.0, 0.0, 0.8, 0.0])
    base = decode_separators(scores, np.zeros(6), onehot(np.full(6, 45), 6),
                             0.5, "col", (60, 60))
    noisy = scores.copy()
    noisy[[0, 2, 5]] = 0.49
    pert = decode_separators(noisy, np.zeros(6), onehot(np.full(6, 45), 6),
                             0.5, "col", (60, 60))
    assert [(l.query_index, tuple(l.start_point)) for l in base] == \
           [(l.query_index, tuple(l.start_point)) for l in pert]


def test_geometry_reconstruction_row_and_col():
    # col representative at index 2 of 8 on a 80-wide image -> anchor x=20
    scores = np.zeros(8)
    scores[2] = 0.9
    offsets = np.zeros(8)
    offsets[2] = 0.25
    lines = decode_separators(scores, offsets, onehot(np.full(8, 50), 8), 0.5, "col", (80, 40))
    (line,) = lines
    assert np.allclose(line.start_point, [20.0, 10.0])
    assert line.angle_deg == 5.0

    lines = decode_separators(scores, offsets, onehot(np.full(8, 40), 8), 0.5, "row", (80, 40))
    (line,) = lines
    assert np.allclose(line.start_point, [20.0, 10.0])
    assert line.angle_deg == -5.0


def test_gt_targets_reproduce_band_centerlines():
    ann = simple_annotation(3, 3, size=(200, 200))
    q = assign_query_labels(ann.row_bands, ann.col_bands, 50, 50,
                            ann.image_size, ann.table_quad)
    heads = targets_to_head_arrays(q, build_vertex_targets(ann, q))
    col_lines = decode_separators(heads["col_scores"], heads["col_offsets"],
                                  heads["col_angle_logits"], 0.5, "col", ann.image_size)
    assert len(col_lines) == len(ann.col_bands)
    for line, band in zip(col_lines, ann.col_bands):
        x0, x1 = band.quad[0][0], band.quad[1][0]
        assert x0 - 1e-6 <= line.start_point[0] <= x1 + 1e-6


# -- build_grid -----------------------------------------------------------------


def make_line(orientation, start, angle, idx=0):
    return D.SeparatorLine(orientation, idx, (idx, idx), np.asarray(start, dtype=np.float64),
                           angle, 1.0)


def test_grid_counts_axis_aligned():
    rows = [make_line("row", (0, 30), 0.0, 1), make_line("row", (0, 60), 0.0, 2)]
    cols = [make_line("col", (30, 0), 0.0, 1), make_line("col", (60, 0), 0.0, 2)]
    grid = build_grid(rows, cols, (90, 90))
    assert grid.basic_cells.shape == (3, 3, 4, 2)
    assert grid.vertices.shape == (2, 2, 2)
    assert np.allclose(grid.vertices[0, 0], [30, 30])
    assert np.allclose(grid.basic_cells[2, 2, 2], [90, 90])


def test_vertex_with_tilted_column_line():
    rows = [make_line("row", (0, 50), 0.0)]
    cols = [make_line("col", (50, 0), 10.0)]
    grid = build_grid(rows, cols, (100, 100))
    assert np.allclose(grid.vertices[0, 0], [50 + 50 * np.tan(np.radians(10.0)), 50.0], atol=1e-9)


def test_zero_lines_single_cell():
    grid = build_grid([], [], (70, 50))
    assert grid.basic_cells.shape == (1, 1, 4, 2)
    assert np.allclose(grid.basic_cells[0, 0], [[0, 0], [70, 0], [70, 50], [0, 50]])


def test_same_orientation_crossing_warns_keeps_both():
    rows = [make_line("row", (0, 40), -10.0, 1), make_line("row", (0, 44), 10.0, 2)]
    with pytest.warns(UserWarning):
        grid = build_grid(rows, [], (100, 100))
    assert len(grid.row_lines) == 2


# -- merging ----------------------------------------------------------------------


def test_merge_top_row_colspan3():
    edges = [(((0, 0)), ((0, 1))), (((0, 1)), ((0, 2)))]
    part = merge_cells_from_edges(3, 3, edges)
    tree = emit_table_tree(part)
    html = serialize_table_html(tree)
    assert '<td colspan="3"></td>' in html
    assert html.count("<tr>") == 3


def test_no_links_all_basic_cells():
    probs = np.zeros((6, 6, 4))
    rows = [make_line("row", (0, 30), 0.0, 2)]
    cols = [make_line("col", (30, 0), 0.0, 3)]
    grid = build_grid(rows, cols, (60, 60))
    part = resolve_merges(probs, rows, cols, grid, tau=0.5)
    assert len(part.cells) == 4
    assert all(c.r0 == c.r1 and c.c0 == c.c1 for c in part.cells)


def test_l_shaped_component_completed_to_rectangle():
    edges = [(((0, 0)), ((0, 1))), (((0, 0)), ((1, 0)))]
    part = merge_cells_from_edges(3, 3, edges)
    part.validate_tiling()
    big = [c for c in part.cells if (c.r1 - c.r0 + 1) * (c.c1 - c.c0 + 1) > 1]
    assert len(big) == 1
    assert (big[0].r0, big[0].r1, big[0].c0, big[0].c1) == (0, 1, 0, 1)


def test_resolve_merges_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        nr, nc = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        all_edges = [e for e, _ in D.edge_vote_pairs(nr, nc)]
        chosen = [e for e in all_edges if rng.random() < 0.3]
        part = merge_cells_from_edges(nr, nc, chosen)
        again = merge_cells_from_edges(nr, nc, links_implied_by_partition(part))
        assert [(c.r0, c.r1, c.c0, c.c1) for c in part.cells] == \
               [(c.r0, c.r1, c.c0, c.c1) for c in again.cells]


def test_partition_tiling_property_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        nr, nc = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        all_edges = [e for e, _ in D.edge_vote_pairs(nr, nc)]
        chosen = [e for e in all_edges if rng.random() < 0.4]
        part = merge_cells_from_edges(nr, nc, chosen)
        part.validate_tiling()  # raises on failure


def test_redundant_vote_averaging():
    # 3x3 grid; one vertical edge (1,1)-(2,1) has votes at vertices (1,0) RR and (1,1) LL
    rows = [make_line("row", (0, 20), 0.0, 2), make_line("row", (0, 40), 0.0, 4)]
    cols = [make_line("col", (20, 0), 0.0, 2), make_line("col", (40, 0), 0.0, 4)]
    grid = build_grid(rows, cols, (60, 60))
    probs = np.zeros((6, 6, 4))
    probs[4, 2, D.RR] = 0.9   # vertex (1,0) at queries (4,2)
    probs[4, 4, D.LL] = 0.3   # vertex (1,1) at queries (4,4)
    part = resolve_merges(probs, rows, cols, grid, tau=0.5)  # avg 0.6 > 0.5
    merged = [c for c in part.cells if c.r1 > c.r0]
    assert len(merged) == 1 and (merged[0].r0, merged[0].r1, merged[0].c0, merged[0].c1) == (1, 2, 1, 1)

    probs[4, 2, D.RR] = 0.55  # avg 0.425 < 0.5 -> no merge
    part = resolve_merges(probs, rows, cols, grid, tau=0.5)
    assert all(c.r1 == c.r0 and c.c1 == c.c0 for c in part.cells)


# -- tree emission -----------------------------------------------------------------


def test_emit_tree_1x2():
    part = CellPartition(1, 2, [PartitionCell(0, 0, 0, 0), PartitionCell(0, 0, 1, 1)])
    html = serialize_table_html(emit_table_tree(part))
    assert html == "<table><tbody><tr><td></td><td></td></tr></tbody></table>"


def test_emit_tree_rejects_non_tiling():
    part = CellPartition(2, 2, [PartitionCell(0, 0, 0, 1), PartitionCell(1, 1, 0, 0)])
    with pytest.raises(ValueError):
        emit_table_tree(part)


def test_emit_tree_texts_at_origins():
    part = CellPartition(1, 2, [PartitionCell(0, 0, 0, 1)])
    # wait: 1x2 grid fully merged -> single td with colspan 2
    html = serialize_table_html(emit_table_tree(part, texts={(0, 0): "hi"}))
    assert html == '<table><tbody><tr><td colspan="2">hi</td></tr></tbody></table>'


# -- cell polygons -----------------------------------------------------------------


def test_cell_polygons_axis_aligned():
    rows = [make_line("row", (0, 30), 0.0, 1)]
    cols = [make_line("col", (30, 0), 0.0, 1)]
    grid = build_grid(rows, cols, (60, 60))
    part = CellPartition(2, 2, [PartitionCell(0, 0, 0, 0), PartitionCell(0, 0, 1, 1),
                                PartitionCell(1, 1, 0, 0), PartitionCell(1, 1, 1, 1)])
    quads = cell_polygons(part, grid)
    assert len(quads) == 4
    assert np.allclose(quads[0], [[0, 0], [30, 0], [30, 30], [0, 30]])


def test_cell_polygons_merged_width_sums():
    rows = [make_line("row", (0, 30), 0.0, 1)]
    cols = [make_line("col", (20, 0), 0.0, 1)]
    grid = build_grid(rows, cols, (60, 60))
    part = CellPartition(2, 2, [PartitionCell(0, 0, 0, 1),
                                PartitionCell(1, 1, 0, 0), PartitionCell(1, 1, 1, 1)])
    quads = cell_polygons(part, grid)
    merged = quads[0]
    assert merged[1][0] - merged[0][0] == pytest.approx(60.0)


def test_cell_polygons_rotated_grid():
    rows = [make_line("row", (0, 30), 5.0, 1)]
    cols = [make_line("col", (30, 0), 5.0, 1)]
    grid = build_grid(rows, cols, (60, 60))
    part = CellPartition(2, 2, [PartitionCell(0, 0, 0, 0), PartitionCell(0, 0, 1, 1),
                                PartitionCell(1, 1, 0, 0), PartitionCell(1, 1, 1, 1)])
    quads = cell_polygons(part, grid)
    edge = quads[0][2] - quads[0][3]  # bottom edge of top-left cell follows the row line
    angle = np.degrees(np.arctan2(-edge[1], edge[0]))
    assert angle == pytest.approx(5.0, abs=1e-6)


# -- full round trip ----------------------------------------------------------------


@pytest.mark.parametrize("spans", [(), ((0, 0, 1, 2),), ((0, 1, 2, 1), (2, 0, 1, 2))])
def test_round_trip_structure_teds_exact(spans):
    ann = simple_annotation(3, 3, size=(200, 200), spans=spans)
    q = assign_query_labels(ann.row_bands, ann.col_bands, 50, 50,
                            ann.image_size, ann.table_quad)
    heads = targets_to_head_arrays(q, build_vertex_targets(ann, q))
    tree, part, grid = decode_table(heads, ann.image_size, bounds=ann.table_quad)
    from trust.labels import annotation_to_tree
    assert teds(tree, annotation_to_tree(ann), "structure") == 1.0


def test_round_trip_rotated():
    ann = simple_annotation(3, 3, size=(200, 200), spans=((0, 0, 1, 2),))
    rot = rotate_annotation(ann, 6.0)
    q = assign_query_labels(rot.row_bands, rot.col_bands, 50, 50,
                            rot.image_size, rot.table_quad)
    heads = targets_to_head_arrays(q, build_vertex_targets(rot, q))
    tree, part, grid = decode_table(heads, rot.image_size, bounds=rot.table_quad)
    from trust.labels import annotation_to_tree
    assert teds(tree, annotation_to_tree(rot), "structure") == 1.0
