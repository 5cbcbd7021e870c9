import itertools

import numpy as np
import pytest

from trust.teds import (CostModel, HtmlParseError, TableTree, parse_structure_tokens,
                        parse_table_html, serialize_table_html, teds, tree_edit_distance)


# -- independent oracle: naive recursive forest edit distance -----------------


def forest_size(forest):
    return sum(t.node_count() for t in forest)


def brute_force_ted(a, b, cost):
    """Naive recursion over ordered forests (memoized on forest identity);
    independent of the keyroot dynamic program under test."""
    cache = {}

    def key(forest):
        return tuple(serialize_table_html(t) for t in forest)

    def fdist(f1, f2):
        if not f1 and not f2:
            return 0.0
        if not f1:
            return forest_size(f2)
        if not f2:
            return forest_size(f1)
        k = (key(f1), key(f2))
        if k in cache:
            return cache[k]
        t1, r1 = f1[0], f1[1:]
        t2, r2 = f2[0], f2[1:]
        result = min(
            cost.delete_cost(t1) + fdist(tuple(t1.children) + r1, f2),
            cost.insert_cost(t2) + fdist(f1, tuple(t2.children) + r2),
            cost.substitute_cost(t1, t2) + fdist(tuple(t1.children), tuple(t2.children)) + fdist(r1, r2),
        )
        cache[k] = result
        return result

    return fdist((a,), (b,))


def td(colspan=1, rowspan=1, text=""):
    return TableTree("td", rowspan=rowspan, colspan=colspan, text=text)


def tr(*cells):
    return TableTree("tr", children=list(cells))


def table(*rows, body=True):
    if body:
        return TableTree("table", children=[TableTree("tbody", children=list(rows))])
    return TableTree("table", children=list(rows))


def enumerate_small_trees(max_nodes=6):
    """All canonical table trees up to max_nodes, with a span variant."""
    td_variants = [td(), td(colspan=2)]

    def forests_of_td(budget):
        yield ()
        if budget >= 1:
            for cell in td_variants:
                for rest in forests_of_td(budget - 1):
                    yield (cell,) + rest

    def trs(budget):
        # a tr node plus its cells
        for cells in forests_of_td(budget - 1):
            yield TableTree("tr", children=[TableTree(c.tag, c.rowspan, c.colspan, c.text) for c in cells])

    def forests_of_tr(budget):
        yield ()
        for used in range(1, budget + 1):
            for row in trs(used):
                if row.node_count() == used:
                    for rest in forests_of_tr(budget - used):
                        yield (row,) + rest

    trees = []
    for rows in forests_of_tr(max_nodes - 1):
        trees.append(TableTree("table", children=list(rows)))
    for rows in forests_of_tr(max_nodes - 2):
        if rows:
            trees.append(TableTree("table", children=[TableTree("tbody", children=list(rows))]))
    return [t for t in trees if t.node_count() <= max_nodes]


# -- parsing ------------------------------------------------------------------


def test_parse_minimal_table():
    tree = parse_table_html("<table><tr><td></td></tr></table>")
    assert tree.node_count() == 3
    assert tree.tag == "table" and tree.children[0].tag == "tr"


def test_parse_colspan_preserved_as_int():
    tree = parse_table_html('<table><tr><td colspan="2"></td></tr></table>')
    assert tree.children[0].children[0].colspan == 2


def test_parse_mismatched_closing_tag():
    with pytest.raises(HtmlParseError):
        parse_table_html("<table><tr></table></tr>")


def test_parse_unknown_tag_rejected():
    with pytest.raises(HtmlParseError):
        parse_table_html("<table><div></div></table>")


def test_parse_error_carries_position():
    with pytest.raises(HtmlParseError) as exc:
        parse_table_html("<table><tr><td></td></tr><oops>")
    assert exc.value.pos > 0


def test_parse_text_only_in_td():
    tree = parse_table_html("<table><tr><td>hi</td></tr></table>")
    assert tree.children[0].children[0].text == "hi"
    with pytest.raises(HtmlParseError):
        parse_table_html("<table>stray<tr><td></td></tr></table>")


def test_serialize_parse_roundtrip():
    t = table(tr(td(text="a&b"), td(colspan=3)), tr(td(rowspan=2), td()))
    assert parse_table_html(serialize_table_html(t)) == t


def test_serialize_spans_only_when_above_one():
    html = serialize_table_html(table(tr(td())))
    assert "rowspan" not in html and "colspan" not in html
    assert html == "<table><tbody><tr><td></td></tr></tbody></table>"


def test_parse_structure_tokens():
    tokens = ["<table>", "<tr>", "<td", ' colspan="2"', ">", "</td>", "</tr>", "</table>"]
    tree = parse_structure_tokens(tokens)
    assert tree.children[0].children[0].colspan == 2


# -- distance ---------------------------------------------------------------------


def test_identical_trees_distance_zero():
    t = table(tr(td(), td()), tr(td(), td()))
    assert tree_edit_distance(t, t) == 0.0


def test_single_td_deletion():
    a = TableTree("table", children=[tr(td(), td())])
    b = TableTree("table", children=[tr(td())])
    assert tree_edit_distance(a, b) == 1.0
    assert teds(a, b) == 1.0 - 1.0 / 4.0


def test_distance_matches_bruteforce_on_all_small_pairs():
    trees = enumerate_small_trees(6)
    # dedupe structurally identical enumerations
    trees = list({serialize_table_html(t): t for t in trees}.values())
    assert len(trees) > 20
    cost_s = CostModel(mode="structure")
    for a, b in itertools.product(trees, trees):
        fast = tree_edit_distance(a, b, cost_s)
        slow = brute_force_ted(a, b, cost_s)
        assert fast == pytest.approx(slow, abs=1e-12), (
            serialize_table_html(a), serialize_table_html(b))


def test_distance_matches_bruteforce_full_mode_with_texts():
    texts = ["", "a", "ab"]
    trees = []
    for t1, t2 in itertools.product(texts, texts):
        trees.append(table(tr(td(text=t1), td(text=t2)), body=False))
        trees.append(table(tr(td(text=t1)), tr(td(text=t2)), body=False))
    cost_f = CostModel(mode="full")
    for a, b in itertools.product(trees, trees):
        assert tree_edit_distance(a, b, cost_f) == pytest.approx(brute_force_ted(a, b, cost_f), abs=1e-12)


def random_tree(rng):
    total = int(rng.integers(1, 9))
    rows = []
    remaining = total
    while remaining > 0:
        cells = int(rng.integers(1, min(4, remaining) + 1))
        remaining -= cells
        row = tr(*[td(colspan=int(rng.integers(1, 3)),
                      rowspan=int(rng.integers(1, 3)),
                      text=("x" * int(rng.integers(0, 3)))) for _ in range(cells)])
        rows.append(row)
    return table(*rows, body=bool(rng.integers(0, 2)))


@pytest.mark.parametrize("mode", ["structure", "full"])
def test_teds_symmetry_and_bounds_random_pairs(mode):
    rng = np.random.default_rng(42)
    for _ in range(250):
        a, b = random_tree(rng), random_tree(rng)
        s_ab = teds(a, b, mode)
        s_ba = teds(b, a, mode)
        assert s_ab == pytest.approx(s_ba, abs=1e-12)
        assert 0.0 <= s_ab <= 1.0


def test_structure_mode_upper_bounds_full_mode():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b = random_tree(rng), random_tree(rng)
        assert teds(a, b, "structure") >= teds(a, b, "full") - 1e-12


def test_teds_identical_is_one():
    t = table(tr(td(text="q"), td()))
    assert teds(t, t, "structure") == 1.0
    assert teds(t, t, "full") == 1.0


def test_teds_text_difference_only_affects_full_mode():
    a = table(tr(td(text="alpha")))
    b = table(tr(td(text="beta")))
    assert teds(a, b, "structure") == 1.0
    assert teds(a, b, "full") < 1.0


def test_teds_empty_tree_rejected():
    with pytest.raises(ValueError):
        teds(None, table(tr(td())))
