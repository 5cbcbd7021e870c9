"""Tree-edit-distance based similarity between HTML-like table trees.

Trees are rooted, ordered and labeled with a small tag subset
(table/thead/tbody/tr/td); td nodes carry rowspan/colspan and optional
text. The distance is the classic ordered-tree edit distance computed
with the keyroot/forest dynamic program; the similarity normalizes by
the larger tree's node count. Structure mode ignores cell text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Optional

ALLOWED_TAGS = ("table", "thead", "tbody", "tr", "td")


class HtmlParseError(ValueError):
    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at offset {pos})")
        self.pos = pos


@dataclass
class TableTree:
    """A node of the table tree; the root node stands for the whole tree."""

    tag: str
    rowspan: int = 1
    colspan: int = 1
    text: str = ""
    children: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, TableTree):
            return NotImplemented
        return (self.tag == other.tag and self.rowspan == other.rowspan
                and self.colspan == other.colspan and self.text == other.text
                and self.children == other.children)

    def walk(self) -> Iterator["TableTree"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def node_count(self) -> int:
        return sum(1 for _ in self.walk())


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _unescape(text: str) -> str:
    return text.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")


def serialize_table_html(tree: TableTree) -> str:
    """Canonical serialization: lowercase tags, spans only when > 1,
    double-quoted attributes, no whitespace text nodes."""
    parts: list[str] = []

    def emit(node: TableTree) -> None:
        attrs = ""
        if node.tag == "td":
            if node.rowspan > 1:
                attrs += f' rowspan="{node.rowspan}"'
            if node.colspan > 1:
                attrs += f' colspan="{node.colspan}"'
        parts.append(f"<{node.tag}{attrs}>")
        if node.tag == "td" and node.text:
            parts.append(_escape(node.text))
        for c in node.children:
            emit(c)
        parts.append(f"</{node.tag}>")

    emit(tree)
    return "".join(parts)


_TAG_RE = re.compile(r"<(/?)([a-zA-Z]+)((?:\s+[a-zA-Z]+\s*=\s*\"[^\"]*\")*)\s*(/?)>")
_ATTR_RE = re.compile(r"([a-zA-Z]+)\s*=\s*\"([^\"]*)\"")

_ALLOWED_CHILDREN = {
    "table": {"thead", "tbody", "tr"},
    "thead": {"tr"},
    "tbody": {"tr"},
    "tr": {"td"},
    "td": set(),
}


def parse_table_html(text: str) -> TableTree:
    """Parse the canonical table-HTML subset into a TableTree."""
    pos = 0
    stack: list[TableTree] = []
    root: Optional[TableTree] = None
    n = len(text)
    while pos < n:
        if text[pos] != "<":
            end = text.find("<", pos)
            if end == -1:
                raise HtmlParseError("text outside any element", pos)
            raw = text[pos:end]
            if not stack:
                if raw.strip():
                    raise HtmlParseError("text outside any element", pos)
            elif stack[-1].tag == "td":
                stack[-1].text += _unescape(raw)
            elif raw.strip():
                raise HtmlParseError(f"text content only allowed inside td, found {raw.strip()!r}", pos)
            pos = end
            continue
        m = _TAG_RE.match(text, pos)
        if not m:
            raise HtmlParseError("malformed tag", pos)
        closing, tag, attr_str, selfclose = m.group(1), m.group(2).lower(), m.group(3), m.group(4)
        if tag not in ALLOWED_TAGS:
            raise HtmlParseError(f"unknown tag <{tag}>", pos)
        if closing:
            if not stack:
                raise HtmlParseError(f"unmatched closing tag </{tag}>", pos)
            if stack[-1].tag != tag:
                raise HtmlParseError(f"mismatched closing tag </{tag}>, open element is <{stack[-1].tag}>", pos)
            node = stack.pop()
            if not stack:
                if pos + len(m.group(0)) < n and text[pos + len(m.group(0)):].strip():
                    raise HtmlParseError("content after document root", pos + len(m.group(0)))
                root = node
        else:
            node = TableTree(tag=tag)
            for am in _ATTR_RE.finditer(attr_str):
                name, value = am.group(1).lower(), am.group(2)
                if name not in ("rowspan", "colspan") or tag != "td":
                    raise HtmlParseError(f"unsupported attribute '{name}' on <{tag}>", pos)
                if not value.isdigit() or int(value) < 1:
                    raise HtmlParseError(f"invalid {name} value {value!r}", pos)
                setattr(node, name, int(value))
            if not stack:
                if tag != "table":
                    raise HtmlParseError(f"root element must be <table>, got <{tag}>", pos)
                if root is not None:
                    raise HtmlParseError("multiple root elements", pos)
            else:
                if tag not in _ALLOWED_CHILDREN[stack[-1].tag]:
                    raise HtmlParseError(f"<{tag}> not allowed inside <{stack[-1].tag}>", pos)
            if selfclose:
                if stack:
                    stack[-1].children.append(node)
                else:
                    root = node
            else:
                if stack:
                    stack[-1].children.append(node)
                stack.append(node)
        pos = m.end()
    if stack:
        raise HtmlParseError(f"unclosed element <{stack[-1].tag}>", n)
    if root is None:
        raise HtmlParseError("no table element found", 0)
    return root


def parse_structure_tokens(tokens: list[str]) -> TableTree:
    """Parse a PubTabNet-style structure token list (joined verbatim)."""
    return parse_table_html("".join(tokens))


# -- cost model and distance ------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_string_distance(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


@dataclass
class CostModel:
    """Unit insert/delete; substitution per tag/span/text agreement."""

    mode: str = "structure"

    def __post_init__(self):
        if self.mode not in ("full", "structure"):
            raise ValueError(f"unknown cost mode '{self.mode}'")

    def insert_cost(self, node: TableTree) -> float:
        return 1.0

    def delete_cost(self, node: TableTree) -> float:
        return 1.0

    def substitute_cost(self, a: TableTree, b: TableTree) -> float:
        if a.tag == b.tag and a.rowspan == b.rowspan and a.colspan == b.colspan:
            if self.mode == "structure" or a.text == b.text:
                return 0.0
            if a.tag == "td":
                return normalized_string_distance(a.text, b.text)
        return 1.0


class _Annotated:
    """Postorder node list with leftmost-leaf-descendant indices and keyroots."""

    __slots__ = ("nodes", "lmds", "keyroots")

    def __init__(self, root: TableTree):
        nodes: list[TableTree] = []
        lmds: list[int] = []

        def visit(node: TableTree) -> int:
            first = None
            for c in node.children:
                li = visit(c)
                if first is None:
                    first = li
            nodes.append(node)
            lmd = first if first is not None else len(nodes) - 1
            lmds.append(lmd)
            return lmd

        visit(root)
        self.nodes = nodes
        self.lmds = lmds
        # keyroots: for each distinct lmd keep the highest postorder index
        last: dict[int, int] = {}
        for i, l in enumerate(lmds):
            last[l] = i
        self.keyroots = sorted(last.values())


def tree_edit_distance(a: TableTree, b: TableTree, cost: Optional[CostModel] = None) -> float:
    """Minimal-cost insert/delete/substitute script between ordered trees."""
    cost = cost or CostModel()
    ta, tb = _Annotated(a), _Annotated(b)
    an, bn = ta.nodes, tb.nodes
    al, bl = ta.lmds, tb.lmds
    na, nb = len(an), len(bn)
    treedists = [[0.0] * nb for _ in range(na)]
    sub = cost.substitute_cost
    ins = cost.insert_cost
    rem = cost.delete_cost

    for i in ta.keyroots:
        for j in tb.keyroots:
            m = i - al[i] + 2
            n = j - bl[j] + 2
            fd = [[0.0] * n for _ in range(m)]
            ioff = al[i] - 1
            joff = bl[j] - 1
            for x in range(1, m):
                fd[x][0] = fd[x - 1][0] + rem(an[x + ioff])
            for y in range(1, n):
                fd[0][y] = fd[0][y - 1] + ins(bn[y + joff])
            for x in range(1, m):
                fdx = fd[x]
                fdx1 = fd[x - 1]
                node_x = an[x + ioff]
                alx = al[x + ioff]
                for y in range(1, n):
                    if al[i] == alx and bl[j] == bl[y + joff]:
                        d = min(fdx1[y] + rem(node_x),
                                fdx[y - 1] + ins(bn[y + joff]),
                                fdx1[y - 1] + sub(node_x, bn[y + joff]))
                        fdx[y] = d
                        treedists[x + ioff][y + joff] = d
                    else:
                        p = alx - 1 - ioff
                        q = bl[y + joff] - 1 - joff
                        fdx[y] = min(fdx1[y] + rem(node_x),
                                     fdx[y - 1] + ins(bn[y + joff]),
                                     fd[p][q] + treedists[x + ioff][y + joff])
    return treedists[-1][-1]


def teds(a: TableTree, b: TableTree, mode: str = "structure") -> float:
    """Similarity 1 - TED / max(node counts), clamped to [0, 1].

    The distance can exceed the larger node count for structurally
    incompatible trees (ancestry constraints force extra edits), so the
    lower bound is clamped.
    """
    if a is None or b is None:
        raise ValueError("teds requires two non-empty trees")
    dist = tree_edit_distance(a, b, CostModel(mode=mode))
    denom = max(a.node_count(), b.node_count())
    return max(0.0, 1.0 - dist / denom)
