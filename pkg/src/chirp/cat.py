"""Conditional abstraction trees.

Every node is an abstract state: one half-open interval ``[lo, hi)`` per
variable (discrete variables use value codes, so ``{3, 4}`` of ``0..4`` is
``[3, 5)``).  Refining a leaf bisects all of its splittable variables at once;
its up-to-``2**m`` children are materialized lazily, on the first lookup that
lands in them.

Node ids encode the path from the root (``"r.3.1"``).  Because the split rule
depends only on a node's own box, two trees grown independently from the same
schema agree on the id of every region they share, which is what lets options,
the universal tree and the planner refer to the same abstract states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from .core import Schema, SchemaError, VariableSpec

ROOT_ID = "r"
_CACHE_LIMIT = 200_000


class CATError(Exception):
    pass


class Unsplittable(CATError):
    pass


class LineageError(CATError):
    pass


class ForeignNode(CATError):
    pass


class Node:
    __slots__ = ("id", "box", "parent", "depth", "split", "children")

    def __init__(self, node_id: str, box: tuple, parent: "Node | None", depth: int):
        self.id = node_id
        self.box = box
        self.parent = parent
        self.depth = depth
        self.split: tuple | None = None
        self.children: dict[int, Node] = {}

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def contains(self, codes) -> bool:
        for (lo, hi), v in zip(self.box, codes):
            if not lo <= v < hi:
                return False
        return True

    def ancestors(self) -> Iterator["Node"]:
        """Self first, then parents up to the root."""
        n = self
        while n is not None:
            yield n
            n = n.parent

    def __repr__(self):
        return f"Node({self.id!r}, depth={self.depth})"


class CAT:
    """A conditional abstraction tree over ``schema``.

    ``resolution`` is the minimum width of a continuous interval: intervals no
    wider than it are atomic.
    """

    def __init__(self, schema: Schema | Iterable[VariableSpec], resolution: float = 1.0):
        self.schema = schema if isinstance(schema, Schema) else Schema(schema)
        if not len(self.schema):
            raise SchemaError("a CAT needs at least one variable")
        self.resolution = float(resolution)
        box = tuple((spec.low, spec.high) for spec in self.schema)
        self.root = Node(ROOT_ID, box, None, 0)
        self.nodes: dict[str, Node] = {ROOT_ID: self.root}
        self.max_depth = 0
        self._identity = self.schema.identity_codes
        self._cache: dict = {}
        self._continuous = tuple(s.is_continuous for s in self.schema)

    # -- queries -------------------------------------------------------------

    def lookup(self, state) -> Node:
        """The unique leaf containing ``state`` (materializing it if needed)."""
        cache = self._cache
        leaf = cache.get(state)
        if leaf is not None:
            return leaf
        x = state if self._identity else self.schema.encode(state)
        node = self.root
        while node.split is not None:
            code = 0
            bit = 1
            for i, mid in node.split:
                if x[i] >= mid:
                    code |= bit
                bit <<= 1
            child = node.children.get(code)
            if child is None:
                child = self._spawn(node, code)
            node = child
        if len(cache) >= _CACHE_LIMIT:
            cache.clear()
        cache[state] = node
        return node

    abstract_state_of = lookup

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise ForeignNode(f"node {node_id!r} is not in this CAT") from None

    def resolve(self, node: Node | str) -> Node:
        node_id = node if isinstance(node, str) else node.id
        return self.node(node_id)

    def leaves(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.split is None]

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id) -> bool:
        if isinstance(node_id, Node):
            node_id = node_id.id
        return node_id in self.nodes

    def splittable_vars(self, node: Node) -> list[int]:
        out = []
        for i, (lo, hi) in enumerate(node.box):
            if self._continuous[i]:
                if hi - lo > self.resolution:
                    out.append(i)
            elif hi - lo > 1:
                out.append(i)
        return out

    def region_contains(self, node: Node, state) -> bool:
        x = state if self._identity else self.schema.encode(state)
        return node.contains(x)

    def describe(self, node: Node | str) -> str:
        """Human-readable intervals, e.g. ``x:[2.5,5.0) l:{3,4}``."""
        node = self.resolve(node)
        parts = []
        for spec, (lo, hi) in zip(self.schema, node.box):
            if spec.is_continuous:
                parts.append(f"{spec.name}:[{lo:g},{hi:g})")
            else:
                vals = ",".join(str(v) for v in spec.values[int(lo):int(hi)])
                parts.append(f"{spec.name}:{{{vals}}}")
        return " ".join(parts)

    # -- growth --------------------------------------------------------------

    def _split_points(self, node: Node) -> tuple:
        split = []
        for i in self.splittable_vars(node):
            lo, hi = node.box[i]
            if self._continuous[i]:
                mid = (lo + hi) / 2.0
            else:
                mid = lo + (hi - lo + 1) // 2
            split.append((i, mid))
        return tuple(split)

    def _spawn(self, node: Node, code: int) -> Node:
        box = list(node.box)
        bit = 1
        for i, mid in node.split:
            lo, hi = box[i]
            box[i] = (mid, hi) if code & bit else (lo, mid)
            bit <<= 1
        child = Node(f"{node.id}.{code}", tuple(box), node, node.depth + 1)
        node.children[code] = child
        self.nodes[child.id] = child
        if child.depth > self.max_depth:
            self.max_depth = child.depth
        return child

    def refine(self, leaf: Node | str, materialize: bool = False) -> "CAT":
        """Split ``leaf``; its children appear on demand unless ``materialize``."""
        leaf = self.resolve(leaf)
        if leaf.split is not None:
            raise CATError(f"{leaf.id} is not a leaf")
        split = self._split_points(leaf)
        if not split:
            raise Unsplittable(f"unsplittable: every interval of {leaf.id} is atomic")
        leaf.split = split
        self._cache.clear()
        if materialize:
            self.materialize_children(leaf)
        return self

    def materialize_children(self, node: Node) -> list[Node]:
        if node.split is None:
            return []
        for code in range(1 << len(node.split)):
            if code not in node.children:
                self._spawn(node, code)
        return [node.children[c] for c in sorted(node.children)]

    def child_for(self, node: Node, code: int) -> Node:
        child = node.children.get(code)
        return child if child is not None else self._spawn(node, code)

    def copy(self) -> "CAT":
        other = CAT.__new__(CAT)
        other.schema = self.schema
        other.resolution = self.resolution
        other._identity = self._identity
        other._continuous = self._continuous
        other._cache = {}
        other.max_depth = self.max_depth
        other.nodes = {}
        for node in self.nodes.values():
            parent = other.nodes[node.parent.id] if node.parent is not None else None
            twin = Node(node.id, node.box, parent, node.depth)
            twin.split = node.split
            if parent is not None:
                parent.children[int(node.id.rsplit(".", 1)[1])] = twin
            other.nodes[twin.id] = twin
        other.root = other.nodes[ROOT_ID]
        return other

    def is_refinement_of(self, other: "CAT") -> bool:
        """True when every node and split of ``other`` also exists here."""
        if self.schema != other.schema:
            return False
        for node_id, node in other.nodes.items():
            mine = self.nodes.get(node_id)
            if mine is None:
                return False
            if node.split is not None and mine.split is None:
                return False
        return True

    def ensure(self, node_id: str, on_refine=None) -> Node:
        """Return node ``node_id``, refining along its path if it does not exist yet.

        Ids are path-based and splits depend only on a node's box, so any id
        produced by a tree over the same schema can be rebuilt here.
        ``on_refine(leaf)`` is called before each split this causes.
        """
        got = self.nodes.get(node_id)
        if got is not None:
            return got
        parts = node_id.split(".")
        if parts[0] != ROOT_ID:
            raise ForeignNode(f"malformed node id {node_id!r}")
        node = self.root
        for part in parts[1:]:
            if node.split is None:
                if on_refine is not None:
                    on_refine(node)
                try:
                    self.refine(node)
                except Unsplittable:
                    raise ForeignNode(f"node {node_id!r} cannot exist in this CAT") from None
            code = int(part)
            if code >= 1 << len(node.split):
                raise ForeignNode(f"node {node_id!r} cannot exist in this CAT")
            node = self.child_for(node, code)
        return node

    def region_test(self, node_ids: Iterable[str]):
        """Predicate ``state -> bool``: does the state lie in any of the given nodes' regions?"""
        boxes = tuple(self.node(i).box for i in node_ids)
        identity = self._identity
        encode = self.schema.encode

        def inside(state) -> bool:
            x = state if identity else encode(state)
            for box in boxes:
                for (lo, hi), v in zip(box, x):
                    if not lo <= v < hi:
                        break
                else:
                    return True
            return False

        return inside

    # -- tree metrics --------------------------------------------------------

    def depth(self, a: Node | str, b: Node | str | None = None) -> int:
        """Depth of ``a`` from the root, or number of edges between ancestor ``a`` and ``b``."""
        a = self.resolve(a)
        if b is None:
            return a.depth
        b = self.resolve(b)
        return abs(b.depth - a.depth)

    def subtree_depth(self, node: Node) -> int:
        best = 0
        stack = [(node, 0)]
        while stack:
            n, d = stack.pop()
            if d > best:
                best = d
            for c in n.children.values():
                stack.append((c, d + 1))
        return best


# -- free functions ------------------------------------------------------------------


def new_cat(variable_specs, resolution: float = 1.0) -> CAT:
    return CAT(variable_specs, resolution)


def abstract_state_of(cat: CAT, state) -> Node:
    return cat.lookup(state)


def refine(cat: CAT, leaf: Node | str) -> CAT:
    return cat.refine(leaf)


def lca(cat: CAT, a: Node | str, b: Node | str) -> Node:
    a = cat.resolve(a)
    b = cat.resolve(b)
    while a.depth > b.depth:
        a = a.parent
    while b.depth > a.depth:
        b = b.parent
    while a is not b:
        a = a.parent
        b = b.parent
    return a


def sigma_distance(cat: CAT, a: Node | str, b: Node | str, weights: tuple[float, float] = (0.5, 0.5)) -> float:
    """Context-independent distance: weighted LCA height plus mean depth below the LCA."""
    a = cat.resolve(a)
    b = cat.resolve(b)
    common = lca(cat, a, b)
    w1, w2 = weights
    term1 = cat.max_depth - common.depth + 1
    term2 = ((a.depth - common.depth) + (b.depth - common.depth)) / 2.0
    return w1 * term1 + w2 * term2


def merge_cat(universal: CAT, option_cat: CAT) -> CAT:
    """Adopt ``option_cat`` as the new universal tree.

    ``option_cat`` must descend from ``universal`` by refinement only.
    """
    if not option_cat.is_refinement_of(universal):
        raise LineageError("option CAT is not a refinement of the universal CAT")
    return option_cat.copy()


def union_cat(a: CAT, b: CAT) -> CAT:
    """Smallest tree containing every node and split of both ``a`` and ``b``."""
    if a.schema != b.schema:
        raise LineageError("CATs over different schemas")
    out = a.copy()
    for node_id, node in b.nodes.items():
        mine = out.nodes.get(node_id)
        if mine is None:
            parent = out.nodes[node.parent.id]
            if parent.split is None:
                out.refine(parent)
            mine = out.child_for(parent, int(node_id.rsplit(".", 1)[1]))
        if node.split is not None and mine.split is None:
            out.refine(mine)
    out._cache.clear()
    return out


# -- context-specific trees ----------------------------------------------------------


@dataclass(frozen=True)
class CCAT:
    """The nodes of ``cat`` consistent with fixed values of the context variables."""

    cat: CAT
    retained: frozenset
    context: tuple  # ((var_index, code), ...)

    def __contains__(self, node) -> bool:
        return (node if isinstance(node, str) else node.id) in self.retained

    def subtree_depth(self, node: Node, _memo: dict | None = None) -> int:
        """Maximum depth of the retained subtree hanging from ``node`` (0 for a retained leaf)."""
        memo = self.__dict__.setdefault("_depth_memo", {}) if _memo is None else _memo
        got = memo.get(node.id)
        if got is not None:
            return got
        best = 0
        for child in node.children.values():
            if child.id in self.retained:
                d = 1 + self.subtree_depth(child, memo)
                if d > best:
                    best = d
        memo[node.id] = best
        return best


def _context_indices(cat: CAT, context_vars) -> tuple[int, ...]:
    out = []
    for v in context_vars:
        out.append(cat.schema.index_of(v) if isinstance(v, str) else int(v))
    return tuple(sorted(set(out)))


def make_ccat(cat: CAT, state, context_vars) -> CCAT:
    idx = _context_indices(cat, context_vars)
    x = state if cat._identity else cat.schema.encode(state)
    context = tuple((i, x[i]) for i in idx)
    retained = []
    stack = [cat.root]
    while stack:
        n = stack.pop()
        retained.append(n.id)
        for child in n.children.values():
            ok = True
            for i, v in context:
                lo, hi = child.box[i]
                if not lo <= v < hi:
                    ok = False
                    break
            if ok:
                stack.append(child)
    return CCAT(cat, frozenset(retained), context)


def delta_distance(c1: CCAT, c2: CCAT) -> int:
    """Context-specific distance between two C-CATs of the same tree."""
    if c1.cat is not c2.cat:
        raise LineageError("C-CATs come from different CATs")
    return _delta(c1.cat.root, c1, c2)


def _delta(node: Node, c1: CCAT, c2: CCAT) -> int:
    in1 = node.id in c1.retained
    in2 = node.id in c2.retained
    if in1 and not in2:
        return c1.subtree_depth(node)
    if in2 and not in1:
        return c2.subtree_depth(node)
    if not in1:
        return 0
    total = 0
    for child in node.children.values():
        total += _delta(child, c1, c2)
    return total


# -- text format ---------------------------------------------------------------------


def _spec_json(spec: VariableSpec) -> str:
    if spec.is_continuous:
        return json.dumps({"name": spec.name, "kind": spec.kind, "low": spec.low, "high": spec.high})
    return json.dumps({"name": spec.name, "kind": spec.kind, "values": list(spec.values)})


def _spec_from_json(text: str) -> VariableSpec:
    d = json.loads(text)
    if d["kind"] == "continuous":
        return VariableSpec.continuous(d["name"], d["low"], d["high"])
    return VariableSpec.discrete(d["name"], d["values"])


def format_cat(cat: CAT) -> str:
    """Serialize as text.

    ::

        cat/1
        resolution <float>
        var <json VariableSpec>          (one per variable, schema order)
        node <id> <parent id or -> <split 0|1> <lo:hi> ...   (creation order)
    """
    lines = ["cat/1", f"resolution {cat.resolution!r}"]
    lines += [f"var {_spec_json(s)}" for s in cat.schema]
    for node in cat.nodes.values():
        parent = node.parent.id if node.parent is not None else "-"
        box = " ".join(f"{lo!r}:{hi!r}" for lo, hi in node.box)
        lines.append(f"node {node.id} {parent} {int(node.split is not None)} {box}")
    return "\n".join(lines) + "\n"


def parse_cat(text: str) -> CAT:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "cat/1":
        raise CATError("not a cat/1 document")
    resolution = 1.0
    specs = []
    node_lines = []
    for ln in lines[1:]:
        head, _, rest = ln.partition(" ")
        if head == "resolution":
            resolution = float(rest)
        elif head == "var":
            specs.append(_spec_from_json(rest))
        elif head == "node":
            node_lines.append(rest.split())
        else:
            raise CATError(f"unknown line {ln!r}")
    cat = CAT(Schema(specs), resolution)
    for fields in node_lines:
        node_id, parent_id, split = fields[0], fields[1], fields[2] == "1"
        if parent_id == "-":
            node = cat.root
        else:
            parent = cat.node(parent_id)
            if parent.split is None:
                parent.split = cat._split_points(parent)
            node = cat.child_for(parent, int(node_id.rsplit(".", 1)[1]))
            if node.id != node_id:
                raise CATError(f"node id mismatch: {node.id} vs {node_id}")
        if split and node.split is None:
            node.split = cat._split_points(node)
    return cat
