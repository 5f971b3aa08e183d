"""A* over the universal tree overlaid with option edges.

Vertices are node ids of the universal CAT plus a virtual ``GOAL`` vertex.
Edges, cheapest first:

* option edges ``i -> t`` for every initiation node ``i`` and termination
  node ``t`` of an option, cost 1.  An option is usable from a vertex when
  the vertex or one of its ancestors is in the initiation set;
* lifted edges between same-level ancestors of an option edge's endpoints,
  cost ``1 + (depth_max - level)``, down to the level where the two
  ancestors coincide;
* tree edges parent <-> child, cost ``1 + depth_max``;
* goal edges: nodes lying inside the goal reach ``GOAL`` for free, options
  terminating on this task's goal reach it at option cost, and any other
  node that overlaps the goal reaches it at the cost of the tree edges it
  would take to descend to the goal's extent.

The heuristic is the tree distance (sigma) to the nearest goal node.  It is
not admissible, so search is best-first with completeness as the only
guarantee.  Runs of non-option edges in the found path collapse into option
signatures that still have to be learned.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterator

from .cat import CAT, CATError, Node, sigma_distance
from .core import Goal
from .options import GOAL_NODE, AbstractOption, OptionModel, OptionSignature

OPTION = "option"
LIFTED = "lifted"
TREE = "tree"
GOAL_INSIDE = "goal"
BRIDGE = "bridge"


class DanglingEndpoint(CATError):
    pass


class PlanInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    cost: float
    kind: str
    option: AbstractOption | None = None


@dataclass
class OptionPlan:
    steps: list
    start: str
    goal: Goal | None
    cost: float = 0.0

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def learned(self) -> bool:
        return all(isinstance(s, AbstractOption) for s in self.steps)

    def describe(self, cat: CAT | None = None) -> list[str]:
        return [s.describe(cat) for s in self.steps]


def _bridge_levels(box: tuple, goal_box: dict) -> int:
    """Bisections needed before a node overlapping the goal shrinks to the goal's extent."""
    levels = 1
    for i, c in goal_box.items():
        lo, hi = box[i]
        if len(c) == 1:
            n = int(hi) - int(lo)
            hits = sum(1 for k in range(int(lo), int(hi)) if k in c[0])
        else:
            n = hi - lo
            hits = min(hi, c[1]) - max(lo, c[0])
        if hits > 0 and n > hits:
            levels = max(levels, math.ceil(math.log2(n / hits)))
    return levels


def _goal_relation(box: tuple, goal_box: dict) -> int:
    """2 when ``box`` lies inside the goal, 1 when it overlaps it, 0 when disjoint."""
    inside = True
    for i, c in goal_box.items():
        lo, hi = box[i]
        if len(c) == 1:
            codes = range(int(lo), int(hi))
            hits = sum(1 for k in codes if k in c[0])
            if hits == 0:
                return 0
            if hits < len(codes):
                inside = False
        else:
            glo, ghi = c
            if not (lo < ghi and glo < hi):
                return 0
            if lo < glo or hi > ghi:
                inside = False
    return 2 if inside else 1


class PlannableCAT:
    """Search graph over ``cat`` for one goal."""

    def __init__(self, cat: CAT, model: OptionModel | None, goal: Goal | None = None, *,
                 option_cost: float = 1.0, weights: tuple = (0.5, 0.5)):
        self.cat = cat
        self.goal = goal
        self.weights = weights
        self.dmax = cat.max_depth
        self.tree_cost = 1.0 + self.dmax
        self.option_edges: dict[str, list[Edge]] = {}
        self.lifted_edges: dict[str, list[Edge]] = {}
        self._goal_box = goal.code_box(cat.schema) if goal is not None else None
        self._relation: dict[str, int] = {}
        for o in (model or ()):
            usable = [t for t in o.termination if t != GOAL_NODE or (goal is not None and o.goal == goal)]
            for node_id in list(o.initiation) + [t for t in usable if t != GOAL_NODE]:
                if node_id not in cat:
                    raise DanglingEndpoint(f"option {o.option_id} endpoint {node_id} is not in the CAT")
            for i in o.initiation:
                for t in usable:
                    self.option_edges.setdefault(i, []).append(Edge(i, t, option_cost, OPTION, o))
                    if t != GOAL_NODE:
                        self._lift(cat.node(i), cat.node(t), o)

    def _lift(self, a: Node, b: Node, o: AbstractOption) -> None:
        level = min(a.depth, b.depth)
        if a.depth == b.depth:
            level -= 1
        pa, pb = a, b
        while level >= 0:
            while pa.depth > level:
                pa = pa.parent
            while pb.depth > level:
                pb = pb.parent
            if pa is pb:
                break
            cost = 1.0 + (self.dmax - level)
            self.lifted_edges.setdefault(pa.id, []).append(Edge(pa.id, pb.id, cost, LIFTED, o))
            level -= 1

    def relation(self, node: Node) -> int:
        if self._goal_box is None:
            return 0
        got = self._relation.get(node.id)
        if got is None:
            got = self._relation[node.id] = _goal_relation(node.box, self._goal_box)
        return got

    def is_goal_node(self, node: Node) -> bool:
        return self.relation(node) == 2

    def goal_nodes(self) -> list[Node]:
        """Maximal nodes inside the goal, or the leaves overlapping it when none are inside."""
        inside, touching = [], []
        for n in self.cat.nodes.values():
            r = self.relation(n)
            if r == 2 and (n.parent is None or self.relation(n.parent) != 2):
                inside.append(n)
            elif r == 1 and n.split is None:
                touching.append(n)
        return inside or touching

    def edges(self, node_id: str, learned_only: bool = False, tree_only: bool = False) -> Iterator[Edge]:
        if node_id == GOAL_NODE:
            return
        node = self.cat.node(node_id)
        rel = self.relation(node)
        if rel == 2:
            yield Edge(node_id, GOAL_NODE, 0.0, GOAL_INSIDE)
        if not tree_only:
            anc = node
            while anc is not None:
                for e in self.option_edges.get(anc.id, ()):
                    yield Edge(node_id, e.dst, e.cost, OPTION, e.option) if anc is not node else e
                anc = anc.parent
        if learned_only:
            return
        if rel == 1:
            # as if walking tree edges down to a goal leaf that has not been split out yet
            yield Edge(node_id, GOAL_NODE, self.tree_cost * _bridge_levels(node.box, self._goal_box), BRIDGE)
        if not tree_only:
            yield from self.lifted_edges.get(node_id, ())
        if node.parent is not None:
            yield Edge(node_id, node.parent.id, self.tree_cost, TREE)
        for child in node.children.values():
            yield Edge(node_id, child.id, self.tree_cost, TREE)


def build_plannable_cat(cat: CAT, model: OptionModel, goal: Goal | None = None, **kw) -> PlannableCAT:
    return PlannableCAT(cat, model, goal, **kw)


def astar(pcat: PlannableCAT, start: str, *, learned_only: bool = False, tree_only: bool = False,
          use_heuristic: bool = True) -> tuple[list[Edge], float] | None:
    """Best-first search from ``start`` to ``GOAL``; returns ``(edges, cost)`` or None."""
    cat = pcat.cat
    dmax = pcat.dmax
    goals = pcat.goal_nodes() if use_heuristic else []
    hmemo: dict[str, float] = {GOAL_NODE: 0.0}

    def h(v: str) -> float:
        got = hmemo.get(v)
        if got is None:
            node = cat.node(v)
            got = min((sigma_distance(cat, node, g, pcat.weights) for g in goals), default=0.0)
            hmemo[v] = got
        return got

    counter = 0
    g_cost = {start: 0.0}
    came: dict[str, Edge | None] = {start: None}
    heap = [(h(start), dmax - cat.node(start).depth, counter, start)]
    closed = set()
    while heap:
        _, _, _, v = heapq.heappop(heap)
        if v in closed:
            continue
        if v == GOAL_NODE:
            path = []
            while came[v] is not None:
                e = came[v]
                path.append(e)
                v = e.src
            path.reverse()
            return path, g_cost[GOAL_NODE]
        closed.add(v)
        gv = g_cost[v]
        for e in pcat.edges(v, learned_only=learned_only, tree_only=tree_only):
            if e.dst in closed:
                continue
            ng = gv + e.cost
            if ng < g_cost.get(e.dst, float("inf")):
                g_cost[e.dst] = ng
                came[e.dst] = e
                counter += 1
                depth = dmax if e.dst == GOAL_NODE else cat.node(e.dst).depth
                heapq.heappush(heap, (ng + h(e.dst), dmax - depth, counter, e.dst))
    return None


def refine_plan(raw_path: list[Edge], model: OptionModel | None = None, goal: Goal | None = None,
                start: str | None = None) -> OptionPlan:
    """Collapse maximal runs of non-option edges into signatures; keep option edges as options."""
    steps: list = []
    run: list[Edge] = []

    def flush():
        if not run:
            return
        src = run[0].src
        dst = run[-1].dst
        if dst == GOAL_NODE:
            steps.append(OptionSignature(frozenset({src}), frozenset({GOAL_NODE}), goal))
        elif dst != src:
            steps.append(OptionSignature(frozenset({src}), frozenset({dst})))
        run.clear()

    for e in raw_path:
        if e.kind == OPTION:
            flush()
            steps.append(e.option)
        elif e.kind == GOAL_INSIDE:
            flush()  # the previous vertex already lies inside the goal
        else:
            run.append(e)
    flush()
    cost = sum(e.cost for e in raw_path)
    begin = start if start is not None else (raw_path[0].src if raw_path else "")
    return OptionPlan(steps, begin, goal, cost)


def compute_option_plan(model: OptionModel, cat: CAT, start: Node | str, goal: Goal, *,
                        learned_only: bool = False, weights: tuple = (0.5, 0.5),
                        pcat: PlannableCAT | None = None) -> OptionPlan | None:
    """Plan from abstract state ``start`` to ``goal``; None when no path exists."""
    start_id = start if isinstance(start, str) else start.id
    pcat = pcat if pcat is not None else PlannableCAT(cat, model, goal, weights=weights)
    if pcat.is_goal_node(cat.node(start_id)):
        return OptionPlan([], start_id, goal, 0.0)
    found = astar(pcat, start_id, learned_only=learned_only)
    if found is None:
        return None
    path, cost = found
    if not learned_only:
        tree = astar(pcat, start_id, tree_only=True, use_heuristic=False)
        if tree is not None and tree[1] < cost:
            path, cost = tree
    return refine_plan(path, model, goal, start_id)


def invent_option_signature(cat: CAT, state, goal: Goal) -> OptionSignature:
    return OptionSignature(frozenset({cat.lookup(state).id}), frozenset({GOAL_NODE}), goal)


def _covered(cat: CAT, node_id: str, targets: frozenset) -> bool:
    node = cat.node(node_id)
    return any(n.id in targets for n in node.ancestors())


def validate_plan(plan: OptionPlan, cat: CAT, model: OptionModel | None = None) -> None:
    """Raise :class:`PlanInvalid` unless the plan is connected from its start to its goal.

    A termination node connects to the next step when it, or one of its
    ancestors, is in that step's initiation set.
    """
    pcat = PlannableCAT(cat, None, plan.goal)
    if not plan.steps:
        if plan.goal is None or not pcat.is_goal_node(cat.node(plan.start)):
            raise PlanInvalid("empty plan whose start is not inside the goal")
        return
    members = set(map(id, model)) if model is not None else None
    prev_term = frozenset({plan.start})
    for k, step in enumerate(plan.steps):
        if isinstance(step, AbstractOption) and members is not None and id(step) not in members:
            raise PlanInvalid(f"step {k} uses an option missing from the model")
        if GOAL_NODE in prev_term:
            raise PlanInvalid(f"step {k} follows a step that already ends at the goal")
        for t in prev_term:
            if not _covered(cat, t, step.initiation):
                raise PlanInvalid(f"step {k}: {t} is not covered by the initiation set")
        prev_term = step.termination
    if GOAL_NODE not in prev_term:
        if not all(pcat.is_goal_node(cat.node(t)) for t in prev_term):
            raise PlanInvalid("the last step does not end inside the goal")
