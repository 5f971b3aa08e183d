"""Option invention from a learned policy.

A greedy rollout of the learned policy is cut into segments at *endpoints*:
transitions across which the context-specific tree changes (a context
variable flipped), and, inside each segment, abstract transitions that jump
unusually far in the tree.  Each segment becomes an option whose initiation
set is the segment's first abstract state plus the siblings of it visited in
the segment, and whose termination set is the next endpoint.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .cat import CAT, CCAT, LineageError, Node, delta_distance, make_ccat, sigma_distance
from .catrl import GreedyPolicy, QTable
from .core import Goal, Trajectory, goal_checker

GOAL_NODE = "goal"
_MAX_START_STATES = 20


class RolloutFailed(RuntimeError):
    pass


class InapplicableOption(RuntimeError):
    pass


@dataclass(frozen=True)
class OptionSignature:
    """Declarative ``<initiation, termination>`` pair; ``goal`` is set when termination is the task goal."""

    initiation: frozenset
    termination: frozenset
    goal: Goal | None = None

    def __post_init__(self):
        object.__setattr__(self, "initiation", frozenset(self.initiation))
        object.__setattr__(self, "termination", frozenset(self.termination))
        if not self.initiation or not self.termination:
            raise ValueError("signature endpoints must be non-empty")
        if GOAL_NODE in self.termination and self.goal is None:
            raise ValueError("a goal-terminated signature needs its goal")

    def describe(self, cat: CAT | None = None) -> str:
        return f"sig {_fmt_ids(self.initiation, cat)} -> {_fmt_ids(self.termination, cat, self.goal)}"


def _fmt_ids(ids, cat: CAT | None, goal: Goal | None = None) -> str:
    parts = []
    for i in sorted(ids):
        if i == GOAL_NODE:
            parts.append(f"GOAL[{goal.text() if goal else ''}]")
        elif cat is not None and i in cat:
            parts.append(f"{i}<{cat.describe(i)}>")
        else:
            parts.append(i)
    return "{" + ", ".join(parts) + "}"


@dataclass(eq=False)
class AbstractOption:
    """``<cat, initiation, termination, policy>`` with bookkeeping for fine-tuning.

    ``cat`` and ``q`` may be shared with sibling options invented from the
    same rollout; :meth:`own` makes private copies before anything mutates
    them.
    """

    cat: CAT
    initiation: frozenset
    termination: frozenset
    q: QTable
    goal: Goal | None = None
    option_id: int = -1
    provenance: dict = field(default_factory=dict)
    start_states: list = field(default_factory=list)
    episodes: int = 0
    success_rate: float = 1.0
    recent_success_len: int | None = None
    needs_tuning: bool = False
    shared: bool = False

    def __post_init__(self):
        self.initiation = frozenset(self.initiation)
        self.termination = frozenset(self.termination)
        if not self.initiation or not self.termination:
            raise ValueError("option endpoints must be non-empty")
        if self.initiation & self.termination:
            raise ValueError("initiation and termination sets overlap")
        if GOAL_NODE in self.initiation:
            raise ValueError("the goal marker cannot initiate an option")
        if GOAL_NODE in self.termination and self.goal is None:
            raise ValueError("a goal-terminated option needs its goal")
        for node_id in self.initiation | (self.termination - {GOAL_NODE}):
            self.cat.node(node_id)
        self._can_start = None
        self._done = None

    @property
    def signature(self) -> OptionSignature:
        return OptionSignature(self.initiation, self.termination, self.goal)

    def own(self) -> None:
        if self.shared:
            self.cat = self.cat.copy()
            self.q = self.q.copy()
            self.shared = False
            self._can_start = None
            self._done = None

    def policy(self) -> GreedyPolicy:
        return GreedyPolicy(self.cat, self.q)

    def applicable(self, state) -> bool:
        if self._can_start is None:
            self._can_start = self.cat.region_test(self.initiation)
        return self._can_start(state)

    def terminated(self, state) -> bool:
        if self._done is None:
            self._done = termination_test(self.cat, self.termination, self.goal)
        return self._done(state)

    def describe(self, cat: CAT | None = None) -> str:
        view = cat if cat is not None else self.cat
        return (f"option {self.option_id}: {_fmt_ids(self.initiation, view)} -> "
                f"{_fmt_ids(self.termination, view, self.goal)}")


def termination_test(cat: CAT, termination: Iterable[str], goal: Goal | None):
    """Predicate for "state lies in the termination set" (the goal marker means the concrete goal)."""
    ids = [i for i in termination if i != GOAL_NODE]
    in_region = cat.region_test(ids) if ids else None
    at_goal = goal_checker(goal, cat.schema) if GOAL_NODE in termination else None
    if at_goal is None:
        return in_region
    if in_region is None:
        return at_goal
    return lambda s: at_goal(s) or in_region(s)


class OptionModel:
    """The growing set of options, indexed by endpoint node ids."""

    def __init__(self):
        self.options: list[AbstractOption] = []
        self._by_sig: dict[OptionSignature, AbstractOption] = {}
        self.by_initiation: dict[str, list[AbstractOption]] = {}
        self.by_termination: dict[str, list[AbstractOption]] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.options)

    def __iter__(self):
        return iter(self.options)

    def get(self, option_id: int) -> AbstractOption:
        for o in self.options:
            if o.option_id == option_id:
                return o
        raise KeyError(option_id)

    def add(self, option: AbstractOption) -> AbstractOption:
        """Insert ``option``; an existing option with the same signature keeps the better policy."""
        old = self._by_sig.get(option.signature)
        if old is not None:
            if option.success_rate > old.success_rate:
                old.cat, old.q, old.shared = option.cat, option.q, option.shared
                old.success_rate = option.success_rate
                old.episodes = option.episodes
                old.recent_success_len = option.recent_success_len
                old.needs_tuning = False
                old._can_start = old._done = None
            old.start_states = (old.start_states + option.start_states)[-_MAX_START_STATES:]
            return old
        option.option_id = self._next_id
        self._next_id += 1
        self.options.append(option)
        self._by_sig[option.signature] = option
        for i in option.initiation:
            self.by_initiation.setdefault(i, []).append(option)
        for t in option.termination:
            self.by_termination.setdefault(t, []).append(option)
        return option


def composable(a, b) -> bool:
    """``a`` may be followed by ``b`` iff ``a``'s termination set is a subset of ``b``'s initiation set."""
    cat_a = getattr(a, "cat", None)
    cat_b = getattr(b, "cat", None)
    if cat_a is not None and cat_b is not None and cat_a.schema != cat_b.schema:
        raise LineageError("options come from trees over different schemas")
    return a.termination <= b.initiation


# -- rollout and analysis --------------------------------------------------------------


def rollout(policy, mdp_view, rng: random.Random, retries: int = 10, start_state=None) -> Trajectory:
    """One greedy episode that reaches the view's goal, retrying on stochastic failure."""
    for _ in range(max(1, retries)):
        traj = Trajectory()
        s = start_state if start_state is not None else mdp_view.reset(rng)
        for _ in range(mdp_view.stepmax):
            a = policy.act(s)
            s2, r, done = mdp_view.step(s, a, rng)
            traj.append(s, a, r, s2, done)
            s = s2
            if done:
                return traj
    raise RolloutFailed(f"no successful rollout in {retries} attempts")


def refinement_degree(cat: CAT, var) -> float:
    """1 minus the mean fraction of the variable's domain covered by a leaf's interval."""
    i = cat.schema.index_of(var) if isinstance(var, str) else int(var)
    spec = cat.schema[i]
    full = spec.high - spec.low
    leaves = cat.leaves()
    covered = sum((n.box[i][1] - n.box[i][0]) / full for n in leaves) / len(leaves)
    return 1.0 - covered


def max_refinement_degree(cat: CAT, var) -> float:
    """The degree reached when every leaf is atomic in ``var``."""
    i = cat.schema.index_of(var) if isinstance(var, str) else int(var)
    spec = cat.schema[i]
    full = spec.high - spec.low
    if not spec.is_continuous:
        return 1.0 - 1.0 / full
    width = full
    while width > cat.resolution:
        width /= 2.0
    return 1.0 - width / full


def change_frequencies(trajectory: Trajectory, n_vars: int) -> list[float]:
    counts = [0] * n_vars
    for t in trajectory:
        for i in range(n_vars):
            if t.state[i] != t.next_state[i]:
                counts[i] += 1
    n = max(1, len(trajectory))
    return [c / n for c in counts]


def identify_context_variables(cat: CAT, trajectory: Trajectory, *, stat: str = "mean",
                               factor: float = 0.5) -> frozenset:
    """Variables that change rarely along ``trajectory`` yet are relatively well refined.

    A variable is low-frequency when its change frequency is below
    ``factor`` times the ``stat`` ("mean" or "median") of all frequencies.
    Among those, the ones whose refinement degree is positive and whose
    saturation (degree over the variable's maximum possible degree) is at
    least the candidates' mean saturation are returned (as schema indices).
    Saturation puts a split binary flag and a finely cut coordinate on the
    same scale.
    """
    if not len(trajectory):
        raise ValueError("trajectory is empty")
    n = len(cat.schema)
    freq = change_frequencies(trajectory, n)
    centre = statistics.median(freq) if stat == "median" else statistics.fmean(freq)
    low = [i for i in range(n) if freq[i] < factor * centre]
    if not low:
        return frozenset()
    sat = {}
    for i in low:
        top = max_refinement_degree(cat, i)
        sat[i] = refinement_degree(cat, i) / top if top > 0 else 0.0
    mean_sat = statistics.fmean(sat.values())
    return frozenset(i for i, d in sat.items() if d > 0.0 and d >= mean_sat - 1e-12)


@dataclass
class EndpointSequence:
    ids: list[str]
    positions: list[int]  # index into the state sequence where each endpoint is entered

    def __len__(self) -> int:
        return len(self.ids)


def identify_endpoints(cat: CAT, ccats: Sequence[CCAT], abstract_traj: Sequence[Node], delta_thre: float,
                       sigma_thre: float, weights: tuple = (0.5, 0.5)) -> EndpointSequence:
    """Cut an abstract trajectory (one leaf per state) into option endpoints.

    Both abstract states of a transition whose C-CAT distance exceeds
    ``delta_thre`` become endpoints.  Inside each resulting segment, the
    successor of every abstract transition whose tree distance exceeds
    ``sigma_thre`` times the segment's largest one is added.  Consecutive
    repeats of the same abstract state are merged.
    """
    n = len(abstract_traj) - 1
    if len(ccats) != len(abstract_traj):
        raise ValueError("C-CATs and abstract trajectory are misaligned")
    if n < 0:
        raise ValueError("empty abstract trajectory")
    if not 0.0 <= sigma_thre <= 1.0:
        raise ValueError("sigma_thre must lie in [0, 1]")
    cuts = {0, n}
    memo: dict = {}
    for i in range(n):
        a, b = ccats[i], ccats[i + 1]
        if a is b or a.retained == b.retained:
            continue
        key = (a.context, b.context)
        d = memo.get(key)
        if d is None:
            d = memo[key] = delta_distance(a, b)
        if d > delta_thre:
            cuts.add(i)
            cuts.add(i + 1)
    bounds = sorted(cuts)
    extra = set()
    for lo, hi in zip(bounds, bounds[1:]):
        sig = []
        for t in range(lo + 1, hi + 1):
            prev, cur = abstract_traj[t - 1], abstract_traj[t]
            if prev is not cur:
                sig.append((t, sigma_distance(cat, prev, cur, weights)))
        if not sig:
            continue
        top = max(v for _, v in sig)
        extra.update(t for t, v in sig if v > sigma_thre * top)
    ids, positions = [], []
    for p in sorted(cuts | extra):
        node_id = abstract_traj[p].id
        if ids and ids[-1] == node_id:
            continue
        ids.append(node_id)
        positions.append(p)
    return EndpointSequence(ids, positions)


def _siblings_in(leaves: Sequence[Node], start: Node) -> set:
    parent = start.parent
    if parent is None:
        return set()
    return {n.id for n in leaves if n.parent is parent and n is not start}


def _spread(items: list, k: int) -> list:
    if len(items) <= k:
        return list(items)
    step = len(items) / k
    return [items[int(j * step)] for j in range(k)]


def options_from_trajectory(cat: CAT, q: QTable, trajectory: Trajectory, *, delta_thre: float = 0.0,
                            sigma_thre: float = 1.0, weights: tuple = (0.5, 0.5),
                            target: Iterable[str] | None = None, goal: Goal | None = None,
                            lead_node: str | None = None, context_stat: str = "mean",
                            context_factor: float = 0.5, provenance: dict | None = None,
                            report: dict | None = None) -> list[AbstractOption]:
    """Split a successful trajectory of the policy ``(cat, q)`` into options.

    ``target`` (node ids) or ``goal`` name what the trajectory was trained to
    reach; the final endpoint is replaced by it so the last option terminates
    exactly where the trained policy did.  ``lead_node`` joins the first
    option's initiation set (the plan node the rollout started from).
    All options share ``cat`` and ``q`` until one of them is fine-tuned.
    ``report``, when given, receives the context variables and endpoints.
    """
    states = trajectory.states()
    if len(states) < 2:
        return []
    # endpoint ids handed in from outside may not exist yet in this tree
    for node_id in list(target or ()) + ([lead_node] if lead_node else []):
        cat.ensure(node_id, on_refine=q.on_refine)
    leaves = [cat.lookup(s) for s in states]
    ctx = identify_context_variables(cat, trajectory, stat=context_stat, factor=context_factor)
    by_ctx: dict = {}
    ccats = []
    x_of = cat.schema.encode
    for s in states:
        key = tuple(x_of(s)[i] for i in sorted(ctx))
        c = by_ctx.get(key)
        if c is None:
            c = by_ctx[key] = make_ccat(cat, s, ctx)
        ccats.append(c)
    ends = identify_endpoints(cat, ccats, leaves, delta_thre, sigma_thre, weights)
    if report is not None:
        report["context"] = ctx
        report["endpoints"] = ends
    ids, positions = list(ends.ids), list(ends.positions)
    final_ids: frozenset
    if goal is not None:
        final_ids = frozenset({GOAL_NODE})
    elif target is not None:
        final_ids = frozenset(target)
    else:
        final_ids = frozenset({ids[-1]})
    if len(ids) >= 2:
        ids.pop()
        positions.pop()
    out = []
    n = len(states) - 1
    for k, node_id in enumerate(ids):
        lo = positions[k]
        hi = positions[k + 1] if k + 1 < len(ids) else n
        beta = frozenset({ids[k + 1]}) if k + 1 < len(ids) else final_ids
        seg = leaves[lo:hi] if hi > lo else leaves[lo:lo + 1]
        init = {node_id} | _siblings_in(seg, leaves[lo])
        if k == 0 and lead_node is not None:
            init.add(lead_node)
        init -= beta
        if not init:
            continue
        in_init = cat.region_test(init)
        starts = [s for s in states[lo:max(hi, lo + 1)] if in_init(s)]
        opt = AbstractOption(
            cat=cat, initiation=frozenset(init), termination=beta, q=q,
            goal=goal if GOAL_NODE in beta else None,
            provenance=dict(provenance or {}, segment=(lo, hi)),
            start_states=_spread(starts, _MAX_START_STATES),
            recent_success_len=max(1, hi - lo), shared=True,
        )
        out.append(opt)
    return out


def invent_options(cat: CAT, policy: GreedyPolicy, delta_thre: float, sigma_thre: float, mdp_view,
                   rng: random.Random, *, finetune: Callable | None = None, **kwargs) -> list[AbstractOption]:
    """Roll out ``policy`` on ``mdp_view`` and turn the trajectory into options.

    ``finetune(option)``, when given, is applied to every invented option.
    """
    traj = rollout(policy, mdp_view, rng)
    opts = options_from_trajectory(cat, policy.q, traj, delta_thre=delta_thre, sigma_thre=sigma_thre, **kwargs)
    if finetune is not None:
        for o in opts:
            finetune(o)
    return opts
