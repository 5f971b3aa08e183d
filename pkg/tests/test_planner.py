import random

import pytest

from _plans import bfs_reaches, random_plan_fixture
from chirp.cat import CAT
from chirp.catrl import QTable
from chirp.core import Constraint, Goal, VariableSpec
from chirp.options import GOAL_NODE, AbstractOption, OptionModel, OptionSignature
from chirp.planner import (BRIDGE, GOAL_INSIDE, LIFTED, OPTION, TREE, DanglingEndpoint, Edge, OptionPlan,
                           PlanInvalid, PlannableCAT, astar, build_plannable_cat, compute_option_plan,
                           invent_option_signature, refine_plan, validate_plan)


def grid_cat(depth=2) -> CAT:
    """An 8x8 square refined ``depth`` times everywhere (4**depth leaves)."""
    cat = CAT([VariableSpec.continuous("x", 0.0, 8.0), VariableSpec.continuous("y", 0.0, 8.0)])
    for _ in range(depth):
        for leaf in list(cat.leaves()):
            cat.refine(leaf, materialize=True)
    return cat


def cell(x0, x1, y0, y1) -> Goal:
    return Goal((Constraint("x", x0, x1), Constraint("y", y0, y1)))


def all_edges(pcat: PlannableCAT):
    out = []
    for node_id in pcat.cat.nodes:
        out.extend(pcat.edges(node_id))
    return out


# -- graph construction ----------------------------------------------------------------


def test_empty_model_gives_only_tree_edges():
    cat = grid_cat(1)
    pcat = build_plannable_cat(cat, OptionModel())
    kinds = {e.kind for e in all_edges(pcat)}
    assert kinds == {TREE}
    assert not pcat.option_edges and not pcat.lifted_edges


def test_option_edges_pair_initiation_with_termination():
    cat = grid_cat(1)
    model = OptionModel()
    model.add(AbstractOption(cat, {"r.0", "r.1"}, {"r.3"}, QTable(4)))
    pcat = build_plannable_cat(cat, model)
    edges = [e for es in pcat.option_edges.values() for e in es]
    assert sorted((e.src, e.dst) for e in edges) == [("r.0", "r.3"), ("r.1", "r.3")]
    assert all(e.cost == 1.0 for e in edges)


def test_lifted_edges_cost_more_than_option_edges():
    cat = grid_cat(2)
    model = OptionModel()
    a, b = cat.lookup((0.5, 0.5)).id, cat.lookup((7.5, 7.5)).id
    model.add(AbstractOption(cat, {a}, {b}, QTable(4)))
    pcat = build_plannable_cat(cat, model)
    lifted = [e for es in pcat.lifted_edges.values() for e in es]
    assert lifted
    assert all(e.kind == LIFTED and e.cost > 1.0 for e in lifted)
    assert all(e.src != e.dst for e in lifted)


def test_dangling_endpoint_raises():
    deep = grid_cat(2)
    model = OptionModel()
    model.add(AbstractOption(deep, {deep.lookup((0.5, 0.5)).id}, {deep.lookup((7.5, 7.5)).id}, QTable(4)))
    with pytest.raises(DanglingEndpoint):
        build_plannable_cat(grid_cat(1), model)


# -- planning -------------------------------------------------------------------------


def test_start_inside_goal_gives_empty_plan():
    cat = grid_cat(1)
    plan = compute_option_plan(OptionModel(), cat, "r.0", cell(0.0, 4.0, 0.0, 4.0))
    assert plan is not None and plan.steps == []
    validate_plan(plan, cat)


def test_tree_only_plan_is_one_signature():
    cat = grid_cat(2)
    goal = cell(7.0, 8.0, 7.0, 8.0)
    start = cat.lookup((0.5, 0.5))
    plan = compute_option_plan(OptionModel(), cat, start, goal)
    assert len(plan) == 1
    sig = plan.steps[0]
    assert isinstance(sig, OptionSignature)
    assert sig.initiation == {start.id} and sig.termination == {GOAL_NODE}
    validate_plan(plan, cat)


def test_two_composable_options_are_chained():
    cat = grid_cat(2)
    start, mid = cat.lookup((0.5, 0.5)).id, cat.lookup((4.5, 0.5)).id
    goal = cell(6.0, 8.0, 6.0, 8.0)
    end = cat.lookup((7.0, 7.0)).id
    model = OptionModel()
    first = model.add(AbstractOption(cat, {start}, {mid}, QTable(4)))
    second = model.add(AbstractOption(cat, {mid}, {end}, QTable(4)))
    model.add(AbstractOption(cat, {end}, {start}, QTable(4)))  # a distractor going back
    plan = compute_option_plan(model, cat, start, goal)
    assert plan.steps == [first, second]
    assert plan.learned and plan.cost == 2.0
    validate_plan(plan, cat, model)
    learned = compute_option_plan(model, cat, start, goal, learned_only=True)
    assert learned.steps == [first, second]


def test_goal_terminated_option_plans_directly():
    cat = grid_cat(1)
    goal = cell(7.0, 8.0, 7.0, 8.0)
    model = OptionModel()
    o = model.add(AbstractOption(cat, {"r.0"}, {GOAL_NODE}, QTable(4), goal=goal))
    plan = compute_option_plan(model, cat, "r.0", goal)
    assert plan.steps == [o]
    other = cell(0.0, 1.0, 7.0, 8.0)
    assert compute_option_plan(model, cat, "r.0", other, learned_only=True) is None


def test_learned_only_without_options_finds_nothing():
    cat = grid_cat(1)
    assert compute_option_plan(OptionModel(), cat, "r.0", cell(7.0, 8.0, 7.0, 8.0), learned_only=True) is None


def test_plan_never_costs_more_than_tree_plan():
    rng = random.Random(21)
    for _ in range(200):
        cat, model, start, goal = random_plan_fixture(rng)
        pcat = PlannableCAT(cat, model, goal)
        plan = compute_option_plan(model, cat, start, goal)
        tree = astar(pcat, start, tree_only=True, use_heuristic=False)
        if plan is not None and plan.steps and tree is not None:
            assert plan.cost <= tree[1] + 1e-9


# -- refinement of raw paths ---------------------------------------------------------------


def _opt(cat, a, b):
    return AbstractOption(cat, {a}, {b}, QTable(4))


def test_refine_plan_keeps_pure_option_paths():
    cat = grid_cat(1)
    o1, o2 = _opt(cat, "r.0", "r.1"), _opt(cat, "r.1", "r.3")
    path = [Edge("r.0", "r.1", 1.0, OPTION, o1), Edge("r.1", "r.3", 1.0, OPTION, o2)]
    assert refine_plan(path).steps == [o1, o2]


def test_refine_plan_collapses_a_run_of_tree_edges():
    cat = grid_cat(1)
    o1, o2 = _opt(cat, "r.0", "r.1"), _opt(cat, "r.2", "r.3")
    path = [Edge("r.0", "r.1", 1.0, OPTION, o1), Edge("r.1", "r", 2.0, TREE),
            Edge("r", "r.2", 2.0, TREE), Edge("r.2", "r.3", 1.0, OPTION, o2)]
    plan = refine_plan(path, goal=cell(4.0, 8.0, 4.0, 8.0))
    assert plan.steps == [o1, OptionSignature({"r.1"}, {"r.2"}), o2]
    validate_plan(plan, cat)


def test_refine_plan_tree_only_path_is_one_signature():
    goal = cell(7.0, 8.0, 7.0, 8.0)
    path = [Edge("r.0", "r", 2.0, TREE), Edge("r", "r.3", 2.0, TREE), Edge("r.3", GOAL_NODE, 4.0, BRIDGE)]
    plan = refine_plan(path, goal=goal)
    assert plan.steps == [OptionSignature({"r.0"}, {GOAL_NODE}, goal)]
    assert plan.cost == 8.0


def test_goal_inside_edge_adds_no_step():
    cat = grid_cat(1)
    o = _opt(cat, "r.0", "r.3")
    goal = cell(4.0, 8.0, 4.0, 8.0)
    plan = refine_plan([Edge("r.0", "r.3", 1.0, OPTION, o), Edge("r.3", GOAL_NODE, 0.0, GOAL_INSIDE)], goal=goal)
    assert plan.steps == [o]
    validate_plan(plan, cat)


# -- signatures and validation ---------------------------------------------------------------


def test_cold_start_signature_uses_the_root():
    cat = CAT([VariableSpec.continuous("x", 0.0, 8.0), VariableSpec.continuous("y", 0.0, 8.0)])
    goal = cell(7.0, 8.0, 7.0, 8.0)
    sig = invent_option_signature(cat, (0.5, 0.5), goal)
    assert sig.initiation == {"r"} and sig.termination == {GOAL_NODE} and sig.goal == goal


def test_validator_rejects_broken_plans():
    cat = grid_cat(1)
    goal = cell(4.0, 8.0, 4.0, 8.0)
    model = OptionModel()
    o1 = model.add(_opt(cat, "r.0", "r.1"))
    with pytest.raises(PlanInvalid):
        validate_plan(OptionPlan([o1], "r.2", goal), cat, model)  # start not in the initiation set
    with pytest.raises(PlanInvalid):
        validate_plan(OptionPlan([o1], "r.0", goal), cat, model)  # ends outside the goal
    with pytest.raises(PlanInvalid):
        validate_plan(OptionPlan([], "r.0", goal), cat, model)
    stray = _opt(cat, "r.1", "r.3")
    with pytest.raises(PlanInvalid):
        validate_plan(OptionPlan([o1, stray], "r.0", goal), cat, model)  # option not in the model
    validate_plan(OptionPlan([o1, stray], "r.0", goal), cat)


def test_random_plans_validate_and_astar_is_complete():
    rng = random.Random(5)
    for _ in range(500):
        cat, model, start, goal = random_plan_fixture(rng)
        pcat = PlannableCAT(cat, model, goal)
        for learned_only in (False, True):
            found = astar(pcat, start, learned_only=learned_only)
            assert (found is not None) == bfs_reaches(pcat, start, learned_only)
        plan = compute_option_plan(model, cat, start, goal)
        assert plan is not None  # tree and bridge edges always connect to the goal
        validate_plan(plan, cat, model)
