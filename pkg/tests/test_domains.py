import random

import pytest

from chirp.core import (Constraint, Goal, SchemaError, Task, VariableSpec, Schema, format_stream, format_task,
                        is_goal, parse_stream, parse_task)
from chirp.domains import (DOMAIN_IDS, DomainError, IllegalAction, make_domain, parse_map, sample_stream,
                           sample_task, step, validate_state)

NORTH, SOUTH, EAST, WEST = range(4)


def open_maze(n=24):
    return make_domain("maze", map_text="\n".join(["." * n] * n))


# -- states and goals -----------------------------------------------------------------


def test_state_rejects_out_of_domain_values():
    schema = make_domain("taxi", "desk").schema
    assert schema.state(2.6, 0.9, 3, 0) == (2.6, 0.9, 3, 0)
    with pytest.raises(SchemaError):
        schema.state(5.0, 0.9, 3, 0)
    with pytest.raises(SchemaError):
        schema.state(1.0, 0.9, 7, 0)
    with pytest.raises(SchemaError):
        schema.state(1.0, 0.9, 3)


def test_schema_rejects_bad_specs():
    with pytest.raises(SchemaError):
        VariableSpec.continuous("x", 2, 1)
    with pytest.raises(SchemaError):
        VariableSpec.discrete("d", [])
    with pytest.raises(SchemaError):
        Schema([VariableSpec.continuous("x", 0, 1), VariableSpec.continuous("x", 0, 2)])


def test_is_goal_examples():
    schema = make_domain("taxi", "desk").schema
    delivered = Goal((Constraint("l", values={2}), Constraint("p", values={0})))
    assert not is_goal((1.0, 1.0, 3, 0), delivered, schema)
    assert is_goal((1.0, 1.0, 3, 0), Goal(()), schema)
    assert is_goal((2.6, 1.0, 3, 0), Goal((Constraint("x", 2.5, 5.0),)), schema)


def test_is_goal_monotone_under_constraint_removal():
    rng = random.Random(0)
    schema = make_domain("taxi", "desk").schema
    cons = (Constraint("x", 1.0, 4.0), Constraint("y", 0.0, 2.0), Constraint("l", values={0, 3}),
            Constraint("p", values={1}))
    for _ in range(500):
        s = (rng.uniform(0, 5), rng.uniform(0, 5), rng.randrange(5), rng.randrange(2))
        full = is_goal(s, Goal(cons), schema)
        for k in range(len(cons)):
            fewer = Goal(cons[:k] + cons[k + 1:])
            assert is_goal(s, fewer, schema) or not full


def test_task_text_round_trip():
    spec = make_domain("office")
    task = sample_task(spec, random.Random(4))
    assert parse_task(format_task(task)) == task
    stream = sample_stream("minecraft", 3, 4, 1000, "desk")
    assert parse_stream(format_stream(stream)) == stream


# -- geometry ---------------------------------------------------------------------


def test_taxi_desk_schema():
    spec = make_domain("taxi", "desk")
    assert [(v.name, v.low, v.high) for v in spec.schema[:2]] == [("x", 0.0, 5.0), ("y", 0.0, 5.0)]
    assert spec.schema[2].values == (0, 1, 2, 3, 4)
    assert spec.schema[3].values == (0, 1)


def test_full_sizes_and_landmarks():
    taxi = make_domain("taxi")
    assert (taxi.width, taxi.height) == (30, 30)
    assert sorted(k for k in taxi.landmarks if isinstance(k, int)) == [1, 2, 3, 4]
    maze = make_domain("maze")
    assert (maze.width, maze.height) == (24, 24)
    assert maze.walls


def test_open_field_maze_has_no_walls():
    assert not open_maze().walls


def test_bad_maps_raise():
    with pytest.raises(DomainError):
        parse_map("")
    with pytest.raises(DomainError):
        parse_map("..\n...")
    with pytest.raises(DomainError):
        make_domain("nowhere")


# -- dynamics ---------------------------------------------------------------------


def test_move_outcome_frequencies():
    spec = open_maze()
    rng = random.Random(7)
    counts = {"ok": 0, "east": 0, "west": 0}
    n = 20_000
    for _ in range(n):
        s2 = spec.step((12.5, 12.5), NORTH, rng).next_state
        if s2 == (12.5, 13.5):
            counts["ok"] += 1
        elif s2 == (13.5, 12.5):
            counts["east"] += 1
        else:
            assert s2 == (11.5, 12.5)
            counts["west"] += 1
    assert abs(counts["ok"] / n - 0.8) < 0.015
    assert abs(counts["east"] / n - 0.1) < 0.015
    assert abs(counts["west"] / n - 0.1) < 0.015


def test_blocked_move_keeps_position_and_costs_a_step():
    spec = make_domain("maze", map_text="..\n#.")  # text rows are y = 0, 1; the wall is cell (0, 1)
    assert spec.walls == frozenset({(0, 1)})
    rng = random.Random(0)
    blocked = 0
    for _ in range(50):
        out = spec.step((0.5, 0.5), NORTH, rng)
        if out.next_state[0] == 0.5:  # the intended move (slips go east or west)
            assert out.next_state == (0.5, 0.5)
            assert out.reward == -1.0
            blocked += 1
    assert blocked > 0


def test_step_stays_in_domain():
    rng = random.Random(1)
    for d in DOMAIN_IDS:
        spec = make_domain(d, "desk")
        task = sample_task(spec, rng)
        s = task.initial_state
        for _ in range(2000):
            s = spec.step(s, rng.randrange(spec.n_actions), rng).next_state
            validate_state(spec, s)


def test_goal_reward_and_done():
    spec = open_maze(4)
    goal = Goal((Constraint("x", 1.0, 2.0), Constraint("y", 0.0, 1.0)))
    rng = random.Random(2)
    while True:
        out = step(spec, (0.5, 0.5), EAST, rng, goal)
        if out.next_state == (1.5, 0.5):
            break
    assert out.reward == 500.0 and out.done


def test_taxi_illegal_actions():
    spec = make_domain("taxi", "desk")
    rng = random.Random(0)
    out = spec.step((2.5, 2.5, 1, 0), 5, rng)  # dropoff with no passenger
    assert out.reward == -100.0 and out.illegal and out.next_state == (2.5, 2.5, 1, 0)
    out = spec.step((2.5, 2.5, 1, 0), 4, rng)  # pickup away from the passenger
    assert out.reward == -100.0 and out.illegal


def test_taxi_pickup_and_dropoff():
    spec = make_domain("taxi", "desk")
    rng = random.Random(0)
    (cx, cy), = spec.landmarks[3]
    s = (cx + 0.5, cy + 0.5, 3, 0)
    out = spec.step(s, 4, rng)
    assert out.next_state == (cx + 0.5, cy + 0.5, 0, 1) and out.reward == -1.0
    goal = Goal((Constraint("l", values={3}), Constraint("p", values={0})))
    out = step(spec, out.next_state, 5, rng, goal)
    assert out.next_state == (cx + 0.5, cy + 0.5, 3, 0) and out.done and out.reward == 500.0


def test_office_rewards_zero_off_goal():
    spec = make_domain("office")
    rng = random.Random(0)
    task = sample_task(spec, rng)
    out = step(spec, task.initial_state, NORTH, rng, task.goal)
    assert out.reward == 0.0 and not out.done


def test_minecraft_crafting_chain():
    spec = make_domain("minecraft", "desk")
    rng = random.Random(0)
    (fx, fy) = spec.landmarks["F"][0]
    (sx, sy) = spec.landmarks["S"][0]
    s = (fx + 0.5, fy + 0.5, 0, 0, 0, 0, 0)
    s = spec.step(s, 4, rng).next_state
    assert s[2] == 1
    s = spec.step(s, 5, rng).next_state
    assert s[2:4] == (0, 1)
    s = (sx + 0.5, sy + 0.5) + s[2:]
    s = spec.step(s, 4, rng).next_state
    assert s[4] == 1
    goal = Goal((Constraint("axe", values={1}),))
    out = step(spec, s, 5, rng, goal)
    assert out.next_state[6] == 1 and out.done


def test_illegal_action_index_raises():
    spec = make_domain("taxi", "desk")
    with pytest.raises(IllegalAction):
        spec.step((1.0, 1.0, 1, 0), 9, random.Random(0))


def test_replay_is_bit_exact():
    spec = make_domain("four_rooms", "desk")
    task = sample_task(spec, random.Random(5))
    actions = [random.Random(6).randrange(4) for _ in range(500)]

    def run():
        rng = random.Random(99)
        s, out = task.initial_state, []
        for a in actions:
            o = step(spec, s, a, rng, task.goal)
            out.append((o.next_state, o.reward))
            s = o.next_state
        return out

    assert run() == run()


# -- task sampling -------------------------------------------------------------------


def test_sampling_is_deterministic():
    spec = make_domain("taxi")
    assert sample_task(spec, random.Random(8)) == sample_task(spec, random.Random(8))
    assert sample_stream("maze", 2, 5, 100) == sample_stream("maze", 2, 5, 100)


def test_taxi_passenger_differs_from_destination():
    spec = make_domain("taxi")
    rng = random.Random(9)
    for _ in range(200):
        t = sample_task(spec, rng)
        (dest,) = next(c for c in t.goal.constraints if c.var == "l").values
        assert t.initial_state[2] != dest and t.initial_state[3] == 0


def test_minecraft_targets_both_axes():
    spec = make_domain("minecraft")
    rng = random.Random(10)
    seen = {next(iter(sample_task(spec, rng).goal.constraints[0].values)) for _ in range(100)}
    assert seen == {1, 2}


def test_maze_goals_are_reachable():
    spec = make_domain("maze")
    rng = random.Random(11)
    for _ in range(50):
        t = sample_task(spec, rng)
        x, y = t.initial_state
        gx, gy = t.goal.constraints[0].low, t.goal.constraints[1].low
        assert (int(gx), int(gy)) in spec.reachable_from((int(x), int(y)))


def test_task_is_frozen():
    t = Task((0.5, 0.5), Goal(()), "x")
    with pytest.raises(Exception):
        t.reward_id = "y"
