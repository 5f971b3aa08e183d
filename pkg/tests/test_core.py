import pytest

from chirp.core import (Constraint, Goal, SchemaError, Task, TaskStream, Trajectory, VariableSpec, cell_goal,
                        goal_from_mapping, is_goal, parse_stream, format_stream, schema_of)


def schema():
    return schema_of([VariableSpec.continuous("x", 0.0, 5.0), VariableSpec.discrete("p", [0, 1])])


def test_is_goal_rejects_schema_mismatch():
    with pytest.raises(SchemaError):
        is_goal((1.0,), Goal(()), schema())
    with pytest.raises(SchemaError):
        is_goal((1.0, 0), Goal((Constraint("z", 0.0, 1.0),)), schema())


def test_interval_constraints_are_half_open():
    goal = Goal((Constraint("x", 2.5, 5.0),))
    assert is_goal((2.5, 0), goal, schema())
    assert not is_goal((2.4999, 0), goal, schema())


def test_constraint_needs_a_region():
    with pytest.raises(SchemaError):
        Constraint("x", low=1.0)


def test_duplicate_discrete_values_rejected():
    with pytest.raises(SchemaError):
        VariableSpec.discrete("d", [1, 1])


def test_goal_helpers():
    assert cell_goal(3, 4) == Goal((Constraint("x", 3.0, 4.0), Constraint("y", 4.0, 5.0)))
    got = goal_from_mapping({"x": [1.0, 2.0], "p": {1}})
    assert is_goal((1.5, 1), got, schema()) and not is_goal((1.5, 0), got, schema())


def test_trajectory_must_chain():
    traj = Trajectory()
    traj.append((0.5, 0), 0, -1.0, (1.5, 0), False)
    with pytest.raises(ValueError):
        traj.append((3.5, 0), 0, -1.0, (4.5, 0), False)
    traj.append((1.5, 0), 0, -1.0, (2.5, 0), True)
    assert traj.states() == [(0.5, 0), (1.5, 0), (2.5, 0)]


def test_stream_invariants_and_round_trip():
    task = Task((0.5, 0), Goal((Constraint("p", values={1}),)), "toy")
    with pytest.raises(SchemaError):
        TaskStream("toy", 1, (), 100)
    with pytest.raises(SchemaError):
        TaskStream("toy", 1, (task,), 0)
    stream = TaskStream("toy", 2**63 - 1, (task, task), 100, "desk")
    assert parse_stream(format_stream(stream)) == stream
