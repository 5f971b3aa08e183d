"""Factored states, goals, tasks and task streams.

States are plain tuples with one value per variable, in schema order.  Discrete
variables carry ordered value lists; abstractions work on the *code* of a value
(its index in that list), so every variable interval is a half-open numeric
range ``[lo, hi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Sequence

CONTINUOUS = "continuous"
DISCRETE = "discrete"

State = tuple


class SchemaError(ValueError):
    """A state, goal or task does not match the variable schema."""


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    low: float = 0.0
    high: float = 0.0
    values: tuple = ()

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if not self.low < self.high:
                raise SchemaError(f"{self.name}: need min < max, got [{self.low}, {self.high})")
        elif self.kind == DISCRETE:
            if not self.values:
                raise SchemaError(f"{self.name}: discrete domain is empty")
            if len(set(self.values)) != len(self.values):
                raise SchemaError(f"{self.name}: duplicate values in domain")
            object.__setattr__(self, "low", 0)
            object.__setattr__(self, "high", len(self.values))
        else:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")

    @classmethod
    def continuous(cls, name: str, low: float, high: float) -> "VariableSpec":
        return cls(name, CONTINUOUS, float(low), float(high))

    @classmethod
    def discrete(cls, name: str, values: Iterable) -> "VariableSpec":
        return cls(name, DISCRETE, values=tuple(values))

    @property
    def is_continuous(self) -> bool:
        return self.kind == CONTINUOUS

    @property
    def measure(self) -> float:
        return self.high - self.low

    def contains(self, value) -> bool:
        if self.is_continuous:
            return isinstance(value, (int, float)) and self.low <= value < self.high
        return value in self.values

    def code(self, value):
        """Numeric position of ``value`` on this variable's axis."""
        if self.is_continuous:
            return value
        return self.values.index(value)

    def decode(self, code):
        if self.is_continuous:
            return code
        return self.values[int(code)]


class Schema(tuple):
    """An ordered tuple of :class:`VariableSpec`."""

    def __new__(cls, specs: Iterable[VariableSpec]):
        specs = tuple(specs)
        if not specs:
            raise SchemaError("schema needs at least one variable")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate variable names: {names}")
        return super().__new__(cls, specs)

    def __init__(self, specs=()):
        self._index = {s.name: i for i, s in enumerate(self)}
        # discrete domains of the form 0..k-1 need no encoding on the hot path
        self.identity_codes = all(
            s.is_continuous or s.values == tuple(range(len(s.values))) for s in self
        )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"unknown variable {name!r}") from None

    def state(self, *values) -> State:
        """Validated state constructor."""
        if len(values) == 1 and isinstance(values[0], (tuple, list)):
            values = tuple(values[0])
        if len(values) != len(self):
            raise SchemaError(f"expected {len(self)} values, got {len(values)}")
        for spec, v in zip(self, values):
            if not spec.contains(v):
                raise SchemaError(f"value {v!r} outside domain of {spec.name}")
        return tuple(values)

    def validate(self, state: State) -> None:
        self.state(tuple(state))

    def encode(self, state: State) -> tuple:
        if self.identity_codes:
            return state
        return tuple(spec.code(v) for spec, v in zip(self, state))


@dataclass(frozen=True)
class Constraint:
    """One conjunct of a goal: a continuous interval or a set of discrete values."""

    var: str
    low: float | None = None
    high: float | None = None
    values: frozenset | None = None

    def __post_init__(self):
        if self.values is None and (self.low is None or self.high is None):
            raise SchemaError(f"constraint on {self.var} needs an interval or a value set")
        if self.values is not None:
            object.__setattr__(self, "values", frozenset(self.values))

    def holds(self, value) -> bool:
        if self.values is not None:
            return value in self.values
        return self.low <= value < self.high

    def text(self) -> str:
        if self.values is not None:
            return f"{self.var}={{{','.join(repr(v) for v in sorted(self.values, key=repr))}}}"
        return f"{self.var}=[{self.low!r},{self.high!r})"


@dataclass(frozen=True)
class Goal:
    """Conjunction of per-variable constraints."""

    constraints: tuple[Constraint, ...] = ()

    def bind(self, schema: Schema) -> tuple:
        """Pre-resolve constraint variables to indices (raises on unknown names)."""
        return tuple((schema.index_of(c.var), c) for c in self.constraints)

    def text(self) -> str:
        return ";".join(c.text() for c in self.constraints)

    def code_box(self, schema: Schema) -> dict[int, tuple]:
        """Per-variable region in code space: ``{var_index: (lo, hi)}`` or ``(frozenset_of_codes,)``."""
        box = {}
        for c in self.constraints:
            i = schema.index_of(c.var)
            spec = schema[i]
            if c.values is not None:
                box[i] = (frozenset(spec.code(v) for v in c.values if v in spec.values),)
            else:
                box[i] = (c.low, c.high)
        return box


def is_goal(state: State, goal: Goal, schema: Schema) -> bool:
    """True iff every goal constraint holds in ``state``."""
    if len(state) != len(schema):
        raise SchemaError(f"state has {len(state)} values, schema has {len(schema)}")
    for i, c in goal.bind(schema):
        if not c.holds(state[i]):
            return False
    return True


def goal_checker(goal: Goal, schema: Schema):
    """A fast predicate ``state -> bool`` for repeated checks."""
    bound = goal.bind(schema)

    def check(state):
        for i, c in bound:
            if not c.holds(state[i]):
                return False
        return True

    return check


@dataclass(frozen=True)
class Task:
    initial_state: State
    goal: Goal
    reward_id: str


@dataclass(frozen=True)
class TaskStream:
    domain_id: str
    seed: int
    tasks: tuple[Task, ...]
    per_task_budget: int
    size: str = "full"

    def __post_init__(self):
        if not self.tasks:
            raise SchemaError("a task stream needs at least one task")
        if self.per_task_budget <= 0:
            raise SchemaError("per-task budget must be positive")


class Transition(NamedTuple):
    state: State
    action: int
    reward: float
    next_state: State
    done: bool


@dataclass
class Trajectory:
    transitions: list[Transition] = field(default_factory=list)

    def append(self, state, action, reward, next_state, done) -> None:
        if self.transitions and self.transitions[-1].next_state != state:
            raise ValueError("trajectory transitions must chain")
        self.transitions.append(Transition(state, action, reward, next_state, done))

    def states(self) -> list[State]:
        if not self.transitions:
            return []
        return [t.state for t in self.transitions] + [self.transitions[-1].next_state]

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)


# -- plain-text task records -------------------------------------------------------


def _fmt_value(v) -> str:
    return repr(v)


def _parse_value(text: str):
    import ast

    return ast.literal_eval(text)


def _format_goal(goal: Goal) -> str:
    return goal.text()


def _parse_goal(text: str) -> Goal:
    constraints = []
    for part in filter(None, text.split(";")):
        var, _, body = part.partition("=")
        body = body.strip()
        if body.startswith("{"):
            inner = body[1:-1]
            vals = [_parse_value(v) for v in inner.split(",") if v.strip()]
            constraints.append(Constraint(var, values=frozenset(vals)))
        elif body.startswith("[") and body.endswith(")"):
            lo, hi = body[1:-1].split(",")
            constraints.append(Constraint(var, low=float(lo), high=float(hi)))
        else:
            raise SchemaError(f"bad goal constraint {part!r}")
    return Goal(tuple(constraints))


def format_stream(stream: TaskStream) -> str:
    """Serialize a stream as ``key=value`` lines (floats use ``repr`` so replays are exact)."""
    lines = [
        "format=task-stream/1",
        f"domain_id={stream.domain_id}",
        f"size={stream.size}",
        f"seed={stream.seed}",
        f"per_task_budget={stream.per_task_budget}",
        f"n_tasks={len(stream.tasks)}",
    ]
    for k, task in enumerate(stream.tasks):
        lines.extend(_task_lines(task, f"task.{k}."))
    return "\n".join(lines) + "\n"


def _task_lines(task: Task, prefix: str = "") -> list[str]:
    return [
        f"{prefix}initial_state={','.join(_fmt_value(v) for v in task.initial_state)}",
        f"{prefix}goal={_format_goal(task.goal)}",
        f"{prefix}reward_id={task.reward_id}",
    ]


def format_task(task: Task) -> str:
    return "\n".join(_task_lines(task)) + "\n"


def _read_records(text: str) -> dict[str, str]:
    rec = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SchemaError(f"malformed record line {raw!r}")
        rec[key.strip()] = value.strip()
    return rec


def _task_from(rec: dict[str, str], prefix: str = "") -> Task:
    init = tuple(_parse_value(v) for v in rec[prefix + "initial_state"].split(","))
    return Task(init, _parse_goal(rec[prefix + "goal"]), rec[prefix + "reward_id"])


def parse_task(text: str) -> Task:
    return _task_from(_read_records(text))


def parse_stream(text: str) -> TaskStream:
    rec = _read_records(text)
    n = int(rec["n_tasks"])
    tasks = tuple(_task_from(rec, f"task.{k}.") for k in range(n))
    return TaskStream(
        domain_id=rec["domain_id"],
        seed=int(rec["seed"]),
        tasks=tasks,
        per_task_budget=int(rec["per_task_budget"]),
        size=rec.get("size", "full"),
    )


def cell_goal(x: float, y: float, xname: str = "x", yname: str = "y") -> Goal:
    """Goal requiring the position to lie in the unit cell containing ``(x, y)``."""
    cx, cy = math.floor(x), math.floor(y)
    return Goal((Constraint(xname, float(cx), float(cx + 1)), Constraint(yname, float(cy), float(cy + 1))))


def goal_from_mapping(spec: dict[str, Any]) -> Goal:
    """Build a goal from ``{"x": (lo, hi), "p": {0}}`` style mappings."""
    out = []
    for var, c in spec.items():
        if isinstance(c, (set, frozenset)):
            out.append(Constraint(var, values=frozenset(c)))
        else:
            lo, hi = c
            out.append(Constraint(var, low=float(lo), high=float(hi)))
    return Goal(tuple(out))


def schema_of(specs: Sequence[VariableSpec]) -> Schema:
    return specs if isinstance(specs, Schema) else Schema(specs)
