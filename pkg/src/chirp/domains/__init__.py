"""Seeded stochastic simulators for the five grid-map domains.

Positions are continuous.  A move translates the agent by exactly 1.0 along one
axis; it is blocked (position unchanged, step still charged) by map bounds and
wall cells.  Moves succeed with probability 0.8 and slip to either
perpendicular direction with probability 0.1 each.

Map files are plain-text grids.  Comment lines start with ``;``.  Row ``r`` of
the grid holds the cells with ``y`` in ``[r, r + 1)``; column ``c`` holds ``x``
in ``[c, c + 1)``.  Legend::

    #   wall            .   free
    1-9 taxi landmark   C   coffee     M  mail     D  desk
    F   forest (wood)   S   stone      I  iron
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

from ..core import (
    Constraint,
    Goal,
    Schema,
    SchemaError,
    State,
    Task,
    TaskStream,
    VariableSpec,
    goal_checker,
)

DOMAIN_IDS = ("maze", "four_rooms", "office", "taxi", "minecraft")

NORTH, SOUTH, EAST, WEST = 0, 1, 2, 3
MOVE_NAMES = ("north", "south", "east", "west")
_DX = (0.0, 0.0, 1.0, -1.0)
_DY = (1.0, -1.0, 0.0, 0.0)
# perpendicular slip directions for each intended move
_SLIPS = ((EAST, WEST), (EAST, WEST), (NORTH, SOUTH), (NORTH, SOUTH))

# sub-cell offsets are multiples of 2**-10 so that unit moves stay exact in floating point
_OFFSET_STEPS = 1024

STEP_REWARD = {"maze": -1.0, "four_rooms": -1.0, "office": 0.0, "taxi": -1.0, "minecraft": -1.0}
GOAL_REWARD = 500.0
ILLEGAL_REWARD = -100.0

DEFAULT_SIZES = {
    "maze": {"full": "24x24", "desk": "10x10"},
    "four_rooms": {"full": "33x33", "desk": "11x11"},
    "office": {"full": "11x15", "desk": "11x15"},
    "taxi": {"full": "30x30", "desk": "5x5"},
    "minecraft": {"full": "22x22", "desk": "10x10"},
}


class DomainError(ValueError):
    pass


class IllegalAction(DomainError):
    pass


class StepOutcome(NamedTuple):
    next_state: State
    reward: float
    done: bool
    illegal: bool


@dataclass(frozen=True, eq=False)
class DomainSpec:
    domain_id: str
    schema: Schema
    actions: tuple[str, ...]
    width: int
    height: int
    walls: frozenset
    landmarks: dict = field(default_factory=dict)
    success_prob: float = 0.8
    slip_prob: float = 0.1
    step_reward: float = -1.0
    size: str = "full"

    def __post_init__(self):
        if not self.actions:
            raise DomainError("action list is empty")
        for kind, cells in self.landmarks.items():
            for cx, cy in cells:
                if not (0 <= cx < self.width and 0 <= cy < self.height):
                    raise DomainError(f"landmark {kind} at {(cx, cy)} outside the map")
        free = [[(cx, cy) not in self.walls for cy in range(self.height)] for cx in range(self.width)]
        object.__setattr__(self, "_free", free)
        lookup = {}
        for kind, cells in self.landmarks.items():
            for cell in cells:
                lookup[cell] = kind
        object.__setattr__(self, "_cell_kind", lookup)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def is_free(self, cx: int, cy: int) -> bool:
        return 0 <= cx < self.width and 0 <= cy < self.height and self._free[cx][cy]

    def free_cells(self) -> list[tuple[int, int]]:
        return [(cx, cy) for cy in range(self.height) for cx in range(self.width) if self._free[cx][cy]]

    def reachable_from(self, cell: tuple[int, int]) -> set:
        seen = {cell}
        todo = deque([cell])
        while todo:
            cx, cy = todo.popleft()
            for d in range(4):
                nxt = (cx + int(_DX[d]), cy + int(_DY[d]))
                if nxt not in seen and self.is_free(*nxt):
                    seen.add(nxt)
                    todo.append(nxt)
        return seen

    def step(self, state: State, action: int, rng: random.Random, goal_check=None) -> StepOutcome:
        return _STEPPERS[self.domain_id](self, state, action, rng, goal_check)


# -- map text --------------------------------------------------------------------


def parse_map(text: str) -> tuple[int, int, frozenset, dict]:
    rows = [line.rstrip("\n") for line in text.splitlines() if line.strip() and not line.startswith(";")]
    if not rows:
        raise DomainError("map has no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DomainError("map rows differ in length")
    walls = set()
    landmarks: dict = {}
    for cy, row in enumerate(rows):
        for cx, ch in enumerate(row):
            if ch == "#":
                walls.add((cx, cy))
            elif ch == ".":
                continue
            elif ch.isdigit() and ch != "0":
                landmarks.setdefault(int(ch), []).append((cx, cy))
            elif ch in "CMDFSI":
                landmarks.setdefault(ch, []).append((cx, cy))
            else:
                raise DomainError(f"unknown map character {ch!r} at {(cx, cy)}")
    return width, len(rows), frozenset(walls), {k: tuple(v) for k, v in landmarks.items()}


def format_map(width: int, height: int, walls, landmarks: dict, comment: str = "") -> str:
    grid = [["." for _ in range(width)] for _ in range(height)]
    for cx, cy in walls:
        grid[cy][cx] = "#"
    for kind, cells in landmarks.items():
        for cx, cy in cells:
            grid[cy][cx] = str(kind)
    lines = [f"; {line}" for line in comment.splitlines()] if comment else []
    return "\n".join(lines + ["".join(r) for r in grid]) + "\n"


def bundled_map(name: str) -> str:
    return resources.files(__package__).joinpath("maps", name).read_text()


def _parse_size(size: str) -> tuple[int, int]:
    w, _, h = size.lower().partition("x")
    try:
        return int(w), int(h)
    except ValueError:
        raise DomainError(f"bad size {size!r}; expected 'full', 'desk' or 'WxH'") from None


def generate_map(domain_id: str, width: int, height: int, *, seed: int = 0, wall_density: float | None = None,
                 n_landmarks: int = 4) -> str:
    """Procedural geometry for sizes without a bundled map."""
    rng = random.Random(seed)
    walls: set = set()
    marks: dict = {}
    if domain_id == "maze":
        density = 0.2 if wall_density is None else wall_density
        for cy in range(height):
            for cx in range(width):
                if rng.random() < density:
                    walls.add((cx, cy))
        walls = _keep_largest_component(width, height, walls)
    elif domain_id == "four_rooms":
        mx, my = width // 2, height // 2
        for cy in range(height):
            walls.add((mx, cy))
        for cx in range(width):
            walls.add((cx, my))
        for door in ((mx, my // 2), (mx, my + 1 + (height - my - 1) // 2),
                     (mx // 2, my), (mx + 1 + (width - mx - 1) // 2, my)):
            walls.discard(door)
    elif domain_id == "taxi":
        corners = [(0, height - 1), (width - 1, height - 1), (0, 0), (width - 1, 0)]
        extra = [(width // 2, height - 1), (width // 2, 0), (0, height // 2), (width - 1, height // 2)]
        spots = corners + extra
        if not 1 <= n_landmarks <= len(spots):
            raise DomainError(f"taxi supports 1..{len(spots)} landmarks")
        for k in range(n_landmarks):
            marks[k + 1] = [spots[k]]
        if wall_density:
            free_marks = {c for cells in marks.values() for c in cells}
            for cy in range(height):
                for cx in range(width):
                    if (cx, cy) not in free_marks and rng.random() < wall_density:
                        walls.add((cx, cy))
            walls = _keep_largest_component(width, height, walls)
    elif domain_id == "minecraft":
        cells = [(cx, cy) for cy in range(height) for cx in range(width)]
        rng.shuffle(cells)
        n_forest = max(2, (width * height) // 40)
        marks["F"] = cells[:n_forest]
        marks["S"] = cells[n_forest:n_forest + 2]
        marks["I"] = cells[n_forest + 2:n_forest + 4]
    elif domain_id == "office":
        raise DomainError("office geometry is only available as the bundled 11x15 map or a map file")
    else:
        raise DomainError(f"unknown domain {domain_id!r}")
    return format_map(width, height, walls, marks, comment=f"{domain_id} {width}x{height} seed={seed}")


def _keep_largest_component(width: int, height: int, walls: set) -> set:
    free = {(cx, cy) for cy in range(height) for cx in range(width)} - walls
    best: set = set()
    seen: set = set()
    for cell in sorted(free):
        if cell in seen:
            continue
        comp = {cell}
        todo = deque([cell])
        while todo:
            cx, cy = todo.popleft()
            for d in range(4):
                nxt = (cx + int(_DX[d]), cy + int(_DY[d]))
                if nxt in free and nxt not in comp:
                    comp.add(nxt)
                    todo.append(nxt)
        seen |= comp
        if len(comp) > len(best):
            best = comp
    return set(walls) | (free - best)


# -- domain construction -----------------------------------------------------------

_BUNDLED = {
    ("maze", "24x24"): "maze_24x24.txt",
    ("four_rooms", "33x33"): "four_rooms_33x33.txt",
    ("office", "11x15"): "office_11x15.txt",
    ("taxi", "30x30"): "taxi_30x30.txt",
    ("minecraft", "22x22"): "minecraft_22x22.txt",
}


def make_domain(domain_id: str, size: str = "full", *, map_text: str | None = None,
                map_file: str | None = None, wall_density: float | None = None,
                n_landmarks: int | None = None, map_seed: int = 0) -> DomainSpec:
    """Build a domain.

    ``size`` is ``"full"``, ``"desk"`` or an explicit ``"WxH"``.  A map file or
    map text overrides the geometry entirely.  ``wall_density`` and
    ``n_landmarks`` only affect procedurally generated maps.
    """
    if domain_id not in DOMAIN_IDS:
        raise DomainError(f"unknown domain {domain_id!r}; choose from {', '.join(DOMAIN_IDS)}")
    label = DEFAULT_SIZES[domain_id].get(size, size)
    if map_file is not None:
        with open(map_file) as fh:
            map_text = fh.read()
    if map_text is None:
        bundled = _BUNDLED.get((domain_id, label))
        if bundled and wall_density is None and n_landmarks is None:
            map_text = bundled_map(bundled)
        else:
            w, h = _parse_size(label)
            if domain_id == "taxi" and n_landmarks is None:
                n_landmarks = 4
            map_text = generate_map(domain_id, w, h, seed=map_seed, wall_density=wall_density,
                                    n_landmarks=n_landmarks or 4)
    width, height, walls, marks = parse_map(map_text)
    return _assemble(domain_id, width, height, walls, marks, label)


def _assemble(domain_id, width, height, walls, marks, label) -> DomainSpec:
    pos = [VariableSpec.continuous("x", 0.0, width), VariableSpec.continuous("y", 0.0, height)]
    moves = MOVE_NAMES
    if domain_id in ("maze", "four_rooms"):
        schema, actions = Schema(pos), moves
    elif domain_id == "taxi":
        n = len([k for k in marks if isinstance(k, int)])
        if n < 2:
            raise DomainError("taxi needs at least two landmarks")
        schema = Schema(pos + [VariableSpec.discrete("l", range(n + 1)), VariableSpec.discrete("p", (0, 1))])
        actions = moves + ("pickup", "dropoff")
    elif domain_id == "office":
        for need in "CMD":
            if need not in marks:
                raise DomainError(f"office map needs at least one {need!r} cell")
        schema = Schema(pos + [VariableSpec.discrete("has_coffee", (0, 1)), VariableSpec.discrete("has_mail", (0, 1))])
        actions = moves
    else:
        for need in "FSI":
            if need not in marks:
                raise DomainError(f"minecraft map needs at least one {need!r} cell")
        items = [VariableSpec.discrete(n, (0, 1)) for n in ("has_wood", "has_stick", "has_stone", "has_iron")]
        schema = Schema(pos + items + [VariableSpec.discrete("axe", (0, 1, 2))])
        actions = moves + ("gather", "craft")
    return DomainSpec(
        domain_id=domain_id,
        schema=schema,
        actions=actions,
        width=width,
        height=height,
        walls=walls,
        landmarks=marks,
        step_reward=STEP_REWARD[domain_id],
        size=label,
    )


# -- dynamics -----------------------------------------------------------------------


def _move(spec: DomainSpec, x: float, y: float, action: int, rng: random.Random) -> tuple[float, float]:
    r = rng.random()
    if r < spec.success_prob:
        d = action
    elif r < spec.success_prob + spec.slip_prob:
        d = _SLIPS[action][0]
    else:
        d = _SLIPS[action][1]
    nx = x + _DX[d]
    ny = y + _DY[d]
    if 0.0 <= nx < spec.width and 0.0 <= ny < spec.height and spec._free[int(nx)][int(ny)]:
        return nx, ny
    return x, y


def _check_action(spec: DomainSpec, action) -> None:
    if not (isinstance(action, int) and 0 <= action < len(spec.actions)):
        raise IllegalAction(f"action {action!r} not in {spec.domain_id} actions {spec.actions}")


def _finish(spec, nxt, reward, goal_check, illegal=False) -> StepOutcome:
    if goal_check is not None and goal_check(nxt):
        return StepOutcome(nxt, GOAL_REWARD, True, illegal)
    return StepOutcome(nxt, reward, False, illegal)


def _step_nav(spec, state, action, rng, goal_check):
    if action.__class__ is not int or not 0 <= action < 4:
        _check_action(spec, action)
    nx, ny = _move(spec, state[0], state[1], action, rng)
    return _finish(spec, (nx, ny), spec.step_reward, goal_check)


def _step_taxi(spec, state, action, rng, goal_check):
    _check_action(spec, action)
    x, y, l, p = state
    if action < 4:
        x, y = _move(spec, x, y, action, rng)
        return _finish(spec, (x, y, l, p), spec.step_reward, goal_check)
    here = spec._cell_kind.get((int(x), int(y)))
    at_landmark = isinstance(here, int)
    if action == 4:  # pickup
        if p == 0 and l > 0 and at_landmark and here == l:
            return _finish(spec, (x, y, 0, 1), spec.step_reward, goal_check)
    elif p == 1 and at_landmark:  # dropoff
        return _finish(spec, (x, y, here, 0), spec.step_reward, goal_check)
    return StepOutcome(state, ILLEGAL_REWARD, False, True)


def _step_office(spec, state, action, rng, goal_check):
    _check_action(spec, action)
    x, y, coffee, mail = state
    x, y = _move(spec, x, y, action, rng)
    here = spec._cell_kind.get((int(x), int(y)))
    if here == "C":
        coffee = 1
    elif here == "M":
        mail = 1
    return _finish(spec, (x, y, coffee, mail), spec.step_reward, goal_check)


def _step_minecraft(spec, state, action, rng, goal_check):
    _check_action(spec, action)
    x, y, wood, stick, stone, iron, axe = state
    if action < 4:
        x, y = _move(spec, x, y, action, rng)
    elif action == 4:  # gather
        here = spec._cell_kind.get((int(x), int(y)))
        if here == "F":
            wood = 1
        elif here == "S":
            stone = 1
        elif here == "I":
            iron = 1
    else:  # craft
        if stick and iron:
            axe, stick, iron = 2, 0, 0
        elif stick and stone:
            axe, stick, stone = 1, 0, 0
        elif wood:
            stick, wood = 1, 0
    return _finish(spec, (x, y, wood, stick, stone, iron, axe), spec.step_reward, goal_check)


_STEPPERS = {
    "maze": _step_nav,
    "four_rooms": _step_nav,
    "taxi": _step_taxi,
    "office": _step_office,
    "minecraft": _step_minecraft,
}


def step(spec: DomainSpec, state: State, action: int, rng: random.Random, goal: Goal | None = None) -> StepOutcome:
    """One simulator transition.  ``done`` is set when ``goal`` becomes satisfied."""
    check = goal_checker(goal, spec.schema) if goal is not None else None
    return spec.step(state, action, rng, check)


# -- task sampling ----------------------------------------------------------------


def _random_position(cell, rng: random.Random) -> tuple[float, float]:
    cx, cy = cell
    return (cx + rng.randrange(_OFFSET_STEPS) / _OFFSET_STEPS, cy + rng.randrange(_OFFSET_STEPS) / _OFFSET_STEPS)


def cell_constraints(cell) -> tuple[Constraint, Constraint]:
    cx, cy = cell
    return (Constraint("x", float(cx), float(cx + 1)), Constraint("y", float(cy), float(cy + 1)))


def sample_task(spec: DomainSpec, rng: random.Random, max_tries: int = 1000) -> Task:
    """Sample a solvable task; raises :class:`DomainError` when retries run out."""
    free = spec.free_cells()
    special = set(spec._cell_kind)
    plain = [c for c in free if c not in special] or free
    last = "no attempt"
    for _ in range(max_tries):
        start = plain[rng.randrange(len(plain))]
        reach = spec.reachable_from(start)
        x, y = _random_position(start, rng)
        d = spec.domain_id
        if d in ("maze", "four_rooms"):
            goal_cell = free[rng.randrange(len(free))]
            if goal_cell == start or goal_cell not in reach:
                last = f"goal {goal_cell} unreachable from {start}"
                continue
            return Task((x, y), Goal(cell_constraints(goal_cell)), d)
        if d == "taxi":
            ids = sorted(k for k in spec.landmarks if isinstance(k, int))
            pick = ids[rng.randrange(len(ids))]
            dest = ids[rng.randrange(len(ids))]
            if pick == dest:
                last = "pickup equals destination"
                continue
            if any(c not in reach for k in (pick, dest) for c in spec.landmarks[k][:1]):
                last = "landmark unreachable"
                continue
            goal = Goal((Constraint("l", values=frozenset({dest})), Constraint("p", values=frozenset({0}))))
            return Task((x, y, pick, 0), goal, f"taxi:dest={dest}")
        if d == "office":
            desks = spec.landmarks["D"]
            desk = desks[rng.randrange(len(desks))]
            needed = [desk, *spec.landmarks["C"][:1], *spec.landmarks["M"][:1]]
            if not all(c in reach for c in needed):
                last = "office items unreachable"
                continue
            goal = Goal(cell_constraints(desk) + (
                Constraint("has_coffee", values=frozenset({1})),
                Constraint("has_mail", values=frozenset({1})),
            ))
            return Task((x, y, 0, 0), goal, f"office:desk={desk[0]},{desk[1]}")
        target = 1 + rng.randrange(2)
        resource = "S" if target == 1 else "I"
        if not (any(c in reach for c in spec.landmarks["F"]) and any(c in reach for c in spec.landmarks[resource])):
            last = "resources unreachable"
            continue
        goal = Goal((Constraint("axe", values=frozenset({target})),))
        name = "stone" if target == 1 else "iron"
        return Task((x, y, 0, 0, 0, 0, 0), goal, f"minecraft:{name}_axe")
    raise DomainError(f"could not sample a solvable {spec.domain_id} task in {max_tries} tries ({last})")


def sample_stream(domain_id: str, seed: int, n_tasks: int, per_task_budget: int, size: str = "full",
                  spec: DomainSpec | None = None) -> TaskStream:
    spec = spec or make_domain(domain_id, size)
    rng = random.Random(seed)
    tasks = tuple(sample_task(spec, rng) for _ in range(n_tasks))
    return TaskStream(domain_id, seed, tasks, per_task_budget, size)


def validate_state(spec: DomainSpec, state: State) -> None:
    spec.schema.validate(state)
    if not spec.is_free(math.floor(state[0]), math.floor(state[1])):
        raise SchemaError(f"state {state} sits inside a wall")
