"""Step budgets and MDP views over a domain simulator.

Every simulator call made while solving a task goes through a
:class:`StepBudget`, so the per-task interaction count is exact and can never
exceed the budget: the step that would overrun it raises
:class:`BudgetExhausted` instead of running.
"""

from __future__ import annotations

import random
from typing import Protocol, Sequence

from .core import State, Task, goal_checker
from .domains import DomainSpec


class BudgetExhausted(Exception):
    pass


class StepBudget:
    def __init__(self, limit: int | float):
        if limit <= 0:
            raise ValueError("budget must be positive")
        self.limit = limit
        self.used = 0

    @property
    def remaining(self):
        return self.limit - self.used

    @property
    def exhausted(self) -> bool:
        return self.used >= self.limit

    def spend(self) -> None:
        if self.used >= self.limit:
            raise BudgetExhausted(f"step budget of {self.limit} exhausted")
        self.used += 1


class MDPView(Protocol):
    n_actions: int
    stepmax: int

    def reset(self, rng: random.Random) -> State: ...

    def step(self, state: State, action: int, rng: random.Random) -> tuple[State, float, bool]: ...


class TaskEnv:
    """A domain bound to one task, counting every simulator call."""

    def __init__(self, spec: DomainSpec, task: Task, budget: StepBudget | None = None):
        self.spec = spec
        self.task = task
        self.budget = budget if budget is not None else StepBudget(float("inf"))
        self.goal_check = goal_checker(task.goal, spec.schema)
        self.n_actions = spec.n_actions

    def step(self, state, action, rng):
        self.budget.spend()
        return self.spec.step(state, action, rng, self.goal_check)

    def is_goal(self, state) -> bool:
        return self.goal_check(state)


class TaskMDP:
    """The full task as an MDP view: episodes start at the task's initial state."""

    def __init__(self, env: TaskEnv, stepmax: int, start_states: Sequence[State] | None = None):
        self.env = env
        self.n_actions = env.n_actions
        self.stepmax = stepmax
        self.start_states = list(start_states) if start_states else [env.task.initial_state]

    def reset(self, rng: random.Random) -> State:
        if len(self.start_states) == 1:
            return self.start_states[0]
        return self.start_states[rng.randrange(len(self.start_states))]

    def step(self, state, action, rng):
        out = self.env.step(state, action, rng)
        return out.next_state, out.reward, out.done

    def is_success(self, state) -> bool:
        return self.env.goal_check(state)
