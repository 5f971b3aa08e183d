"""The continual plan / learn / invent loop.

Per task the agent alternates two phases until the task counts as solved or
the step budget runs out:

* **evaluation**: if the learned options already chain from the initial
  abstract state to the goal, run that plan 100 times (with replanning on
  failure); a success rate of at least 0.9 solves the task.
* **attempt**: walk from the initial state with a plan that may contain
  unlearned signatures.  A signature is trained with CAT+RL on its option
  MDP; once learned, its greedy rollout is cut into new options and the
  learner's tree becomes the universal tree.  Learned options are executed,
  and a failing option is flagged for fine-tuning before the agent replans
  from wherever it ended up.

Every simulator step (training, rollouts, execution, evaluation) is charged to
the task's :class:`~chirp.mdp.StepBudget`.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .cat import CAT, LineageError, format_cat, merge_cat, parse_cat, union_cat
from .catrl import CatRL, Hyper, QTable, allowed_failures, evaluate_policy
from .core import Goal, Task, TaskStream, _format_goal, _parse_goal
from .domains import DomainSpec, make_domain
from .mdp import BudgetExhausted, StepBudget, TaskEnv, TaskMDP
from .options import (GOAL_NODE, AbstractOption, InapplicableOption, OptionModel, OptionSignature, RolloutFailed,
                      options_from_trajectory, rollout, termination_test)
from .planner import PlannableCAT, compute_option_plan, invent_option_signature

METHODS = ("chirp", "catrl_baseline", "flat_q_baseline")


class OptionMDP:
    """Train toward an option's termination set: +``intrinsic`` and episode end on arrival."""

    def __init__(self, env: TaskEnv, reached, stepmax: int, start_states, intrinsic: float = 500.0):
        if not start_states:
            raise ValueError("an option MDP needs at least one start state")
        self.env = env
        self.reached = reached
        self.stepmax = stepmax
        self.start_states = list(start_states)
        self.intrinsic = intrinsic
        self.n_actions = env.n_actions
        self._step_reward = env.spec.step_reward

    def reset(self, rng: random.Random):
        if len(self.start_states) == 1:
            return self.start_states[0]
        return self.start_states[rng.randrange(len(self.start_states))]

    def step(self, state, action, rng):
        out = self.env.step(state, action, rng)
        s2 = out.next_state
        if self.reached(s2):
            return s2, self.intrinsic, True
        # reaching the task goal is not this option's business: no bonus, no episode end
        return s2, (self._step_reward if out.done else out.reward), False


def option_stepmax(recent_success_len: int | None, hyper: Hyper) -> int:
    if not recent_success_len:
        return hyper.stepmax
    return max(1, min(hyper.stepmax, int(hyper.s_factor * recent_success_len)))


def make_option_mdp(env: TaskEnv, target: AbstractOption | OptionSignature, cat: CAT, hyper: Hyper,
                    start_states, recent_success_len: int | None = None) -> OptionMDP:
    """Option MDP whose goal is ``target``'s termination set (regions of ``cat`` nodes, or the task goal)."""
    if not target.termination:
        raise ValueError("termination set is empty")
    reached = termination_test(cat, target.termination, target.goal)
    if recent_success_len is None:
        recent_success_len = getattr(target, "recent_success_len", None)
    return OptionMDP(env, reached, option_stepmax(recent_success_len, hyper), start_states,
                     hyper.intrinsic_reward)


def execute_option(option: AbstractOption, env: TaskEnv, state, rng: random.Random, stepmax: int,
                   stop_at_goal: bool = True) -> tuple[bool, object, int]:
    """Run the option's greedy policy until it terminates, times out, or (optionally) the task goal is hit."""
    if not option.applicable(state):
        raise InapplicableOption(f"inapplicable option {option.option_id}")
    act = option.policy().act
    done = option.terminated
    s = state
    for n in range(1, stepmax + 1):
        out = env.step(s, act(s), rng)
        s = out.next_state
        if done(s):
            return True, s, n
        if stop_at_goal and out.done:
            return False, s, n
    return False, s, stepmax


@dataclass
class Outcome:
    kind: str  # learn | execute | finetune | evaluate
    label: str
    success: bool
    steps: int


@dataclass
class Invention:
    task_index: int
    trajectory: object
    context: frozenset
    endpoints: object
    option_ids: list


@dataclass
class TaskResult:
    task_index: int
    solved: bool
    timesteps: int
    eval_rate: float = 0.0
    outcomes: list = field(default_factory=list)
    plan: list = field(default_factory=list)
    option_count: int = 0
    leaf_count: int = 0


class GridCAT(CAT):
    """The finest partition the split rule allows, reached on first lookup; never refined by learning."""

    def lookup(self, state):
        leaf = super().lookup(state)
        while self.splittable_vars(leaf):
            self.refine(leaf)
            leaf = super().lookup(state)
        return leaf

    abstract_state_of = lookup


class Agent:
    """Solves a stream of tasks in one domain, carrying the universal CAT (and options) forward."""

    def __init__(self, spec: DomainSpec, hyper: Hyper, method: str = "chirp", seed: int = 0,
                 *, eval_replans: int = 3, attempt_replans: int = 25, max_exec_failures: int = 2):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        self.spec = spec
        self.hyper = hyper
        self.method = method
        self.rng = random.Random(f"{seed}:agent")
        cat_cls = GridCAT if method == "flat_q_baseline" else CAT
        self.cat: CAT = cat_cls(spec.schema, hyper.resolution)
        self.model = OptionModel()
        self.inventions: list[Invention] = []
        self.eval_replans = eval_replans
        self.attempt_replans = attempt_replans
        self.max_exec_failures = max_exec_failures
        self.tasks_done = 0
        # options whose fine-tuning failed during the current task are left out of its plans
        self._suspended: set = set()
        # option targets that could not be learned during the current task
        self._failed_targets: set = set()
        # execution failures per option during the current task
        self._exec_failures: dict = {}

    # -- shared ----------------------------------------------------------------

    def solve_task(self, task: Task, budget: StepBudget | int | None = None, task_index: int | None = None
                   ) -> TaskResult:
        if budget is None:
            budget = StepBudget(self.hyper.budget)
        elif not isinstance(budget, StepBudget):
            budget = StepBudget(budget)
        index = self.tasks_done if task_index is None else task_index
        env = TaskEnv(self.spec, task, budget)
        result = TaskResult(index, False, 0)
        if env.is_goal(task.initial_state):
            result.solved = True
            result.eval_rate = 1.0
        elif self.method == "chirp":
            self._solve_chirp(env, result)
        else:
            self._solve_baseline(env, result)
        result.timesteps = budget.used
        result.option_count = len(self.model)
        result.leaf_count = len(self.cat.leaves())
        self.tasks_done = index + 1
        return result

    def _solve_baseline(self, env: TaskEnv, result: TaskResult) -> None:
        hyper = self.hyper
        mdp = TaskMDP(env, hyper.stepmax)
        learner = CatRL(mdp, self.cat, hyper, self.rng, refine=self.method == "catrl_baseline")
        try:
            while True:
                before = env.budget.used
                if not learner.train(None):
                    break
                result.outcomes.append(Outcome("learn", "task", True, env.budget.used - before))
                before = env.budget.used
                rate = evaluate_policy(learner.policy(), mdp, hyper.eval_runs, self.rng, hyper.solve_threshold)
                result.eval_rate = rate
                result.outcomes.append(Outcome("evaluate", "task", rate >= hyper.solve_threshold,
                                               env.budget.used - before))
                if rate >= hyper.solve_threshold:
                    result.solved = True
                    break
        except BudgetExhausted:
            pass
        result.plan = [f"greedy policy over {len(self.cat.leaves())} leaves"]

    # -- CHiRP -----------------------------------------------------------------

    def _solve_chirp(self, env: TaskEnv, result: TaskResult) -> None:
        cache: dict = {}
        self._suspended = set()
        self._failed_targets = set()
        self._exec_failures = {}
        s0 = env.task.initial_state
        try:
            while True:
                before = env.budget.used
                if self._learned_plan(env, s0) is not None:
                    rate = self._evaluate(env, result)
                    result.eval_rate = rate
                    if rate >= self.hyper.solve_threshold:
                        result.solved = True
                        break
                self._attempt(env, s0, cache, result)
                if env.budget.used == before:
                    break  # no way to make progress
        except BudgetExhausted:
            pass
        plan = self._learned_plan(env, s0)
        result.plan = plan.describe(self.cat) if plan is not None else []

    def _usable(self) -> list[AbstractOption]:
        return [o for o in self.model if o not in self._suspended]

    def _learned_plan(self, env: TaskEnv, state, pcat: PlannableCAT | None = None):
        return compute_option_plan(self._usable(), self.cat, self.cat.lookup(state), env.task.goal,
                                   learned_only=True, weights=self.hyper.sigma_weights, pcat=pcat)

    def _evaluate(self, env: TaskEnv, result: TaskResult) -> float:
        """Success rate of the learned-options policy over ``eval_runs`` runs from the initial state."""
        hyper = self.hyper
        pcat = PlannableCAT(self.cat, self._usable(), env.task.goal, weights=hyper.sigma_weights)
        plans: dict = {}
        tries: dict = {}
        fails: dict = {}
        wins = runs = 0
        allowed = allowed_failures(hyper.eval_runs, hyper.solve_threshold)
        before = env.budget.used
        while runs < hyper.eval_runs and runs - wins <= allowed:
            runs += 1
            s = env.task.initial_state
            ok = False
            for _ in range(self.eval_replans + 1):
                leaf = self.cat.lookup(s)
                plan = plans.get(leaf.id, 0)
                if plan == 0:
                    plan = plans[leaf.id] = compute_option_plan(self._usable(), self.cat, leaf, env.task.goal,
                                                                learned_only=True, pcat=pcat)
                if plan is None:
                    break
                for o in plan.steps:
                    if not o.applicable(s):
                        break
                    tries[o] = tries.get(o, 0) + 1
                    good, s, _ = execute_option(o, env, s, self.rng, option_stepmax(o.recent_success_len, hyper))
                    if env.is_goal(s):
                        break
                    if not good:
                        fails[o] = fails.get(o, 0) + 1
                        break
                if env.is_goal(s):
                    ok = True
                    break
            wins += ok
        for o, n in tries.items():
            if fails.get(o, 0) > (1.0 - hyper.solve_threshold) * n:
                o.needs_tuning = True
        rate = wins / runs
        result.outcomes.append(Outcome("evaluate", "plan", rate >= hyper.solve_threshold, env.budget.used - before))
        return rate

    def _arrival(self, ids, s) -> str | None:
        """The node among ``ids`` whose region holds ``s``: where the previous step delivered the agent."""
        for i in sorted(ids):
            if i != GOAL_NODE and i in self.cat and self.cat.region_contains(self.cat.node(i), s):
                return i
        return None

    def _attempt(self, env: TaskEnv, s0, cache: dict, result: TaskResult) -> bool:
        goal = env.task.goal
        s = s0
        arrival = None
        for _ in range(self.attempt_replans):
            if env.is_goal(s):
                return True
            plan = compute_option_plan(self._usable(), self.cat, self.cat.lookup(s), goal,
                                       weights=self.hyper.sigma_weights)
            steps = plan.steps if plan is not None and plan.steps else []
            if not steps or any(isinstance(x, OptionSignature) and (x.termination, x.goal) in self._failed_targets
                                for x in steps):
                # nothing to plan with, or the plan repeats a target that already failed to learn:
                # learn the rest of the task directly (resuming that learner if it exists)
                steps = [invent_option_signature(self.cat, s, goal)]
            for k, step in enumerate(steps):
                if isinstance(step, OptionSignature):
                    # the first invented option also starts from where the previous step arrived, so the
                    # learned options chain without a gap
                    lead = arrival if arrival is not None else (next(iter(step.initiation)) if k > 0 else None)
                    ok, s = self._learn_signature(env, step, s, lead, cache, result)
                else:
                    ok, s = self._run_option(env, step, s, result)
                if env.is_goal(s):
                    return True
                if not ok:
                    arrival = None
                    break
                arrival = self._arrival(step.termination, s)
        return env.is_goal(s)

    def _learn_signature(self, env: TaskEnv, sig: OptionSignature, s, lead, cache: dict, result: TaskResult):
        hyper = self.hyper
        reached = termination_test(self.cat, sig.termination, sig.goal)
        if reached(s):
            return True, s
        # the option MDP depends only on where the option must end, so a replan that reaches the same
        # target from another node resumes the same learner
        key = (sig.termination, sig.goal)
        learner = cache.get(key)
        resumed = learner is not None
        if learner is None:
            mdp = OptionMDP(env, reached, hyper.stepmax, [s], hyper.intrinsic_reward)
            learner = CatRL(mdp, self.cat.copy(), hyper, self.rng, start_state=s)
            cache[key] = learner
        else:
            learner.start_state = s
        before = env.budget.used
        learned = learner.train(hyper.e_max, check_first=resumed)
        label = sig.describe()
        result.outcomes.append(Outcome("learn", label, learned, env.budget.used - before))
        if env.budget.exhausted:
            raise BudgetExhausted("step budget exhausted while learning")
        if not learned:
            self._failed_targets.add(key)
            return False, s
        try:
            traj = rollout(learner.policy(), learner.mdp, self.rng, retries=5, start_state=s)
        except RolloutFailed:
            return False, s
        report: dict = {}
        opts = options_from_trajectory(
            learner.cat, learner.q, traj, delta_thre=hyper.delta_thre, sigma_thre=hyper.sigma_thre,
            weights=hyper.sigma_weights, target=None if sig.goal is not None else sig.termination,
            goal=sig.goal, lead_node=lead, context_factor=hyper.context_freq_factor,
            provenance={"task": result.task_index}, report=report,
        )
        kept = []
        for o in opts:
            o.success_rate = learner.last_eval
            o.episodes = learner.episodes
            kept.append(self.model.add(o).option_id)
        self.inventions.append(Invention(result.task_index, traj, report.get("context", frozenset()),
                                         report.get("endpoints"), kept))
        try:
            self.cat = merge_cat(self.cat, learner.cat)
        except LineageError:
            self.cat = union_cat(self.cat, learner.cat)
        del cache[key]
        return True, traj.transitions[-1].next_state

    def _run_option(self, env: TaskEnv, o: AbstractOption, s, result: TaskResult):
        if not o.applicable(s):
            return False, s
        if o.needs_tuning:
            self._finetune(env, o, s, result)
            if o.needs_tuning:
                self._suspended.add(o)
                return False, s
        before = env.budget.used
        ok, s2, n = execute_option(o, env, s, self.rng, option_stepmax(o.recent_success_len, self.hyper))
        result.outcomes.append(Outcome("execute", f"option {o.option_id}", ok, env.budget.used - before))
        if ok:
            # the longest success since the last failure, so a short hop does not starve a longer one
            o.recent_success_len = max(o.recent_success_len or 0, n)
            if len(o.start_states) < 20:
                o.start_states.append(s)
        else:
            o.needs_tuning = True
            o.recent_success_len = None  # fall back to the task stepmax until it succeeds again
            fails = self._exec_failures.get(o.option_id, 0) + 1
            self._exec_failures[o.option_id] = fails
            if fails >= self.max_exec_failures:
                # tuning keeps passing from the stored start states but not from here
                self._suspended.add(o)
        return ok, s2

    def _finetune(self, env: TaskEnv, o: AbstractOption, s, result: TaskResult) -> None:
        o.own()
        starts = [s] + [x for x in o.start_states if o.applicable(x)][-9:]
        mdp = make_option_mdp(env, o, o.cat, self.hyper, starts)
        learner = CatRL(mdp, o.cat, self.hyper, self.rng, q=o.q, option_mode=True, episodes_done=o.episodes)
        before = env.budget.used
        learned = learner.train(self.hyper.e_max, check_first=True)
        o.episodes = learner.episodes
        o.success_rate = learner.last_eval
        if learner.stats.longest_success_len:
            o.recent_success_len = learner.stats.longest_success_len
        if learned:
            o.needs_tuning = False
        else:
            o.recent_success_len = None
        result.outcomes.append(Outcome("finetune", f"option {o.option_id}", learned, env.budget.used - before))


def solve_stream(stream: TaskStream, hyper: Hyper, method: str = "chirp", *, spec: DomainSpec | None = None,
                 agent: Agent | None = None, start: int = 0, checkpoint_dir: str | Path | None = None,
                 on_result=None) -> list[TaskResult]:
    """Solve ``stream`` in order, carrying knowledge across tasks."""
    spec = spec if spec is not None else make_domain(stream.domain_id, stream.size)
    agent = agent if agent is not None else Agent(spec, hyper, method, seed=stream.seed)
    results = []
    for k in range(start, len(stream.tasks)):
        res = agent.solve_task(stream.tasks[k], StepBudget(stream.per_task_budget), task_index=k)
        results.append(res)
        if on_result is not None:
            on_result(res)
        if checkpoint_dir is not None:
            save_checkpoint(agent, Path(checkpoint_dir) / f"checkpoint_task{k:03d}.json")
    return results


# -- checkpoints -------------------------------------------------------------------


def _rng_state(rng: random.Random):
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _set_rng_state(rng: random.Random, data) -> None:
    version, internal, gauss = data
    rng.setstate((version, tuple(internal), gauss))


def _q_json(q: QTable) -> dict:
    return {"n_actions": q.n_actions, "rows": q.rows, "retired": q._retired}


def _q_from(d: dict) -> QTable:
    q = QTable(d["n_actions"])
    q.rows = {k: list(v) for k, v in d["rows"].items()}
    q._retired = {k: list(v) for k, v in d["retired"].items()}
    return q


def checkpoint_dict(agent: Agent) -> dict:
    # options invented from one rollout share a tree and a table until fine-tuned; each pair is
    # stored once so a reload shares it again (lookups on one option then grow the others' tree)
    policies: list = []
    slot: dict = {}
    opts = []
    for o in agent.model:
        key = (id(o.cat), id(o.q))
        if key not in slot:
            slot[key] = len(policies)
            policies.append({"cat": format_cat(o.cat), "q": _q_json(o.q)})
        opts.append({
            "id": o.option_id,
            "initiation": sorted(o.initiation),
            "termination": sorted(o.termination),
            "goal": _format_goal(o.goal) if o.goal is not None else None,
            "policy": slot[key],
            "shared": o.shared,
            "episodes": o.episodes,
            "success_rate": o.success_rate,
            "recent_success_len": o.recent_success_len,
            "needs_tuning": o.needs_tuning,
            "start_states": [list(s) for s in o.start_states],
            "provenance": {k: list(v) if isinstance(v, tuple) else v for k, v in o.provenance.items()},
        })
    return {
        "format": "chirp-checkpoint/1",
        "method": agent.method,
        "domain_id": agent.spec.domain_id,
        "size": agent.spec.size,
        "tasks_done": agent.tasks_done,
        "rng": _rng_state(agent.rng),
        "cat": format_cat(agent.cat),
        "next_option_id": agent.model._next_id,
        "policies": policies,
        "options": opts,
    }


def save_checkpoint(agent: Agent, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(agent), sort_keys=True))
    return path


def _read_checkpoint(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != "chirp-checkpoint/1":
        raise ValueError(f"{path}: not a checkpoint file")
    return data


def _model_from(data: dict) -> OptionModel:
    model = OptionModel()
    policies = [(parse_cat(p["cat"]), _q_from(p["q"])) for p in data["policies"]]
    for d in data["options"]:
        cat, q = policies[d["policy"]]
        o = AbstractOption(
            cat=cat, initiation=frozenset(d["initiation"]), termination=frozenset(d["termination"]),
            q=q, shared=d["shared"], goal=_parse_goal(d["goal"]) if d["goal"] is not None else None,
            provenance={k: tuple(v) if isinstance(v, list) else v for k, v in d["provenance"].items()},
            start_states=[tuple(s) for s in d["start_states"]], episodes=d["episodes"],
            success_rate=d["success_rate"], recent_success_len=d["recent_success_len"],
            needs_tuning=d["needs_tuning"],
        )
        model.add(o)
        o.option_id = d["id"]
    model._next_id = data["next_option_id"]
    return model


def load_model(path: str | Path) -> tuple[CAT, OptionModel, dict]:
    """The universal CAT and option model of a checkpoint, without rebuilding the agent."""
    data = _read_checkpoint(path)
    return parse_cat(data["cat"]), _model_from(data), data


def load_checkpoint(path: str | Path, spec: DomainSpec, hyper: Hyper) -> Agent:
    data = _read_checkpoint(path)
    agent = Agent(spec, hyper, data["method"])
    _set_rng_state(agent.rng, data["rng"])
    cat = parse_cat(data["cat"])
    if agent.method == "flat_q_baseline":
        grid = GridCAT.__new__(GridCAT)
        grid.__dict__.update(cat.__dict__)
        cat = grid
    agent.cat = cat
    agent.tasks_done = data["tasks_done"]
    agent.model = _model_from(data)
    return agent
