"""Q-learning over CAT leaves with TD-error driven refinement.

The learner runs in windows of ``hyper.window`` episodes.  At the end of a
window it splits up to ``k_cap`` leaves whose TD-error variance over the
window is at least the mean variance of the splittable leaves, then runs ``hyper.eval_episodes``
greedy episodes; the policy counts as learned once their success rate reaches
``hyper.solve_threshold``.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace
from typing import Callable

from .cat import CAT, CATError, Node
from .mdp import BudgetExhausted


class StaleLeaf(CATError):
    pass


@dataclass(frozen=True)
class Hyper:
    alpha: float = 0.05
    gamma: float = 0.99
    decay: float = 0.997
    min_epsilon: float = 0.05
    stepmax: int = 500
    k_cap: int = 2
    s_factor: float = 10.0
    e_max: int = 500
    delta_thre: float = 0.0
    sigma_thre: float = 0.95
    budget: int = 1_500_000
    # not table-driven
    epsilon0: float = 1.0
    window: int = 50
    eval_episodes: int = 20
    eval_runs: int = 100
    solve_threshold: float = 0.9
    sigma_weights: tuple = (0.5, 0.5)
    resolution: float = 1.0
    intrinsic_reward: float = 500.0
    context_freq_factor: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 < self.min_epsilon <= 1:
            raise ValueError("min_epsilon must be in (0, 1]")
        if self.k_cap < 0:
            raise ValueError("k_cap must be non-negative")
        if self.stepmax <= 0 or self.window <= 0:
            raise ValueError("stepmax and window must be positive")

    def with_(self, **changes) -> "Hyper":
        return replace(self, **changes)

    def epsilon(self, episode: int) -> float:
        return max(self.min_epsilon, self.epsilon0 * self.decay ** episode)


class QTable:
    """Action values per CAT leaf; rows of refined leaves seed their children."""

    def __init__(self, n_actions: int):
        self.n_actions = n_actions
        self.rows: dict[str, list[float]] = {}
        self._retired: dict[str, list[float]] = {}

    def row(self, leaf: Node) -> list[float]:
        r = self.rows.get(leaf.id)
        if r is None:
            r = self._inherit(leaf)
            self.rows[leaf.id] = r
        return r

    def _inherit(self, leaf: Node) -> list[float]:
        p = leaf.parent
        while p is not None:
            got = self._retired.get(p.id)
            if got is not None:
                return list(got)
            got = self.rows.get(p.id)
            if got is not None:
                return list(got)
            p = p.parent
        return [0.0] * self.n_actions

    def value(self, leaf: Node, action: int) -> float:
        return self.row(leaf)[action]

    def on_refine(self, leaf: Node) -> None:
        r = self.rows.pop(leaf.id, None)
        if r is not None:
            self._retired[leaf.id] = r

    def copy(self) -> "QTable":
        other = QTable(self.n_actions)
        other.rows = {k: list(v) for k, v in self.rows.items()}
        other._retired = {k: list(v) for k, v in self._retired.items()}
        return other


def allowed_failures(n_runs: int, threshold: float) -> int:
    """Failures ``n_runs`` evaluation runs can absorb while still reaching ``threshold``."""
    return n_runs - math.ceil(threshold * n_runs - 1e-9)


def argmax(row) -> int:
    best = 0
    top = row[0]
    for i in range(1, len(row)):
        if row[i] > top:
            top = row[i]
            best = i
    return best


def q_update(q: QTable, leaf: Node, action: int, reward: float, next_leaf: Node, done: bool, hyper: Hyper) -> float:
    """One Q-learning backup; returns the TD error."""
    if leaf.split is not None or next_leaf.split is not None:
        raise StaleLeaf("Q update on a refined (non-leaf) abstract state")
    row = q.row(leaf)
    target = reward if done else reward + hyper.gamma * max(q.row(next_leaf))
    td = target - row[action]
    row[action] += hyper.alpha * td
    return td


def select_action(q: QTable, leaf: Node, epsilon: float, rng: random.Random) -> int:
    if rng.random() < epsilon:
        return rng.randrange(q.n_actions)
    return argmax(q.row(leaf))


class GreedyPolicy:
    def __init__(self, cat: CAT, q: QTable):
        self.cat = cat
        self.q = q

    def act(self, state) -> int:
        return argmax(self.q.row(self.cat.lookup(state)))

    __call__ = act

    def copy(self) -> "GreedyPolicy":
        cat = self.cat.copy()
        return GreedyPolicy(cat, self.q.copy())


@dataclass
class LearnStats:
    td: dict = field(default_factory=dict)  # leaf id -> [count, mean, M2]
    episode_returns: list = field(default_factory=list)
    successes: list = field(default_factory=list)
    timesteps: int = 0
    recent_success_len: int | None = None
    longest_success_len: int = 0
    refinements: int = 0

    def td_variances(self) -> dict[str, float]:
        return {k: m2 / n for k, (n, _, m2) in self.td.items() if n >= 2}


class EpisodeLog:
    """CSV writer for per-episode training records."""

    COLUMNS = ("episode", "steps", "return", "leaf_count", "epsilon")

    def __init__(self, fh):
        self._w = csv.writer(fh, lineterminator="\n")
        self._w.writerow(self.COLUMNS)

    def __call__(self, episode, steps, ret, leaf_count, epsilon):
        self._w.writerow((episode, steps, repr(float(ret)), leaf_count, repr(float(epsilon))))


class CatRL:
    """A resumable CAT+RL learner bound to one MDP view."""

    def __init__(self, mdp, cat: CAT, hyper: Hyper, rng: random.Random, *, q: QTable | None = None,
                 refine: bool = True, option_mode: bool = False, episodes_done: int = 0,
                 start_state=None, log: Callable | None = None):
        self.mdp = mdp
        self.cat = cat
        self.hyper = hyper
        self.rng = rng
        self.q = q if q is not None else QTable(mdp.n_actions)
        self.refine_enabled = refine and hyper.k_cap > 0
        self.option_mode = option_mode
        self.episodes = episodes_done
        self.start_state = start_state
        self.stats = LearnStats()
        self.log = log
        self.learned = False
        self.last_eval = 0.0
        self.stepmax = mdp.stepmax

    # -- episodes --------------------------------------------------------------

    def _start(self):
        return self.start_state if self.start_state is not None else self.mdp.reset(self.rng)

    def _run(self, epsilon: float, learn: bool) -> tuple[bool, int, float]:
        mdp, cat, q, rng = self.mdp, self.cat, self.q, self.rng
        alpha, gamma = self.hyper.alpha, self.hyper.gamma
        n = q.n_actions
        td_stats = self.stats.td
        s = self._start()
        leaf = cat.lookup(s)
        row = q.row(leaf)
        ret = 0.0
        for t in range(self.stepmax):
            if rng.random() < epsilon:
                a = rng.randrange(n)
            else:
                a = argmax(row)
            s2, r, done = mdp.step(s, a, rng)
            ret += r
            leaf2 = cat.lookup(s2)
            row2 = q.row(leaf2)
            if learn:
                target = r if done else r + gamma * max(row2)
                td = target - row[a]
                row[a] += alpha * td
                rec = td_stats.get(leaf.id)
                if rec is None:
                    td_stats[leaf.id] = [1, td, 0.0]
                else:
                    rec[0] += 1
                    d = td - rec[1]
                    rec[1] += d / rec[0]
                    rec[2] += d * (td - rec[1])
            if done:
                return True, t + 1, ret
            s, leaf, row = s2, leaf2, row2
        return False, self.stepmax, ret

    def _note_success(self, length: int) -> None:
        self.stats.recent_success_len = length
        self.stats.longest_success_len = max(self.stats.longest_success_len, length)
        if self.option_mode:
            # with several start states the latest success may come from the nearest one, so the
            # limit follows the longest success seen by this learner
            cap = self.mdp.stepmax
            self.stepmax = max(1, min(cap, int(self.hyper.s_factor * self.stats.longest_success_len)))

    def evaluate(self, n: int | None = None) -> float:
        """Greedy success rate; stops as soon as the solve threshold is out of reach."""
        n = self.hyper.eval_episodes if n is None else n
        allowed = allowed_failures(n, self.hyper.solve_threshold)
        wins = runs = 0
        while runs < n and runs - wins <= allowed:
            runs += 1
            ok, length, _ = self._run(0.0, learn=False)
            self.stats.timesteps += length
            if ok:
                wins += 1
                self._note_success(length)
        self.last_eval = wins / runs
        return self.last_eval

    def _refine_window(self) -> None:
        # atomic leaves are excluded from both the ranking and the mean: their
        # dispersion is irreducible noise that no split can explain
        cat = self.cat
        variances = {}
        for leaf_id, var in self.stats.td_variances().items():
            leaf = cat.nodes.get(leaf_id)
            if leaf is not None and leaf.split is None and cat.splittable_vars(leaf):
                variances[leaf_id] = var
        self.stats.td.clear()
        if not variances:
            return
        mean = sum(variances.values()) / len(variances)
        ranked = sorted(variances.items(), key=lambda kv: (-kv[1], kv[0]))
        done = 0
        for leaf_id, var in ranked[: self.hyper.k_cap]:
            # ">=" rather than ">" so a lone leaf (whose variance is the mean) can split
            if var < mean or var <= 0.0:
                break
            leaf = cat.nodes[leaf_id]
            self.q.on_refine(leaf)
            cat.refine(leaf)
            done += 1
        self.stats.refinements += done

    def train(self, max_episodes: int | None = None, check_first: bool = False) -> bool:
        """Train until learned, ``max_episodes`` more episodes, or the budget runs out."""
        hyper = self.hyper
        try:
            if check_first and self.evaluate() >= hyper.solve_threshold:
                self.learned = True
                return True
            start = self.episodes
            while max_episodes is None or self.episodes - start < max_episodes:
                eps = hyper.epsilon(self.episodes)
                ok, length, ret = self._run(eps, learn=True)
                self.episodes += 1
                self.stats.timesteps += length
                self.stats.episode_returns.append(ret)
                self.stats.successes.append(ok)
                if ok:
                    self._note_success(length)
                if self.log is not None:
                    self.log(self.episodes, length, ret, len(self.cat.leaves()), eps)
                if self.episodes % hyper.window == 0:
                    if self.refine_enabled:
                        self._refine_window()
                    if self.evaluate() >= hyper.solve_threshold:
                        self.learned = True
                        return True
        except BudgetExhausted:
            pass
        self.learned = False
        return False

    def policy(self) -> GreedyPolicy:
        return GreedyPolicy(self.cat, self.q)


def run_catrl(mdp_view, cat: CAT, start_state, hyper: Hyper, rng: random.Random | None = None, *,
              option_mode: bool = False, refine: bool = True, max_episodes: int | None = None,
              log: Callable | None = None):
    """Learn a greedy policy over ``cat`` (refining it in place).

    Returns ``(cat, policy, stats, learned)``.  In option mode training halts
    after ``hyper.e_max`` episodes.
    """
    if hyper.budget <= 0:
        raise ValueError("budget must be positive")
    rng = rng if rng is not None else random.Random(0)
    learner = CatRL(mdp_view, cat, hyper, rng, refine=refine, option_mode=option_mode,
                    start_state=start_state, log=log)
    limit = max_episodes if max_episodes is not None else (hyper.e_max if option_mode else None)
    learned = learner.train(limit)
    return learner.cat, learner.policy(), learner.stats, learned


def evaluate_policy(policy, mdp_view, n_runs: int, rng: random.Random, threshold: float | None = None) -> float:
    """Fraction of greedy episodes that reach the goal within the view's stepmax.

    With a ``threshold`` the runs stop once it can no longer be met, and the
    rate covers the runs actually made.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    allowed = n_runs if threshold is None else allowed_failures(n_runs, threshold)
    wins = runs = 0
    while runs < n_runs and runs - wins <= allowed:
        runs += 1
        s = mdp_view.reset(rng)
        for _ in range(mdp_view.stepmax):
            s, _, done = mdp_view.step(s, policy.act(s), rng)
            if done:
                wins += 1
                break
    return wins / runs
