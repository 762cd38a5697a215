"""Average-reward reinforcement learning for the tabular message policies.

Value evaluation follows Jaakkola's trace equations for POMDPs. At every
step every message ``m`` (and pair ``(m, a)``) is updated as::

    beta <- (1 - chi/K) * gamma_t * beta + chi/K
    V    <- (1 - chi/K) * V + beta * (R - Rbar)

with ``chi`` the visit indicator and ``K`` the visit count. For unvisited
entries this reduces to ``beta *= gamma_t; V += beta * (R - Rbar)``, so only
entries with a live trace need work. They are kept in a sparse active set and
dropped once their trace falls below ``trace_tol``.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .actions import N_ACTIONS
from .driver_policy import TabularPolicy, level0_table, sample_from_rows
from .perception import N_MESSAGES

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LearnerConfig:
    window_length: int = 1000
    # gamma_t = t / (t + gamma_offset)
    gamma_offset: float = 1000.0
    epsilon_increment: float = 0.01
    improvement: str = "increment"
    trace_tol: float = 1e-6
    prune_every: int = 256

    def __post_init__(self):
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if not 0 < self.epsilon_increment < 1:
            raise ValueError("epsilon_increment must lie in (0, 1)")
        if self.improvement not in ("increment", "mixture"):
            raise ValueError("improvement must be 'increment' or 'mixture'")
        if self.gamma_offset < 0 or self.trace_tol < 0:
            raise ValueError("gamma_offset and trace_tol must be >= 0")


class _Traces:
    """Sparse set of entries with a nonzero eligibility trace."""

    def __init__(self, size: int):
        self.pos = np.full(size, -1, dtype=np.int64)
        self.idx = np.empty(64, dtype=np.int64)
        self.beta = np.empty(64)
        self.n = 0

    def clear(self):
        self.pos[self.idx[:self.n]] = -1
        self.n = 0

    def visit(self, i: int, gamma: float, k: int) -> None:
        """Decay all traces by gamma, then apply the visited-entry update to ``i``."""
        n = self.n
        self.beta[:n] *= gamma
        p = self.pos[i]
        if p < 0:
            if n == len(self.idx):
                self.idx = np.resize(self.idx, 2 * n)
                self.beta = np.resize(self.beta, 2 * n)
            p = n
            self.idx[p] = i
            self.beta[p] = 0.0
            self.pos[i] = p
            self.n = n + 1
        self.beta[p] = (1.0 - 1.0 / k) * self.beta[p] + 1.0 / k

    def apply(self, values: np.ndarray, delta: float) -> None:
        n = self.n
        values[self.idx[:n]] += self.beta[:n] * delta

    def prune(self, tol: float) -> None:
        n = self.n
        keep = self.beta[:n] >= tol
        if keep.all():
            return
        self.pos[self.idx[:n][~keep]] = -1
        kept = self.idx[:n][keep]
        self.idx[:len(kept)] = kept
        self.beta[:len(kept)] = self.beta[:n][keep]
        self.n = len(kept)
        self.pos[kept] = np.arange(self.n)

    def get(self, i: int) -> float:
        p = self.pos[i]
        return float(self.beta[p]) if p >= 0 else 0.0


class LearnerState:
    """Values, traces, visit counts and the windowed average-reward estimate."""

    def __init__(self, n_messages: int = N_MESSAGES, n_actions: int = N_ACTIONS,
                 cfg: LearnerConfig = LearnerConfig()):
        self.cfg = cfg
        self.n_messages = n_messages
        self.n_actions = n_actions
        self.V = np.zeros(n_messages)
        self.Q = np.zeros(n_messages * n_actions)
        self.K_m = np.zeros(n_messages, dtype=np.int64)
        self.K_a = np.zeros(n_messages * n_actions, dtype=np.int64)
        self._tm = _Traces(n_messages)
        self._ta = _Traces(n_messages * n_actions)
        self._window = np.zeros(cfg.window_length)
        self._filled = 0
        self.t = 0
        self.Rbar = 0.0

    @property
    def Q_table(self) -> np.ndarray:
        return self.Q.reshape(self.n_messages, self.n_actions)

    @property
    def K_table(self) -> np.ndarray:
        return self.K_a.reshape(self.n_messages, self.n_actions)

    def gamma(self, t: int) -> float:
        return t / (t + self.cfg.gamma_offset)

    def beta_m(self, m: int) -> float:
        return self._tm.get(m)

    def beta_a(self, m: int, a: int) -> float:
        return self._ta.get(m * self.n_actions + a)

    def reset_traces(self) -> None:
        self._tm.clear()
        self._ta.clear()

    def recent_rewards(self) -> np.ndarray:
        """The last ``window_length`` rewards, oldest first."""
        size = len(self._window)
        if self._filled <= size:
            return self._window[:self._filled].copy()
        return np.roll(self._window, -(self._filled % size))

    def record_reward(self, reward: float) -> None:
        size = len(self._window)
        self._window[self._filled % size] = reward
        self._filled += 1
        self.Rbar = estimate_average_reward(self._window[:min(self._filled, size)])


def estimate_average_reward(window) -> float:
    """Mean of the recent rewards (0 before any reward)."""
    window = np.asarray(window, dtype=float)
    return float(window.mean()) if len(window) else 0.0


def step1_update(learner: LearnerState, m: int, a: int, reward: float,
                 gamma: float | None = None) -> LearnerState:
    """Apply one step of the trace/value equations for the visited pair ``(m, a)``.

    The innovation uses the average-reward estimate from the rewards before
    this step; the reward then enters the window. ``gamma`` overrides the
    schedule (for hand-checked examples). Updates ``learner`` in place.
    """
    learner.t += 1
    g = learner.gamma(learner.t) if gamma is None else gamma
    delta = reward - learner.Rbar
    pair = m * learner.n_actions + a

    learner.K_m[m] += 1
    k = learner.K_m[m]
    learner._tm.visit(m, g, k)
    learner.V[m] *= 1.0 - 1.0 / k
    learner._tm.apply(learner.V, delta)

    learner.K_a[pair] += 1
    k = learner.K_a[pair]
    learner._ta.visit(pair, g, k)
    learner.Q[pair] *= 1.0 - 1.0 / k
    learner._ta.apply(learner.Q, delta)

    learner.record_reward(reward)
    if learner.cfg.trace_tol > 0 and learner.t % learner.cfg.prune_every == 0:
        learner._tm.prune(learner.cfg.trace_tol)
        learner._ta.prune(learner.cfg.trace_tol)
    return learner


def greedy_visited_action(learner: LearnerState, m: int) -> int:
    """Argmax of Q over visited actions of ``m``; lowest ordinal on ties, -1 if none."""
    visited = learner.K_table[m] > 0
    if not visited.any():
        return -1
    q = np.where(visited, learner.Q_table[m], -np.inf)
    return int(np.argmax(q))


def step2_improve(policy: TabularPolicy, learner: LearnerState, m: int) -> TabularPolicy:
    """Shift probability toward the best action of ``m`` if it beats ``V(m)``."""
    a = greedy_visited_action(learner, m)
    if a < 0 or not learner.Q_table[m, a] > learner.V[m]:
        return policy
    row = policy.probabilities[m]
    eps = learner.cfg.epsilon_increment
    if learner.cfg.improvement == "increment":
        row[a] += eps
        row /= row.sum()
    else:
        row *= 1.0 - eps
        row[a] += eps
    return policy


def has_converged(avg_reward_history, tolerance: float = 0.01, patience_steps: int = 50_000) -> bool:
    """True iff the last ``patience_steps`` average-reward values span less than ``tolerance``."""
    h = np.asarray(avg_reward_history, dtype=float)
    if patience_steps < 1 or len(h) < patience_steps:
        return False
    tail = h[-patience_steps:]
    return bool(tail.max() - tail.min() < tolerance)


def apply_fallback(policy: TabularPolicy, threshold: int) -> int:
    """Give level-0 rows to messages visited fewer than ``threshold`` times."""
    under = policy.visit_counts < threshold
    table = level0_table(policy.n_messages)
    policy.probabilities[under] = 0.0
    policy.probabilities[np.flatnonzero(under), table[under]] = 1.0
    return int(under.sum())


# -- training orchestration --------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    level_to_train: int = 1
    training_cycles: int = 1000
    epsilon_increment: float = 0.01
    n_c_max: int = 30
    x0_max: float = 200.0
    t_f: float = 200.0
    tolerance: float = 0.01
    patience: int = 50_000
    undertrained_threshold: int = 100
    seed: int = 0
    window_length: int = 1000
    gamma_offset: float = 1000.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.level_to_train < 1:
            raise ValueError("level_to_train must be >= 1")
        if not 0 < self.epsilon_increment < 1:
            raise ValueError("epsilon_increment must lie in (0, 1)")
        if self.training_cycles < 0 or self.n_c_max < 0:
            raise ValueError("training_cycles and n_c_max must be >= 0")
        if self.undertrained_threshold < 0:
            raise ValueError("undertrained_threshold must be >= 0")

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(window_length=self.window_length, gamma_offset=self.gamma_offset,
                             epsilon_increment=self.epsilon_increment)


@dataclass
class TrainingRecord:
    cycle: int
    n_c: int
    steps: int
    mean_reward: float
    Rbar: float
    violated: bool


@dataclass
class TrainingSummary:
    cycles: int
    total_steps: int
    converged_at: int | None
    fallback_rows: int
    wall_time: float
    log: list[TrainingRecord] = field(default_factory=list)


class PolicyTrainee:
    """Harness hook: acts with the live policy and learns from each reward."""

    def __init__(self, policy: TabularPolicy, learner: LearnerState):
        self.policy = policy
        self.learner = learner
        self.rewards: list[float] = []
        self.rbar_history: deque = deque()

    def start_episode(self) -> None:
        self.learner.reset_traces()
        self.rewards = []

    def act(self, code: int, mask: np.ndarray, u: float) -> int:
        row = self.policy.probabilities[code][None, :]
        return int(sample_from_rows(row, mask[None, :], np.array([u]))[0])

    def learn(self, code: int, action: int, reward: float) -> None:
        step1_update(self.learner, code, action, reward)
        step2_improve(self.policy, self.learner, code)
        self.rewards.append(reward)
        self.rbar_history.append(self.learner.Rbar)


def train_level_k(cfg: TrainingConfig, lower_policy: TabularPolicy | None = None,
                  sim=None, progress=None) -> tuple[TabularPolicy, TrainingSummary]:
    """Train a level-k driver against traffic running ``lower_policy`` (level k-1).

    ``lower_policy`` may be omitted only for k = 1, where traffic follows the
    level-0 rule. ``progress`` is an optional callable receiving each
    ``TrainingRecord``.
    """
    from .config import SimConfig, config_hash
    from .harness import EpisodeConfig, initialize_episode, episode_rngs, run_episode

    sim = sim or SimConfig()
    k = cfg.level_to_train
    if k >= 2 and lower_policy is None:
        raise ValueError(f"training level {k} requires the level-{k - 1} policy")
    if lower_policy is not None and lower_policy.level != k - 1:
        raise ValueError(f"lower policy has level {lower_policy.level}, expected {k - 1}")
    policies = {k - 1: lower_policy} if lower_policy is not None and k >= 2 else {}
    mix = tuple(1.0 if lvl == k - 1 else 0.0 for lvl in range(3))

    policy = TabularPolicy.uniform(level=k, seed=cfg.seed, config_hash=config_hash(cfg, sim))
    learner = LearnerState(N_MESSAGES, N_ACTIONS, cfg.learner_config())
    trainee = PolicyTrainee(policy, learner)
    trainee.rbar_history = deque(maxlen=max(cfg.patience, 1))
    rng = np.random.default_rng(cfg.seed)
    summary = TrainingSummary(0, 0, None, 0, 0.0)
    t0 = time.perf_counter()
    for cycle in range(cfg.training_cycles):
        n_c = int(rng.integers(0, cfg.n_c_max + 1))
        ep = EpisodeConfig(n_c=n_c, x0_max=cfg.x0_max, t_f=cfg.t_f, ego_controller="trainee",
                           traffic_mix=mix, seed=int(rng.integers(2**63)))
        init_rng, dyn_rng = episode_rngs(ep.seed)
        world = initialize_episode(ep, init_rng, sim)
        trainee.start_episode()
        result = run_episode(ep, world, policies, dyn_rng, sim, trainee=trainee)
        summary.cycles = cycle + 1
        summary.total_steps += result.steps_run
        rec = TrainingRecord(cycle, n_c, result.steps_run,
                             float(np.mean(trainee.rewards)) if trainee.rewards else 0.0,
                             learner.Rbar, result.violated)
        summary.log.append(rec)
        if progress is not None:
            progress(rec)
        if has_converged(trainee.rbar_history, cfg.tolerance, cfg.patience):
            summary.converged_at = summary.total_steps
            log.info("converged after %d steps", summary.total_steps)
            break
        if cfg.max_steps is not None and summary.total_steps >= cfg.max_steps:
            break
    policy.visit_counts = learner.K_m.copy()
    summary.fallback_rows = apply_fallback(policy, cfg.undertrained_threshold)
    summary.wall_time = time.perf_counter() - t0
    policy.validate()
    return policy, summary
