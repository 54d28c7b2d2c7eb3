"""Trust-region policy optimization and the ring curriculum.

Rollouts from every agent of every episode are concatenated into one
batch and jointly optimized: a conjugate-gradient solve against the
KL-curvature turns the surrogate gradient into a natural-gradient step,
scaled so the predicted KL equals the trust-region radius, then a
backtracking line search keeps the first candidate that both improves
the surrogate and respects the measured KL. The curriculum scheduler
grows the problem one AV at a time, warm-starting each stage from the
previous stage's parameters (per-agent observations are size-invariant,
so the same network transfers).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .policy import MLP, GaussianPolicy, save_checkpoint
from .ring_env import RingEnv, RingEnvConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """TRPO constants; defaults follow the standard recipe."""

    gamma: float = 0.99
    kl_step: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15
    batch_env_steps: int = 20_000
    gae_lambda: float = 0.95
    value_hidden: tuple[int, ...] = (64, 64)
    value_epochs: int = 25
    value_lr: float = 1e-3
    eval_every: int = 10
    eval_episodes: int = 2
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.kl_step <= 0:
            raise ValueError("kl_step must be > 0")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.batch_env_steps < 1:
            raise ValueError("batch_env_steps must be >= 1")
        if self.cg_iters < 1 or self.max_backtracks < 0:
            raise ValueError("bad optimizer iteration counts")
        if not 0.0 < self.backtrack_ratio < 1.0:
            raise ValueError("backtrack_ratio must be in (0, 1)")


# -- linear algebra ----------------------------------------------------------


def conjugate_gradient(mvp, b: np.ndarray, iters: int,
                       residual_tol: float = 1e-10) -> np.ndarray:
    """Solve A x = b for symmetric positive-definite A given x -> A x.

    Runs at most ``iters`` steps, stopping early once the relative
    residual |r| / |b| falls below residual_tol. With iters >= dim(b)
    and exact arithmetic this is a direct solve.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = float(r @ r)
    stop = residual_tol * residual_tol * rs
    for _ in range(iters):
        if rs <= stop:
            break
        ap = mvp(p)
        alpha = rs / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def discounted_cumsum(x: np.ndarray, discount: float) -> np.ndarray:
    """out[t] = x[t] + discount * out[t+1], computed right to left."""
    out = np.empty_like(x)
    acc = 0.0
    for t in range(x.size - 1, -1, -1):
        acc = x[t] + discount * acc
        out[t] = acc
    return out


# -- value baseline ----------------------------------------------------------


class ValueFunction:
    """Small MLP state-value baseline, refit each iteration by Adam.

    Regression targets are standardized internally (returns are large
    negative numbers); predictions are mapped back to raw units.
    """

    def __init__(self, obs_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, lr: float = 1e-3,
                 epochs: int = 25):
        self.net = MLP(obs_dim, hidden, 1)
        self.params = self.net.init_params(rng)
        self.lr = lr
        self.epochs = epochs
        self._shift = 0.0
        self._scale = 1.0

    def predict(self, obs: np.ndarray) -> np.ndarray:
        raw = self.net.forward(self.params, obs)[:, 0]
        return raw * self._scale + self._shift

    def fit(self, obs: np.ndarray, targets: np.ndarray) -> float:
        """Full-batch Adam on standardized targets; returns final MSE
        in raw units."""
        self._shift = float(np.mean(targets))
        self._scale = float(np.std(targets)) or 1.0
        y = (targets - self._shift) / self._scale
        B = obs.shape[0]
        m = np.zeros_like(self.params)
        v = np.zeros_like(self.params)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, self.epochs + 1):
            pred, cache = self.net.forward_cached(self.params, obs)
            err = pred[:, 0] - y
            grad = self.net.vjp(self.params, cache,
                                (2.0 * err / B)[:, None])
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            self.params -= self.lr * mhat / (np.sqrt(vhat) + eps)
        final = self.net.forward(self.params, obs)[:, 0]
        return float(np.mean((final * self._scale + self._shift
                              - targets) ** 2))


# -- rollouts ----------------------------------------------------------------


@dataclass
class Trajectory:
    """One agent's stream from one episode."""

    obs: np.ndarray      # (T, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    log_probs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory] = field(default_factory=list)
    episode_metric_m: list[float] = field(default_factory=list)
    episode_returns: list[float] = field(default_factory=list)
    # concatenated views, set by compute_advantages
    obs_all: np.ndarray | None = None
    actions_all: np.ndarray | None = None
    log_probs_all: np.ndarray | None = None
    advantages_all: np.ndarray | None = None
    returns_all: np.ndarray | None = None

    @property
    def agent_steps(self) -> int:
        return sum(t.rewards.size for t in self.trajectories)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.episode_returns))

    @property
    def mean_metric_m(self) -> float:
        return float(np.mean(self.episode_metric_m))


def collect_rollouts(env_factory, policy: GaussianPolicy, params: np.ndarray,
                     cfg: TrainConfig, rng: np.random.Generator
                     ) -> RolloutBatch:
    """Run whole episodes under the stochastic policy until at least
    batch_env_steps agent-steps are gathered.

    ``env_factory(seed)`` must return a fresh environment; episode seeds
    and action noise both come from ``rng``, so a fixed generator state
    reproduces the batch exactly. An environment that fails to reset is
    logged and skipped (ten consecutive failures abort).
    """
    batch = RolloutBatch()
    failures = 0
    while batch.agent_steps < cfg.batch_env_steps:
        env_seed = int(rng.integers(0, 2 ** 62))
        env = env_factory(env_seed)
        try:
            obs = env.reset()
        except ValueError as exc:
            failures += 1
            logger.warning("discarding episode (reset failed: %s)", exc)
            if failures >= 10:
                raise RuntimeError(
                    "10 consecutive environment failures") from exc
            continue
        failures = 0
        n_agents = env.n_agents
        if n_agents == 0:
            raise ValueError("cannot train with zero agents")
        traj_obs = [[] for _ in range(n_agents)]
        traj_act = [[] for _ in range(n_agents)]
        traj_lp = [[] for _ in range(n_agents)]
        traj_rew = [[] for _ in range(n_agents)]
        done = False
        while not done:
            actions, logps = policy.sample_batch(params, obs, rng)
            next_obs, rewards, done, _ = env.step(actions[:, 0])
            for k in range(n_agents):
                traj_obs[k].append(obs[k])
                traj_act[k].append(actions[k])
                traj_lp[k].append(logps[k])
                traj_rew[k].append(rewards[k])
            obs = next_obs
        agent_returns = []
        for k in range(n_agents):
            rewards_k = np.array(traj_rew[k])
            batch.trajectories.append(Trajectory(
                obs=np.array(traj_obs[k]),
                actions=np.array(traj_act[k]),
                log_probs=np.array(traj_lp[k]),
                rewards=rewards_k,
            ))
            agent_returns.append(float(rewards_k.sum()))
        batch.episode_returns.append(float(np.mean(agent_returns)))
        batch.episode_metric_m.append(env.metric())
    return batch


def compute_advantages(batch: RolloutBatch, value_fn: ValueFunction | None,
                       cfg: TrainConfig) -> RolloutBatch:
    """GAE(gamma, lambda) per trajectory with terminal value 0, then
    batch-level advantage normalization. Discounted returns are attached
    for value regression. value_fn = None means a zero baseline."""
    for traj in batch.trajectories:
        values = (value_fn.predict(traj.obs) if value_fn is not None
                  else np.zeros(traj.rewards.size))
        v_next = np.append(values[1:], 0.0)
        deltas = traj.rewards + cfg.gamma * v_next - values
        traj.advantages = discounted_cumsum(
            deltas, cfg.gamma * cfg.gae_lambda)
        traj.returns = discounted_cumsum(traj.rewards, cfg.gamma)
    batch.obs_all = np.concatenate([t.obs for t in batch.trajectories])
    batch.actions_all = np.concatenate(
        [t.actions for t in batch.trajectories])
    batch.log_probs_all = np.concatenate(
        [t.log_probs for t in batch.trajectories])
    batch.returns_all = np.concatenate(
        [t.returns for t in batch.trajectories])
    adv = np.concatenate([t.advantages for t in batch.trajectories])
    batch.advantages_all = (adv - adv.mean()) / (adv.std() + 1e-8)
    return batch


# -- the update --------------------------------------------------------------


@dataclass
class UpdateStats:
    accepted: bool
    kl: float = 0.0
    surrogate_improvement: float = 0.0
    step_fraction: float = 0.0
    grad_norm: float = 0.0
    reason: str = ""


def trpo_update(policy: GaussianPolicy, params: np.ndarray,
                batch: RolloutBatch, cfg: TrainConfig
                ) -> tuple[np.ndarray, UpdateStats]:
    """One natural-gradient step inside the KL trust region.

    Returns the accepted parameters, or the input parameters unchanged
    when the gradient is degenerate or no line-search candidate passes.
    """
    obs = batch.obs_all
    actions = batch.actions_all
    logp_old = batch.log_probs_all
    adv = batch.advantages_all

    g = policy.surrogate_grad(params, obs, actions, adv)
    gnorm = float(np.linalg.norm(g))
    if not math.isfinite(gnorm):
        logger.warning("non-finite surrogate gradient; skipping update")
        return params, UpdateStats(False, grad_norm=gnorm,
                                   reason="non-finite gradient")
    if gnorm < 1e-12:
        return params, UpdateStats(False, grad_norm=gnorm,
                                   reason="zero gradient")

    fvp = policy.make_fvp(params, obs, damping=cfg.cg_damping)
    x = conjugate_gradient(fvp, g, cfg.cg_iters)
    xhx = float(x @ fvp(x))
    if not math.isfinite(xhx) or xhx <= 0.0:
        logger.warning("degenerate curvature (x'Hx = %s); skipping", xhx)
        return params, UpdateStats(False, grad_norm=gnorm,
                                   reason="degenerate curvature")
    full_step = x * math.sqrt(2.0 * cfg.kl_step / xhx)

    adv_baseline = float(np.mean(adv))
    for j in range(cfg.max_backtracks + 1):
        frac = cfg.backtrack_ratio ** j
        candidate = params + frac * full_step
        logp_new = policy.log_prob(candidate, obs, actions)
        ratio = np.exp(logp_new - logp_old)
        improvement = float(np.mean(ratio * adv)) - adv_baseline
        kl = policy.kl(params, candidate, obs)
        if (math.isfinite(improvement) and math.isfinite(kl)
                and improvement > 0.0 and kl <= cfg.kl_step):
            return candidate, UpdateStats(
                True, kl=kl, surrogate_improvement=improvement,
                step_fraction=frac, grad_norm=gnorm)
    return params, UpdateStats(False, grad_norm=gnorm,
                               reason="line search exhausted")


# -- evaluation --------------------------------------------------------------


def evaluate_policy(env_factory, policy: GaussianPolicy | None,
                    params: np.ndarray | None, episodes: int,
                    seed_root: int) -> float:
    """Mean uniform-flow metric m over deterministic episodes.

    Actions are the policy mean (no exploration noise); policy None runs
    the uncontrolled baseline with the same episode seeds.
    """
    ms = []
    for e in range(episodes):
        env = env_factory(_derive_seed(seed_root, seeding.POLICY, e))
        obs = env.reset()
        done = False
        while not done:
            if policy is None:
                obs, _, done, _ = env.step(None)
            else:
                mean, _ = policy.forward(params, obs)
                obs, _, done, _ = env.step(mean[:, 0])
        ms.append(env.metric())
    return float(np.mean(ms))


def _derive_seed(root: int, *key: int) -> int:
    return seeding.derive_seed(root, *key)


# -- training loops ----------------------------------------------------------


@dataclass
class IterationLog:
    iteration: int
    stage: int
    n_av: int
    mean_return: float
    metric_m: float
    kl: float
    step_accepted: bool


TRAIN_LOG_HEADER = "iteration,stage,n_av,mean_return,metric_m,kl,step_accepted"


def write_training_log(rows: list[IterationLog], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(TRAIN_LOG_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.iteration},{r.stage},{r.n_av},"
                     f"{float(r.mean_return)!r},{float(r.metric_m)!r},"
                     f"{float(r.kl)!r},{int(r.step_accepted)}\n")


@dataclass
class StageResult:
    n_av: int
    length_range: tuple[float, float]
    iterations: int
    start_params: np.ndarray
    end_params: np.ndarray
    metric_last100: float
    eval_metrics: list[tuple[int, float]]


def train_stage(policy: GaussianPolicy, params: np.ndarray,
                value_fn: ValueFunction, env_cfg: RingEnvConfig,
                train_cfg: TrainConfig, iterations: int, seed: int,
                stage: int = 1, log_rows: list[IterationLog] | None = None,
                checkpoint_dir=None, iteration_offset: int = 0
                ) -> StageResult:
    """Run TRPO iterations on one environment configuration.

    Per-iteration RNG streams derive from (seed, stage, iteration), so a
    stage is reproducible in isolation. Checkpoints land every 50
    iterations plus at stage end when checkpoint_dir is set.
    """

    def env_factory(env_seed: int) -> RingEnv:
        return RingEnv(env_cfg, seed=env_seed)

    start_params = params.copy()
    episode_ms: list[float] = []
    eval_metrics: list[tuple[int, float]] = []
    for it in range(iterations):
        rng_it = np.random.default_rng(np.random.SeedSequence(
            seed, spawn_key=(seeding.TRAIN, stage, it)))
        batch = collect_rollouts(env_factory, policy, params, train_cfg,
                                 rng_it)
        compute_advantages(batch, value_fn, train_cfg)
        params, stats = trpo_update(policy, params, batch, train_cfg)
        if not np.all(np.isfinite(params)):
            raise FloatingPointError(
                f"non-finite parameters at stage {stage} iteration {it}")
        value_fn.fit(batch.obs_all, batch.returns_all)
        episode_ms.extend(batch.episode_metric_m)
        global_it = iteration_offset + it
        if log_rows is not None:
            log_rows.append(IterationLog(
                iteration=global_it, stage=stage, n_av=env_cfg.n_av,
                mean_return=batch.mean_return,
                metric_m=batch.mean_metric_m, kl=stats.kl,
                step_accepted=stats.accepted))
        if train_cfg.eval_every and (it + 1) % train_cfg.eval_every == 0:
            m_det = evaluate_policy(env_factory, policy, params,
                                    train_cfg.eval_episodes,
                                    _derive_seed(seed, stage, it))
            eval_metrics.append((global_it, m_det))
        if checkpoint_dir is not None and (it + 1) % 50 == 0:
            save_checkpoint(
                f"{checkpoint_dir}/policy_stage{stage}_iter{it + 1:04d}.txt",
                policy, params)
    if checkpoint_dir is not None:
        save_checkpoint(f"{checkpoint_dir}/policy_stage{stage}_final.txt",
                        policy, params)
    last = episode_ms[-100:] if episode_ms else [float("nan")]
    return StageResult(
        n_av=env_cfg.n_av, length_range=env_cfg.resolved_length_range,
        iterations=iterations, start_params=start_params,
        end_params=params, metric_last100=float(np.mean(last)),
        eval_metrics=eval_metrics)


# -- curriculum --------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumStage:
    n_av: int
    length_range: tuple[float, float]
    iterations: int


@dataclass(frozen=True)
class CurriculumSchedule:
    """Stages of increasing AV count; ring length scales with the count
    so per-AV density is constant across stages."""

    stages: tuple[CurriculumStage, ...]
    n_pretrain: int = 200
    n_train: int = 500

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        for k, st in enumerate(self.stages):
            if st.n_av != k + 1:
                raise ValueError(
                    "stage AV counts must increase by 1 starting at 1")
            want = (250.0 * st.n_av, 360.0 * st.n_av)
            if st.length_range != want:
                raise ValueError(
                    f"stage {k + 1} length range {st.length_range} != {want}")
            if st.iterations < 1:
                raise ValueError("every stage needs >= 1 iteration")

    @classmethod
    def build(cls, n_av_final: int, n_pretrain: int = 200,
              n_train: int = 500) -> "CurriculumSchedule":
        if n_av_final < 1:
            raise ValueError("n_av_final must be >= 1")
        stages = tuple(
            CurriculumStage(
                n_av=k,
                length_range=(250.0 * k, 360.0 * k),
                iterations=n_train if k == n_av_final else n_pretrain)
            for k in range(1, n_av_final + 1))
        return cls(stages=stages, n_pretrain=n_pretrain, n_train=n_train)

    @property
    def total_iterations(self) -> int:
        return sum(st.iterations for st in self.stages)


@dataclass
class CurriculumResult:
    final_params: np.ndarray
    stage_results: list[StageResult]
    log_rows: list[IterationLog]


def run_curriculum(policy: GaussianPolicy, schedule: CurriculumSchedule,
                   base_env_cfg: RingEnvConfig, train_cfg: TrainConfig,
                   seed: int, checkpoint_dir=None) -> CurriculumResult:
    """Train through the schedule, warm-starting each stage.

    Stage 1 initializes fresh from (seed); later stages reuse the
    previous stage's parameters unchanged. The value baseline carries
    over as well (observations have the same shape in every stage).
    """
    rng_init = seeding.substream(seed, seeding.TRAIN)
    params = policy.init_params(rng_init)
    value_fn = ValueFunction(policy.obs_dim, train_cfg.value_hidden,
                             rng_init, lr=train_cfg.value_lr,
                             epochs=train_cfg.value_epochs)
    log_rows: list[IterationLog] = []
    stage_results: list[StageResult] = []
    offset = 0
    for k, st in enumerate(schedule.stages, start=1):
        env_cfg = replace(base_env_cfg, n_av=st.n_av,
                          length_range=st.length_range)
        result = train_stage(
            policy, params, value_fn, env_cfg, train_cfg,
            iterations=st.iterations, seed=seed, stage=k,
            log_rows=log_rows, checkpoint_dir=checkpoint_dir,
            iteration_offset=offset)
        stage_results.append(result)
        params = result.end_params
        offset += st.iterations
    return CurriculumResult(final_params=params,
                            stage_results=stage_results, log_rows=log_rows)
