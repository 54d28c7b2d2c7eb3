"""Mixed-autonomy ring-road MDP.

A handful of controlled vehicles (AVs) are embedded in a ring of
noisy car-following drivers. Each AV observes a short stacked history of
(own speed, headway, leader speed) frames and commands a bounded
acceleration; the reward pulls every AV toward the uniform-flow
equilibrium speed of the current density while penalizing control
effort. Optional cut-in/cut-out events perturb the vehicle count to
emulate neighboring-lane traffic.

Parameters
----------
Observation: 3*N values per agent, newest frame first, frames spaced
``obs_sample_period`` seconds apart. Reward:
r = -c1*(v - V_eq)^2 - c2*accel^2, computed from the post-step speed and
the executed (post-clip) acceleration.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .dynamics import (
    DEFAULT_VEHICLE_LENGTH,
    IdmParams,
    RingState,
    VehicleKind,
    VehicleState,
    equilibrium_speed,
    ring_idm_accels,
    step_string,
)
from .perturbation import LaneChangeConfig, apply_events, sample_events


@dataclass(frozen=True)
class RingEnvConfig:
    """Ring MDP parameters.

    ``length_range`` defaults to [250*n_av, 360*n_av] (with n_av floored
    at 1 for the human-only baseline); total vehicle count is
    vehicles_per_av * max(n_av, 1).
    """

    n_av: int = 1
    vehicles_per_av: int = 22
    length_range: tuple[float, float] | None = None
    dt: float = 0.2
    horizon_steps: int = 3000
    obs_frames: int = 5
    obs_sample_period: float = 2.0
    action_bounds: tuple[float, float] = (-3.0, 1.3)
    c1: float = 0.005
    c2: float = 0.1
    idm: IdmParams = field(default_factory=IdmParams)
    vehicle_length: float = DEFAULT_VEHICLE_LENGTH
    warmup_steps: int = 0
    lane_change: LaneChangeConfig = field(default_factory=LaneChangeConfig)
    collision_penalty: float = 100.0

    def __post_init__(self):
        if self.n_av < 0:
            raise ValueError("n_av must be >= 0")
        if self.vehicles_per_av < 1:
            raise ValueError("vehicles_per_av must be >= 1")
        lo, hi = self.resolved_length_range
        if lo > hi or lo <= 0:
            # equal bounds are allowed: a degenerate range pins the length
            raise ValueError("length_range must satisfy 0 < lower <= upper")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.obs_frames < 1:
            raise ValueError("obs_frames must be >= 1")
        stride = self.obs_sample_period / self.dt
        if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
            raise ValueError(
                "obs_sample_period must be a positive integer multiple of dt")
        if not self.action_bounds[0] < self.action_bounds[1]:
            raise ValueError("action_bounds must be an increasing pair")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.collision_penalty < 0:
            raise ValueError("collision_penalty must be >= 0")
        if self.lane_change.enabled:
            self.lane_change.validate_against(
                self.idm.s0, self.vehicle_length)

    @property
    def resolved_length_range(self) -> tuple[float, float]:
        if self.length_range is not None:
            return self.length_range
        k = max(self.n_av, 1)
        return (250.0 * k, 360.0 * k)

    @property
    def total_vehicles(self) -> int:
        return self.vehicles_per_av * max(self.n_av, 1)

    @property
    def sample_stride(self) -> int:
        return int(round(self.obs_sample_period / self.dt))

    @property
    def obs_dim(self) -> int:
        return 3 * self.obs_frames


def reward(speed: float, accel: float, v_eq: float,
           cfg: RingEnvConfig) -> float:
    """r = -c1*(speed - v_eq)^2 - c2*accel^2; zero only at the target."""
    dv = speed - v_eq
    return -cfg.c1 * dv * dv - cfg.c2 * accel * accel


@dataclass
class EpisodeTrace:
    """Full per-step record of one episode.

    One entry per simulated step (the initial state is not a step);
    arrays within a step are index-aligned with the ring at that step.
    ``v_eqs`` carries the equilibrium speed in force at each step, which
    changes only when cut-ins/cut-outs change the vehicle count.
    """

    ring_length: float
    seed: int | None = None
    config_hash: str = ""
    times: list[float] = field(default_factory=list)
    ids: list[np.ndarray] = field(default_factory=list)
    kinds: list[np.ndarray] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    speeds: list[np.ndarray] = field(default_factory=list)
    accels: list[np.ndarray] = field(default_factory=list)
    v_eqs: list[float] = field(default_factory=list)
    rewards: list[np.ndarray] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.times)

    def append(self, state: RingState, accels: np.ndarray, v_eq: float,
ag_rewards: np.ndarray) -> None:
        self.times.append(state.time)
        self.ids.append(state.ids.copy())
        self.kinds.append(state.kinds.copy())
        self.positions.append(state.positions.copy())
        self.speeds.append(state.speeds.copy())
        self.accels.append(np.asarray(accels, dtype=np.float64).copy())
        self.v_eqs.append(float(v_eq))
        self.rewards.append(np.asarray(ag_rewards, dtype=np.float64).copy())

    def write_csv(self, path) -> None:
        """Trajectory rows for time-space plotting; repr floats for
        byte-stable output."""
        kind_name = {int(VehicleKind.HUMAN): "human", int(VehicleKind.AV): "av"}
        with open(path, "w", newline="") as fh:
            fh.write("time,vehicle_id,kind,position,speed,accel\n")
            for s in range(self.n_steps):
                t = repr(float(self.times[s]))
                for j in range(self.ids[s].size):
                    fh.write(
                        f"{t},{int(self.ids[s][j])},"
                        f"{kind_name[int(self.kinds[s][j])]},"
                        f"{float(self.positions[s][j])!r},"
                        f"{float(self.speeds[s][j])!r},"
                        f"{float(self.accels[s][j])!r}\n")


def metric_m(trace: EpisodeTrace) -> float:
    """Mean of v/V_eq over every vehicle and step of the trace.

    1.0 in perfect uniform flow, 0.0 when everything is stopped, below 1
    once waves form. Uses the per-step equilibrium speed so episodes with
    varying vehicle count average correctly.
    """
    if trace.n_steps == 0:
        raise ValueError("empty trace")
    total = 0.0
    samples = 0
    for s in range(trace.n_steps):
        total += float(np.sum(trace.speeds[s])) / trace.v_eqs[s]
        samples += trace.speeds[s].size
    return total / samples


def uniform_mixed_ring(n: int, L: float, speed: float, n_av: int,
                       vehicle_length: float) -> RingState:
    """Equidistant placement with AVs at every (n/n_av)-th slot."""
    spacing = L / n
    av_slots = set()
    if n_av > 0:
        stride = n // n_av
        av_slots = {k * stride for k in range(n_av)}
    vehicles = [
        VehicleState(
            id=i, position=i * spacing, speed=speed, length=vehicle_length,
            kind=VehicleKind.AV if i in av_slots else VehicleKind.HUMAN)
        for i in range(n)
    ]
    return RingState.from_vehicles(L, vehicles)


class RingEnv:
    """Multi-agent ring environment; one shared clock, one action per AV.

    Agents are ordered by AV vehicle id: observation row k, action k, and
    reward k all refer to the k-th AV in that fixed order. ``step(None)``
    runs every vehicle (AVs included) on the human car-following law,
    which reduces the system to the uncontrolled baseline.
    """

    def __init__(self, cfg: RingEnvConfig, seed: int = 0,
                 record: bool = False, config_hash: str = ""):
        self.cfg = cfg
        self.seed = seed
        self._record = record
        self._config_hash = config_hash
        self._rng_init = seeding.substream(seed, seeding.INIT)
        self._rng_noise = seeding.substream(seed, seeding.NOISE)
        self._rng_events = seeding.substream(seed, seeding.EVENTS)
        self._state: RingState | None = None
        self._done = True
        self.trace: EpisodeTrace | None = None
        self.event_records: list = []

    # -- episode lifecycle -------------------------------------------------

    def reset(self) -> np.ndarray:
        """Sample a ring length, place vehicles at equilibrium, return
        the initial per-agent observations (shape (n_av, obs_dim))."""
        cfg = self.cfg
        lo, hi = cfg.resolved_length_range
        L = float(self._rng_init.uniform(lo, hi))
        n = cfg.total_vehicles
        v_eq = equilibrium_speed(n, L, cfg.vehicle_length, cfg.idm)
        state = uniform_mixed_ring(n, L, v_eq, cfg.n_av, cfg.vehicle_length)
        return self._begin_episode(state)

    def reset_to(self, state: RingState) -> np.ndarray:
        """Start an episode from a caller-built ring (test scenarios)."""
        state.validate()
        return self._begin_episode(state.copy())

    def _begin_episode(self, state: RingState) -> np.ndarray:
        cfg = self.cfg
        self._state = state
        self._veq_cache: dict[int, float] = {}
        self._v_eq = self._veq_for_count(state.n)
        self._av_ids = [int(i) for i in state.ids[
            state.kinds == int(VehicleKind.AV)]]
        if cfg.n_av and len(self._av_ids) != cfg.n_av:
            raise ValueError(
                f"state has {len(self._av_ids)} AVs, config says {cfg.n_av}")
        self._step_count = 0
        self._done = False
        self._m_sum = 0.0
        self._m_samples = 0
        maxlen = (cfg.obs_frames - 1) * cfg.sample_stride + 1
        self._frames = {av: deque(maxlen=maxlen) for av in self._av_ids}
        self._append_frames()
        self.trace = EpisodeTrace(
            ring_length=state.circumference, seed=self.seed,
            config_hash=self._config_hash) if self._record else None
        self.event_records = []
        return self._observe_all()

    # -- observation plumbing ----------------------------------------------

    def _av_index_map(self) -> dict[int, int]:
        state = self._state
        out = {}
        for idx in np.nonzero(state.kinds == int(VehicleKind.AV))[0]:
            out[int(state.ids[idx])] = int(idx)
        return out

    def _append_frames(self) -> None:
        state = self._state
        idx_of = self._av_index_map()
        n = state.n
        for av in self._av_ids:
            i = idx_of[av]
            lead = (i + 1) % n
            self._frames[av].append((
                float(state.speeds[i]),
                float(state.headways[i]),
                float(state.speeds[lead]),
            ))

    def _observe(self, av: int) -> np.ndarray:
        cfg = self.cfg
        frames = self._frames[av]
        stride = cfg.sample_stride
        out = np.empty(cfg.obs_dim)
        last = len(frames) - 1
        for k in range(cfg.obs_frames):
            j = last - k * stride
            frame = frames[j] if j >= 0 else frames[0]
            out[3 * k: 3 * k + 3] = frame
        return out

    def _observe_all(self) -> np.ndarray:
        return np.stack([self._observe(av) for av in self._av_ids]) \
            if self._av_ids else np.empty((0, self.cfg.obs_dim))

    # -- dynamics -----------------------------------------------------------

    def _veq_for_count(self, n: int) -> float:
        if n not in self._veq_cache:
            L = self._state.circumference
            # past jam density no moving equilibrium exists; the only
            # steady state is a standstill, so the speed target is 0
            if L / n - self.cfg.vehicle_length <= self.cfg.idm.s0:
                self._veq_cache[n] = 0.0
            else:
                self._veq_cache[n] = equilibrium_speed(
                    n, L, self.cfg.vehicle_length, self.cfg.idm)
        return self._veq_cache[n]

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, bool, dict]:
        """Advance one step. ``actions``: one acceleration per AV in
        agent order, or None for the uncontrolled baseline."""
        if self._done:
            raise RuntimeError("episode finished; call reset()")
        cfg = self.cfg
        controlled = actions is not None and self._step_count >= cfg.warmup_steps
        if actions is not None:
            actions = np.asarray(actions, dtype=np.float64).reshape(-1)
            if actions.size != len(self._av_ids):
                raise ValueError(
                    f"expected {len(self._av_ids)} actions, got {actions.size}")

        state = self._state
        if cfg.lane_change.enabled:
            events = sample_events(state, cfg.lane_change, self._rng_events)
            if events:
                state, records = apply_events(
                    state, events, cfg.lane_change, cfg.vehicle_length)
                self.event_records.extend(records)
                self._state = state
                self._v_eq = self._veq_for_count(state.n)

        n = state.n
        noise = (self._rng_noise.normal(0.0, cfg.idm.noise_std, n)
                 if cfg.idm.noise_std > 0 else None)
        accels = ring_idm_accels(state, cfg.idm, noise)

        pre_map = self._av_index_map()
        if controlled:
            lo, hi = cfg.action_bounds
            for k, av in enumerate(self._av_ids):
                accels[pre_map[av]] = min(hi, max(lo, float(actions[k])))

        new_state, collided = step_string(state, accels, cfg.dt)
        self._state = new_state
        self._step_count += 1
        self._done = collided or self._step_count >= cfg.horizon_steps

        v_eq = self._v_eq
        if v_eq > 0.0:
            # over-jam transients have no flow to normalize against
            self._m_sum += float(np.sum(new_state.speeds)) / v_eq
            self._m_samples += new_state.n
        if not collided:
            self._append_frames()

        # accels are aligned with the pre-step array order, post-step
        # speeds with the (possibly rotated) new order: separate maps
        post_map = self._av_index_map()
        rewards = np.empty(len(self._av_ids))
        for k, av in enumerate(self._av_ids):
            rewards[k] = reward(
                float(new_state.speeds[post_map[av]]),
                float(accels[pre_map[av]]), v_eq, cfg)
        if collided:
            # with an everywhere-negative reward, ending the episode is
            # otherwise the cheapest outcome; the terminal penalty keeps
            # staying alive strictly better than crashing
            rewards -= cfg.collision_penalty

        if self.trace is not None:
            # align executed accels with the post-step array order (a
            # wrap step rotates every array by the same shift)
            if new_state.ids[0] != state.ids[0] and not collided:
                shift = int(np.argmax(new_state.ids == state.ids[0]))
                accels_post = np.roll(accels, shift)
            else:
                accels_post = accels
            self.trace.append(new_state, accels_post, v_eq, rewards)

        obs = self._observe_all() if not collided else np.zeros(
            (len(self._av_ids), cfg.obs_dim))
        info = {
            "v_eq": v_eq,
            "ring_length": state.circumference,
            "collided": collided,
            "n_vehicles": new_state.n,
            "mean_speed": float(np.mean(new_state.speeds)),
        }
        return obs, rewards, self._done, info

    # -- metrics --------------------------------------------------------

    def metric(self) -> float:
        """Running mean of v/V_eq over the episode so far."""
        if self._m_samples == 0:
            raise ValueError("no normalizable flow samples yet")
        return self._m_sum / self._m_samples

    @property
    def n_agents(self) -> int:
        return len(self._av_ids)

    @property
    def state(self) -> RingState:
        return self._state

    @property
    def v_eq(self) -> float:
        return self._v_eq
