"""Open-boundary multi-lane highway with a downstream bottleneck.

The zero-shot transfer target for ring-trained policies. Vehicles stream
in at x = 0 at a fixed demand, traverse the segment, and leave at the
far end; a reduced speed limit on the final stretch restricts outflow so
queues and stop-and-go waves grow upstream of it. Humans follow the
car-following law plus an incentive/safety lane-change rule. A fixed
fraction of spawned vehicles (round-robin, for variance control) are
tagged as AVs: inside the control region they execute a trained policy,
outside it they are bitwise indistinguishable from humans.

Open network: collisions cannot end the run, so colliding vehicle pairs
are removed and counted as a failure statistic.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from ._backend import idm_accel_open
from .dynamics import IdmParams, VehicleKind

__all__ = [
    "LaneChangeModel", "HighwayConfig", "DelayMetrics", "HighwaySim",
    "measure_lc_rate", "HIGHWAY_TRACE_HEADER", "write_highway_trace",
]


@dataclass(frozen=True)
class LaneChangeModel:
    """Human lane-change rule: move when the projected own acceleration
    gain, discounted by politeness times the loss imposed on the new
    follower, beats the incentive threshold, and the new follower never
    needs to brake harder than safe_braking."""

    politeness: float = 0.3
    incentive_threshold: float = 0.2  # m/s^2
    safe_braking: float = 4.0         # m/s^2

    def __post_init__(self):
        if self.politeness < 0:
            raise ValueError("politeness must be >= 0")
        if self.safe_braking <= 0:
            raise ValueError("safe_braking must be > 0")


@dataclass(frozen=True)
class HighwayConfig:
    """Geometry, demand, protocol windows, and control parameters.

    Parameters
    ----------
    lanes : int
        Parallel lanes, each with its own inflow.
    segment_length : float
        Length of the simulated stretch in meters.
    inflow_rate : float
        Demand per lane in vehicles/hour; arrivals are deterministic at
        this rate, gated by available entry headway.
    penetration : float
        AV fraction among spawned vehicles; tagging is a deterministic
        round-robin (one in round(1/penetration)) for variance control.
    control_region : (float, float)
        [x_on, x_off): AVs execute the policy only inside; an empty
        region (x_on == x_off) reduces the run to the all-human baseline
        bit for bit.
    bottleneck_position, bottleneck_speed : float
        From bottleneck_position to the segment end, every vehicle's
        desired speed is capped at bottleneck_speed, restricting outflow.
    """

    lanes: int = 2
    segment_length: float = 1600.0
    inflow_rate: float = 1900.0
    dt: float = 0.4
    warmup_duration: float = 3600.0
    eval_duration: float = 600.0
    penetration: float = 0.05
    control_region: tuple[float, float] = (400.0, 1200.0)
    bottleneck_position: float = 1200.0
    bottleneck_speed: float = 2.0
    lc_model: LaneChangeModel = field(default_factory=LaneChangeModel)
    v_stop: float = 0.3
    idm: IdmParams = field(default_factory=IdmParams)
    vehicle_length: float = 5.0
    obs_frames: int = 5
    obs_sample_period: float = 2.0
    action_bounds: tuple[float, float] = (-3.0, 1.3)

    def __post_init__(self):
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if self.segment_length <= 0 or self.dt <= 0:
            raise ValueError("segment_length and dt must be > 0")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must be in [0, 1]")
        x_on, x_off = self.control_region
        if not 0.0 <= x_on <= x_off <= self.segment_length:
            raise ValueError(
                "control region must satisfy 0 <= x_on <= x_off <= length")
        if not 0.0 <= self.bottleneck_position <= self.segment_length:
            raise ValueError("bottleneck_position outside the segment")
        if self.bottleneck_speed <= 0:
            raise ValueError("bottleneck_speed must be > 0")
        if self.inflow_rate < 0:
            raise ValueError("inflow_rate must be >= 0")
        if self.warmup_duration < 0 or self.eval_duration <= 0:
            raise ValueError("bad protocol durations")
        if self.action_bounds[0] >= self.action_bounds[1]:
            raise ValueError("action_bounds must satisfy lo < hi")

    @property
    def sample_stride(self) -> int:
        return max(1, round(self.obs_sample_period / self.dt))

    @property
    def obs_dim(self) -> int:
        return 3 * self.obs_frames

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_duration / self.dt)

    @property
    def eval_steps(self) -> int:
        return round(self.eval_duration / self.dt)

    @property
    def av_period(self) -> int:
        """Spawn count between AV tags; 0 disables AVs entirely."""
        if self.penetration == 0.0:
            return 0
        return max(1, round(1.0 / self.penetration))


@dataclass
class DelayMetrics:
    """Evaluation-window aggregates."""

    avg_stopped_time: float   # s per vehicle seen in the window
    mean_speed: float         # m/s over vehicle-steps
    throughput: float         # vehicles/hour leaving the segment
    collisions: int           # colliding pairs removed in the window
    vehicles_seen: int
    lane_changes: int


class _Lane:
    """Vehicles of one lane as arrays sorted by increasing position."""

    __slots__ = ("pos", "speed", "length", "ids", "kind")

    def __init__(self):
        self.pos = np.empty(0)
        self.speed = np.empty(0)
        self.length = np.empty(0)
        self.ids = np.empty(0, dtype=np.int64)
        self.kind = np.empty(0, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.pos.size

    def insert(self, i: int, pos: float, speed: float, length: float,
               vid: int, kind: int) -> None:
        self.pos = np.insert(self.pos, i, pos)
        self.speed = np.insert(self.speed, i, speed)
        self.length = np.insert(self.length, i, length)
        self.ids = np.insert(self.ids, i, vid)
        self.kind = np.insert(self.kind, i, kind)

    def remove(self, idx) -> None:
        self.pos = np.delete(self.pos, idx)
        self.speed = np.delete(self.speed, idx)
        self.length = np.delete(self.length, idx)
        self.ids = np.delete(self.ids, idx)
        self.kind = np.delete(self.kind, idx)

    def leader_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lead speed, gap, has_leader); the front vehicle is free."""
        n = self.n
        v_lead = np.zeros(n)
        gap = np.ones(n)
        has = np.zeros(n, dtype=np.uint8)
        if n > 1:
            v_lead[:-1] = self.speed[1:]
            gap[:-1] = self.pos[1:] - self.length[1:] - self.pos[:-1]
            has[:-1] = 1
        return v_lead, gap, has


HIGHWAY_TRACE_HEADER = "time,vehicle_id,kind,lane,position,speed,accel"


def write_highway_trace(rows: list[tuple], path) -> None:
    """Rows of (time, id, kind, lane, pos, speed, accel); floats via repr
    so equal runs rewrite identical bytes."""
    kind_name = {int(VehicleKind.HUMAN): "human", int(VehicleKind.AV): "av"}
    with open(path, "w", newline="") as fh:
        fh.write(HIGHWAY_TRACE_HEADER + "\n")
        for t, vid, kind, lane, pos, speed, accel in rows:
            fh.write(f"{float(t)!r},{int(vid)},{kind_name[int(kind)]},"
                     f"{int(lane)},{float(pos)!r},{float(speed)!r},"
                     f"{float(accel)!r}\n")


class HighwaySim:
    """Stepper for the bottleneck highway.

    Parameters
    ----------
    cfg : HighwayConfig
    seed : int
        Experiment seed; driver noise derives from substream NOISE.
    policy, params
        Trained controller (mean action, clipped to action_bounds) for
        in-region AVs. policy=None runs the all-human baseline even if
        vehicles carry AV tags.
    """

    def __init__(self, cfg: HighwayConfig, seed: int, policy=None,
                 params: np.ndarray | None = None):
        self.cfg = cfg
        self.seed = seed
        self.policy = policy
        self.params = params
        if policy is not None:
            if params is None:
                raise ValueError("policy requires parameter vector")
            if policy.obs_dim != cfg.obs_dim:
                raise ValueError(
                    f"policy expects obs dim {policy.obs_dim}, "
                    f"config produces {cfg.obs_dim}")
        self._rng_noise = seeding.substream(seed, seeding.NOISE)
        self.lanes = [_Lane() for _ in range(cfg.lanes)]
        self.time = 0.0
        self.spawned = 0
        self.inflow_count = 0
        self.outflow_count = 0
        self.collision_count = 0
        self.collision_removed = 0
        self.lane_change_count = 0
        self.stopped_time: dict[int, float] = {}
        self._credit = np.zeros(cfg.lanes)
        self._next_id = 0
        maxlen = (cfg.obs_frames - 1) * cfg.sample_stride + 1
        self._frame_maxlen = maxlen
        self._frames: dict[int, deque] = {}
        # snapshot of the last step, used for traces and metric accrual
        self._last_snapshot: list[tuple] = []

    # -- helpers -------------------------------------------------------------

    def _v0_for(self, pos: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        return np.where(pos >= cfg.bottleneck_position,
                        cfg.bottleneck_speed, cfg.idm.v0)

    def _idm_scalar(self, v: float, v_lead: float, gap: float,
                    v0: float) -> float:
        p = self.cfg.idm
        dv = v_lead - v
        s_star = p.s0 + max(0.0, v * p.T - v * dv
                            / (2.0 * math.sqrt(p.a * p.b)))
        return p.a * (1.0 - (v / v0) ** p.delta - (s_star / gap) ** 2)

    def _lane_accels(self, lane: _Lane) -> np.ndarray:
        """Noise-free car-following accelerations for a whole lane."""
        p = self.cfg.idm
        v_lead, gap, has = lane.leader_arrays()
        return idm_accel_open(lane.speed, v_lead, gap, has,
                              self._v0_for(lane.pos), p.T, p.a, p.b,
                              p.delta, p.s0)

    # -- lane changes ----------------------------------------------------------

    def _lane_change_candidates(self) -> list[tuple[float, int, int, int]]:
        """(-position, src lane, vehicle id, dst lane) for every vehicle
        whose incentive and safety checks pass on the pre-move state."""
        cfg = self.cfg
        p = cfg.idm
        lc = cfg.lc_model
        x_on, x_off = cfg.control_region
        controlled_avs = self.policy is not None
        own_accels = [self._lane_accels(lane) for lane in self.lanes]
        candidates: list[tuple[float, int, int, int]] = []
        for src, lane in enumerate(self.lanes):
            if lane.n == 0:
                continue
            best_gain = np.full(lane.n, -np.inf)
            best_dst = np.full(lane.n, -1)
            for dst in (src - 1, src + 1):
                if not 0 <= dst < cfg.lanes:
                    continue
                target = self.lanes[dst]
                x = lane.pos
                js = np.searchsorted(target.pos, x)
                has_lead = js < target.n
                has_fol = js > 0
                jl = np.minimum(js, max(target.n - 1, 0))
                jf = np.maximum(js - 1, 0)
                lead_gap = np.where(
                    has_lead,
                    target.pos[jl] - target.length[jl] - x
                    if target.n else 1.0,
                    np.inf)
                fol_gap = np.where(
                    has_fol,
                    x - lane.length - target.pos[jf] if target.n else 1.0,
                    np.inf)
                ok = (lead_gap >= p.s0) & (fol_gap >= p.s0)
                # own projected accel in the target lane
                safe_lead_gap = np.where(
                    has_lead & ok, lead_gap, 1.0)
                a_new = idm_accel_open(
                    lane.speed,
                    target.speed[jl] if target.n else np.zeros(lane.n),
                    safe_lead_gap, (has_lead & ok).astype(np.uint8),
                    self._v0_for(x), p.T, p.a, p.b, p.delta, p.s0)
                # new follower's accel once this vehicle is its leader
                fol_relevant = has_fol & ok
                safe_fol_gap = np.where(fol_relevant, fol_gap, 1.0)
                fol_speed = target.speed[jf] if target.n else np.zeros(
                    lane.n)
                fol_v0 = (self._v0_for(target.pos[jf]) if target.n
                          else np.full(lane.n, p.v0))
                a_fol_new = idm_accel_open(
                    fol_speed, lane.speed, safe_fol_gap,
                    fol_relevant.astype(np.uint8), fol_v0,
                    p.T, p.a, p.b, p.delta, p.s0)
                a_fol_cur = np.where(
                    fol_relevant,
                    own_accels[dst][jf] if target.n else 0.0, 0.0)
                imposed = np.where(fol_relevant,
                                   a_fol_cur - a_fol_new, 0.0)
                gain = (a_new - own_accels[src]
                        - lc.politeness * imposed)
                safe = ok & np.where(fol_relevant,
                                     a_fol_new >= -lc.safe_braking, True)
                score = np.where(safe, gain, -np.inf)
                better = score > best_gain
                best_gain = np.where(better, score, best_gain)
                best_dst = np.where(better, dst, best_dst)
            in_region = (lane.kind == VehicleKind.AV) & controlled_avs \
                & (lane.pos >= x_on) & (lane.pos < x_off)
            movers = (best_gain > lc.incentive_threshold) & ~in_region
            for i in np.flatnonzero(movers):
                candidates.append((-float(lane.pos[i]), src,
                                   int(lane.ids[i]), int(best_dst[i])))
        return sorted(candidates)

    def _apply_lane_change(self, src: int, vid: int, dst: int) -> bool:
        """Re-validate safety against the current (possibly already
        mutated) lanes, then move the vehicle. Incentive is not
        re-checked; earlier moves can only invalidate safety."""
        p = self.cfg.idm
        lane = self.lanes[src]
        where = np.flatnonzero(lane.ids == vid)
        i = int(where[0])
        x = float(lane.pos[i])
        v = float(lane.speed[i])
        ln = float(lane.length[i])
        target = self.lanes[dst]
        j = int(np.searchsorted(target.pos, x))
        if j < target.n:
            lead_gap = float(target.pos[j] - target.length[j] - x)
            if lead_gap < p.s0:
                return False
        if j > 0:
            fol_gap = float(x - ln - target.pos[j - 1])
            if fol_gap < p.s0:
                return False
            a_fol = self._idm_scalar(
                float(target.speed[j - 1]), v, fol_gap,
                float(self._v0_for(target.pos[j - 1: j])[0]))
            if a_fol < -self.cfg.lc_model.safe_braking:
                return False
        kind = int(lane.kind[i])
        target.insert(j, x, v, ln, vid, kind)
        lane.remove(i)
        self.lane_change_count += 1
        return True

    def _resolve_lane_changes(self) -> None:
        if self.cfg.lanes < 2:
            return
        for _, src, vid, dst in self._lane_change_candidates():
            self._apply_lane_change(src, vid, dst)

    # -- observations and control ---------------------------------------------

    def _append_frames(self) -> None:
        cfg = self.cfg
        for lane in self.lanes:
            av_idx = np.flatnonzero(lane.kind == VehicleKind.AV)
            for i in av_idx:
                vid = int(lane.ids[i])
                if i + 1 < lane.n:
                    frame = (float(lane.speed[i]),
                             float(lane.pos[i + 1] - lane.length[i + 1]
                                   - lane.pos[i]),
                             float(lane.speed[i + 1]))
                else:
                    # free road: synthetic far-away leader at desired speed
                    frame = (float(lane.speed[i]), cfg.segment_length,
                             cfg.idm.v0)
                buf = self._frames.get(vid)
                if buf is None:
                    buf = deque(maxlen=self._frame_maxlen)
                    self._frames[vid] = buf
                buf.append(frame)

    def _observe(self, vid: int) -> np.ndarray:
        cfg = self.cfg
        frames = self._frames[vid]
        stride = cfg.sample_stride
        out = np.empty(cfg.obs_dim)
        last = len(frames) - 1
        for k in range(cfg.obs_frames):
            j = last - k * stride
            frame = frames[j] if j >= 0 else frames[0]
            out[3 * k: 3 * k + 3] = frame
        return out

    def _controlled_indices(self, lane: _Lane) -> np.ndarray:
        x_on, x_off = self.cfg.control_region
        mask = (lane.kind == VehicleKind.AV) & (lane.pos >= x_on) \
            & (lane.pos < x_off)
        return np.flatnonzero(mask)

    # -- spawning ---------------------------------------------------------------

    def _spawn(self) -> None:
        cfg = self.cfg
        p = cfg.idm
        self._credit += cfg.inflow_rate * cfg.dt / 3600.0
        for li, lane in enumerate(self.lanes):
            while self._credit[li] >= 1.0:
                if lane.n:
                    leader_rear = float(lane.pos[0] - lane.length[0])
                    speed = min(p.v0, float(lane.speed[0]))
                    if leader_rear < p.s0 + speed * p.T:
                        break  # deferred; demand credit carries over
                else:
                    speed = p.v0
                self.spawned += 1
                period = cfg.av_period
                kind = (VehicleKind.AV if period and
                        self.spawned % period == 0 else VehicleKind.HUMAN)
                lane.insert(0, 0.0, speed, cfg.vehicle_length,
                            self._next_id, int(kind))
                self._next_id += 1
                self.inflow_count += 1
                self._credit[li] -= 1.0

    # -- one step ----------------------------------------------------------------

    def step(self) -> None:
        """Advance dt: lane changes, control, car following, boundary
        exchange, collision cleanup, stopped-time accrual."""
        cfg = self.cfg
        p = cfg.idm
        self._resolve_lane_changes()
        if self.policy is not None:
            self._append_frames()
        snapshot = []
        for li, lane in enumerate(self.lanes):
            n = lane.n
            noise = self._rng_noise.normal(0.0, p.noise_std, n)
            if n == 0:
                continue
            accels = self._lane_accels(lane) + noise
            if self.policy is not None:
                ctrl = self._controlled_indices(lane)
                if ctrl.size:
                    obs = np.stack([self._observe(int(lane.ids[i]))
                                    for i in ctrl])
                    mean, _ = self.policy.forward(self.params, obs)
                    accels[ctrl] = np.clip(mean[:, 0],
                                           cfg.action_bounds[0],
                                           cfg.action_bounds[1])
            lane.speed = np.maximum(0.0, lane.speed + accels * cfg.dt)
            lane.pos = lane.pos + lane.speed * cfg.dt
            snapshot.append((li, lane.ids.copy(), lane.kind.copy(),
                             lane.pos.copy(), lane.speed.copy(),
                             accels))
        self.time += cfg.dt
        self._last_snapshot = snapshot
        # outflow at the downstream boundary
        for lane in self.lanes:
            gone = np.flatnonzero(lane.pos >= cfg.segment_length)
            if gone.size:
                for vid in lane.ids[gone]:
                    self._frames.pop(int(vid), None)
                self.outflow_count += int(gone.size)
                lane.remove(gone)
        # collision cleanup: remove both vehicles of every overlapping pair
        for lane in self.lanes:
            if lane.n < 2:
                continue
            gaps = lane.pos[1:] - lane.length[1:] - lane.pos[:-1]
            hit = np.flatnonzero(gaps <= 0.0)
            if hit.size:
                self.collision_count += int(hit.size)
                involved = np.unique(np.concatenate([hit, hit + 1]))
                self.collision_removed += int(involved.size)
                for vid in lane.ids[involved]:
                    self._frames.pop(int(vid), None)
                lane.remove(involved)
        # per-vehicle cumulative stopped time (never decreases)
        for lane in self.lanes:
            slow = np.flatnonzero(lane.speed < cfg.v_stop)
            for vid in lane.ids[slow]:
                key = int(vid)
                self.stopped_time[key] = self.stopped_time.get(
                    key, 0.0) + cfg.dt
        self._spawn()

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    @property
    def vehicle_count(self) -> int:
        return sum(lane.n for lane in self.lanes)

    # -- evaluation ---------------------------------------------------------------

    def run_eval(self, record_trace: bool = False
                 ) -> tuple[DelayMetrics, list[tuple]]:
        """Run the evaluation window and aggregate delay metrics.

        Stopped time, mean speed, and the trace are measured on the
        post-integration snapshot of each step, so vehicles removed at
        the boundary still contribute their final step.
        """
        cfg = self.cfg
        stopped_in_window: dict[int, float] = {}
        seen: set[int] = set()
        speed_sum = 0.0
        vehicle_steps = 0
        outflow_before = self.outflow_count
        collisions_before = self.collision_count
        lc_before = self.lane_change_count
        rows: list[tuple] = []
        for _ in range(cfg.eval_steps):
            self.step()
            for li, ids, kinds, pos, speeds, accels in self._last_snapshot:
                seen.update(int(v) for v in ids)
                speed_sum += float(speeds.sum())
                vehicle_steps += ids.size
                for vid in ids[speeds < cfg.v_stop]:
                    key = int(vid)
                    stopped_in_window[key] = stopped_in_window.get(
                        key, 0.0) + cfg.dt
                if record_trace:
                    for k in range(ids.size):
                        rows.append((self.time, ids[k], kinds[k], li,
                                     pos[k], speeds[k], accels[k]))
        if vehicle_steps == 0:
            raise ValueError("empty evaluation window: no vehicles seen")
        avg_stopped = (sum(stopped_in_window.values()) / len(seen)
                       if seen else 0.0)
        throughput = ((self.outflow_count - outflow_before)
                      * 3600.0 / cfg.eval_duration)
        metrics = DelayMetrics(
            avg_stopped_time=avg_stopped,
            mean_speed=speed_sum / vehicle_steps,
            throughput=throughput,
            collisions=self.collision_count - collisions_before,
            vehicles_seen=len(seen),
            lane_changes=self.lane_change_count - lc_before)
        return metrics, rows


def measure_lc_rate(cfg: HighwayConfig, seed: int) -> float:
    """Average human lane changes per step over the evaluation window of
    an uncontrolled baseline run; calibrates the ring's perturbation
    rates (the 'same magnitude' reference for the multiplier sweep)."""
    sim = HighwaySim(cfg, seed, policy=None)
    sim.run(cfg.warmup_steps)
    before = sim.lane_change_count
    sim.run(cfg.eval_steps)
    return (sim.lane_change_count - before) / cfg.eval_steps
