"""Car-following physics for single-lane vehicle strings.

Implements the intelligent-driver acceleration law with exogenous noise,
uniform-flow equilibrium solving, and discrete-time integration of a ring
of vehicles with periodic wraparound. All speeds are m/s, positions and
gaps are meters, accelerations m/s^2.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend

DEFAULT_VEHICLE_LENGTH = 5.0


class CollisionError(ValueError):
    """Raised when an operation is evaluated on an overlapping vehicle pair."""


@dataclass(frozen=True)
class IdmParams:
    """Intelligent-driver-model parameters.

    Attributes
    ----------
    v0 : float
        desired (free-flow) speed, m/s
    T : float
        safe time headway, s
    a : float
        maximum acceleration, m/s^2
    b : float
        comfortable deceleration, m/s^2
    delta : float
        acceleration exponent
    s0 : float
        minimum bumper-to-bumper gap at standstill, m
    noise_std : float
        standard deviation of the exogenous acceleration noise, m/s^2
    """

    v0: float = 30.0
    T: float = 1.0
    a: float = 1.3
    b: float = 2.0
    delta: float = 4.0
    s0: float = 2.0
    noise_std: float = 0.3

    def __post_init__(self):
        for name in ("v0", "T", "a", "b", "s0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive")
        if self.delta < 1:
            raise ValueError("IdmParams.delta must be >= 1")
        if self.noise_std < 0:
            raise ValueError("IdmParams.noise_std must be >= 0")


class VehicleKind(enum.IntEnum):
    HUMAN = 0
    AV = 1


@dataclass
class VehicleState:
    """One vehicle on a road: front-bumper position, speed, body length, kind."""

    id: int
    position: float
    speed: float
    length: float = DEFAULT_VEHICLE_LENGTH
    kind: VehicleKind = VehicleKind.HUMAN

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.length <= 0:
            raise ValueError("length must be > 0")


@dataclass
class RingState:
    """Ordered vehicle string on a circular track.

    Arrays are index-aligned and sorted by increasing position; the leader
    of vehicle i is vehicle (i+1) % n. ``headways`` caches the
    bumper-to-bumper gap of each vehicle to its leader and is kept in sync
    by every state-producing operation, which avoids re-deriving gaps
    through the modular position arithmetic on every step.
    """

    circumference: float
    ids: np.ndarray        # int64
    positions: np.ndarray  # float64, ascending in [0, L)
    speeds: np.ndarray     # float64, >= 0
    lengths: np.ndarray    # float64, > 0
    kinds: np.ndarray      # int8 (VehicleKind)
    headways: np.ndarray   # float64, > 0
    time: float = 0.0
    next_id: int = field(default=0)

    def __post_init__(self):
        if self.next_id == 0 and self.ids.size:
            self.next_id = int(self.ids.max()) + 1

    @property
    def n(self) -> int:
        return self.ids.size

    @property
    def vehicles(self) -> list[VehicleState]:
        return [
            VehicleState(
                id=int(self.ids[i]),
                position=float(self.positions[i]),
                speed=float(self.speeds[i]),
                length=float(self.lengths[i]),
                kind=VehicleKind(int(self.kinds[i])),
            )
            for i in range(self.n)
        ]

    @classmethod
    def from_vehicles(cls, circumference: float, vehicles: list[VehicleState],
                      time: float = 0.0) -> "RingState":
        vs = sorted(vehicles, key=lambda v: v.position)
        positions = np.array([v.position for v in vs], dtype=np.float64)
        lengths = np.array([v.length for v in vs], dtype=np.float64)
        state = cls(
            circumference=float(circumference),
            ids=np.array([v.id for v in vs], dtype=np.int64),
            positions=positions,
            speeds=np.array([v.speed for v in vs], dtype=np.float64),
            lengths=lengths,
            kinds=np.array([int(v.kind) for v in vs], dtype=np.int8),
            headways=headways_from_positions(positions, lengths, circumference),
            time=time,
        )
        state.validate()
        return state

    def copy(self) -> "RingState":
        return replace(
            self,
            ids=self.ids.copy(),
            positions=self.positions.copy(),
            speeds=self.speeds.copy(),
            lengths=self.lengths.copy(),
            kinds=self.kinds.copy(),
            headways=self.headways.copy(),
        )

    def index_of(self, vehicle_id: int) -> int:
        idx = np.nonzero(self.ids == vehicle_id)[0]
        if idx.size == 0:
            raise KeyError(f"no vehicle with id {vehicle_id}")
        return int(idx[0])

    def validate(self) -> None:
        """Check the ring invariants; raises ValueError on violation."""
        L = self.circumference
        if self.n == 0:
            raise ValueError("empty ring")
        if np.any(self.positions < 0) or np.any(self.positions >= L):
            raise ValueError("positions must lie in [0, L)")
        if self.n > 1 and np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")
        if np.any(self.headways <= 0):
            raise ValueError("bumper-to-bumper headways must all be > 0")
        if np.any(self.speeds < 0):
            raise ValueError("speeds must be >= 0")


def headways_from_positions(positions: np.ndarray, lengths: np.ndarray,
                            circumference: float) -> np.ndarray:
    """Bumper-to-bumper gap of each vehicle to its cyclic leader.

    Positions must be sorted ascending, so only the last vehicle's gap
    crosses the origin (its leader is the first vehicle). Plain
    differences rather than mod-L arithmetic: an overlapping pair shows
    up as a negative gap instead of silently wrapping to L - overlap.
    A single vehicle is its own leader (h = L - len).
    """
    gaps = np.roll(positions, -1) - positions - np.roll(lengths, -1)
    gaps[-1] += circumference
    return gaps


def headway(ring: RingState, i: int) -> float:
    """Bumper-to-bumper headway of vehicle i to its leader."""
    return float(ring.headways[i])


def desired_gap(v: float, dv: float, p: IdmParams) -> float:
    """Desired bumper-to-bumper gap s* for ego speed v and relative speed dv.

    ``dv`` is leader speed minus ego speed; the gap demand grows with the
    closing rate (v - v_lead), so the interaction term enters with -dv.
    Result is >= s0.
    """
    interaction = v * p.T - v * dv / (2.0 * math.sqrt(p.a * p.b))
    return p.s0 + max(0.0, interaction)


def idm_accel(v: float, v_lead: float, h: float, p: IdmParams,
              noise: float = 0.0) -> float:
    """Car-following acceleration for one vehicle.

    ``h`` is the bumper-to-bumper headway to the leader and must be
    positive; h <= 0 means the vehicles overlap and is rejected rather
    than extrapolated.
    """
    if h <= 0:
        raise CollisionError(f"headway must be > 0, got {h}")
    s_star = desired_gap(v, v_lead - v, p)
    ratio = s_star / h
    return p.a * (1.0 - (v / p.v0) ** p.delta - ratio * ratio) + noise


def idm_accel_array(speeds, lead_speeds, gaps, p: IdmParams,
                    noise=None) -> np.ndarray:
    """Vectorized idm_accel over aligned arrays (backend-accelerated)."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if np.any(gaps <= 0):
        raise CollisionError("all headways must be > 0")
    acc = _backend.idm_accel_ring(
        np.ascontiguousarray(speeds, dtype=np.float64),
        np.ascontiguousarray(lead_speeds, dtype=np.float64),
        np.ascontiguousarray(gaps),
        p.v0, p.T, p.a, p.b, p.delta, p.s0,
    )
    if noise is not None:
        acc = acc + noise
    return acc


def ring_idm_accels(ring: RingState, p: IdmParams, noise=None) -> np.ndarray:
    """IDM accelerations for every vehicle in the ring (leader = next index)."""
    lead_speeds = np.roll(ring.speeds, -1)
    return idm_accel_array(ring.speeds, lead_speeds, ring.headways, p, noise)


def equilibrium_speed(n: int, L: float, length: float, p: IdmParams) -> float:
    """Uniform-flow speed for n vehicles of the given body length on a ring of
    circumference L.

    Solves 1 - (v/v0)^delta - ((s0 + v T)/h_eq)^2 = 0 with
    h_eq = L/n - length by bisection on [0, v0]; the residual term is
    strictly decreasing in v so the root is unique. Noise is ignored.
    """
    if n < 1:
        raise ValueError("need at least one vehicle")
    h_eq = L / n - length
    if h_eq <= p.s0:
        raise ValueError(
            f"jam density exceeded: equilibrium gap {h_eq:.6g} m does not "
            f"exceed the minimum gap s0 = {p.s0:.6g} m"
        )

    def residual(v: float) -> float:
        return 1.0 - (v / p.v0) ** p.delta - ((p.s0 + v * p.T) / h_eq) ** 2

    lo, hi = 0.0, p.v0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return 0.5 * (lo + hi)


def step_string(ring: RingState, accels, dt: float) -> tuple[RingState, bool]:
    """Advance the ring one explicit-Euler step.

    Speeds update as v' = max(0, v + a*dt) (no reversing); positions advance
    by v'*dt and wrap mod L. Returns the new state and a collision flag; the
    flag is set when any post-step headway is <= 0, in which case the
    returned state is not a valid ring and the episode should terminate.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    accels = np.ascontiguousarray(accels, dtype=np.float64)
    if accels.shape != ring.speeds.shape:
        raise ValueError("one acceleration per vehicle required")

    pos, vel, gaps, collided = _backend.euler_ring(
        ring.positions, ring.speeds, ring.headways, accels, dt)

    L = ring.circumference
    wrapped = pos >= L
    k = int(np.count_nonzero(wrapped))
    if k:
        pos = pos.copy()
        pos[wrapped] -= L
        if not collided and 0 < k < ring.n:
            # wrapping vehicles are the contiguous top-k; rotate every array
            # so positions stay sorted ascending
            order = np.concatenate(
                [np.arange(ring.n - k, ring.n), np.arange(ring.n - k)])
            pos = pos[order]
            vel = vel[order]
            gaps = gaps[order]
            new = RingState(
                circumference=L,
                ids=ring.ids[order],
                positions=pos,
                speeds=vel,
                lengths=ring.lengths[order],
                kinds=ring.kinds[order],
                headways=gaps,
                time=ring.time + dt,
                next_id=ring.next_id,
            )
            return new, collided

    new = RingState(
        circumference=L,
        ids=ring.ids.copy(),
        positions=pos,
        speeds=vel,
        lengths=ring.lengths.copy(),
        kinds=ring.kinds.copy(),
        headways=gaps,
        time=ring.time + dt,
        next_id=ring.next_id,
    )
    return new, collided
