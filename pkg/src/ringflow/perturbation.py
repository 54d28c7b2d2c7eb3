"""Stochastic lane-change surrogate for single-lane rings.

Real lane changes cannot happen on a one-lane track, so their effect is
emulated by Bernoulli cut-in (insertion) and cut-out (deletion) events:
each step, every vehicle with enough front gap may receive a new human
driver dropped into the middle of that gap, and every human driver may
vanish. Event probabilities are normalized so the expected number of
insertions (deletions) per step equals a configured rate.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dynamics import DEFAULT_VEHICLE_LENGTH, RingState, VehicleKind


@dataclass(frozen=True)
class LaneChangeConfig:
    """Event rates and the insertion-eligibility gap threshold.

    e_in / e_out are expected events per simulator step. min_insert_gap
    must be at least 2*(s0 + vehicle length) so that splitting an
    eligible gap in half leaves at least s0 on both sides of the new
    vehicle; ``validate_against`` enforces this where the road's IDM
    parameters are known.
    """

    e_in: float = 0.0
    e_out: float = 0.0
    min_insert_gap: float = 14.0
    enabled: bool = False

    def __post_init__(self):
        if self.e_in < 0 or self.e_out < 0:
            raise ValueError("event rates must be >= 0")
        if self.min_insert_gap <= 0:
            raise ValueError("min_insert_gap must be > 0")

    def validate_against(self, s0: float, vehicle_length: float) -> None:
        floor = 2.0 * (s0 + vehicle_length)
        if self.min_insert_gap < floor:
            raise ValueError(
                f"min_insert_gap {self.min_insert_gap:.6g} < 2*(s0 + length)"
                f" = {floor:.6g}; insertions could create gaps below s0"
            )


class EventKind(enum.Enum):
    INSERTION = "insertion"
    DELETION = "deletion"


@dataclass(frozen=True)
class LaneChangeEvent:
    """One sampled cut-in or cut-out.

    ``target`` is the follower's id for insertions (the new vehicle lands
    in the middle of its front gap) and the removed vehicle's id for
    deletions. entry_speed/entry_gap are only meaningful for insertions.
    """

    kind: EventKind
    target: int
    entry_speed: float = 0.0
    entry_gap: float = 0.0

    def __post_init__(self):
        if self.kind is EventKind.INSERTION:
            if self.entry_speed < 0:
                raise ValueError("entry_speed must be >= 0")
            if self.entry_gap <= 0:
                raise ValueError("entry_gap must be > 0")


def eligible_count(ring: RingState, cfg: LaneChangeConfig) -> int:
    """Number of vehicles whose front gap admits a safe insertion."""
    return int(np.count_nonzero(ring.headways >= cfg.min_insert_gap))


def sample_events(ring: RingState, cfg: LaneChangeConfig,
                  rng: np.random.Generator) -> list[LaneChangeEvent]:
    """Draw this step's insertion and deletion events.

    Per-vehicle independent Bernoulli trials over the safe-headway set:
    every eligible vehicle gets an insertion trial with
    p = min(1, e_in / n_t), and every eligible human vehicle a deletion
    trial with p = min(1, e_out / n_t), where n_t is the eligible count.
    Confining both kinds to the same set keeps the expected totals at
    e_in and e_out, so equal rates leave the vehicle count stationary
    even when only part of the ring is eligible. n_t = 0 leaves both
    probabilities undefined, so no events fire at all. Insertions
    precede deletions in the returned list; both sweeps draw one uniform
    per vehicle in ring order, so the event sequence is a pure function
    of (rng state, ring state).
    """
    n_t = eligible_count(ring, cfg)
    if n_t == 0:
        return []

    events: list[LaneChangeEvent] = []
    n = ring.n

    p_enter = min(1.0, cfg.e_in / n_t)
    draws = rng.random(n)
    if p_enter > 0.0:
        mean_speed = float(np.mean(ring.speeds))
        eligible = ring.headways >= cfg.min_insert_gap
        for i in np.nonzero(eligible & (draws < p_enter))[0]:
            events.append(LaneChangeEvent(
                kind=EventKind.INSERTION,
                target=int(ring.ids[i]),
                entry_speed=mean_speed,
                entry_gap=float(ring.headways[i]) / 2.0,
            ))

    p_exit = min(1.0, cfg.e_out / n_t)
    draws = rng.random(n)
    if p_exit > 0.0:
        human = ring.kinds == int(VehicleKind.HUMAN)
        eligible = ring.headways >= cfg.min_insert_gap
        for i in np.nonzero(human & eligible & (draws < p_exit))[0]:
            events.append(LaneChangeEvent(
                kind=EventKind.DELETION, target=int(ring.ids[i])))
    return events


def apply_insertion(ring: RingState, event: LaneChangeEvent,
                    cfg: LaneChangeConfig,
                    vehicle_length: float = DEFAULT_VEHICLE_LENGTH,
                    ) -> tuple[RingState, bool]:
    """Insert a human vehicle in the middle of the follower's front gap.

    The follower's new headway is assigned exactly g/2 (not re-derived
    from positions, which would round); the newcomer gets g/2 - length
    and speed = event.entry_speed. Returns (ring', True), or
    (ring, False) unchanged when the follower is gone or its gap has
    dropped below the eligibility threshold.
    """
    try:
        idx = ring.index_of(event.target)
    except KeyError:
        return ring, False
    g = float(ring.headways[idx])
    if g < cfg.min_insert_gap:
        return ring, False

    L = ring.circumference
    half = g / 2.0
    new_pos = ring.positions[idx] + (half + vehicle_length)
    insert_at = idx + 1
    if new_pos >= L:
        new_pos -= L
        insert_at = 0

    new_id = ring.next_id
    positions = np.insert(ring.positions, insert_at, new_pos)
    speeds = np.insert(ring.speeds, insert_at, event.entry_speed)
    lengths = np.insert(ring.lengths, insert_at, vehicle_length)
    ids = np.insert(ring.ids, insert_at, new_id)
    kinds = np.insert(ring.kinds, insert_at, int(VehicleKind.HUMAN))
    headways = np.insert(ring.headways, insert_at, half - vehicle_length)
    # follower index may have shifted if the newcomer wrapped to slot 0
    follower_at = idx + 1 if insert_at == 0 else idx
    headways[follower_at] = half

    new = RingState(
        circumference=L, ids=ids, positions=positions, speeds=speeds,
        lengths=lengths, kinds=kinds, headways=headways, time=ring.time,
        next_id=new_id + 1,
    )
    return new, True


def apply_deletion(ring: RingState, event: LaneChangeEvent,
                   ) -> tuple[RingState, bool]:
    """Remove a human vehicle; its follower absorbs gap plus body length.

    Rejected (returns the ring unchanged and False) when the target is
    missing, is an AV, or is the last vehicle on the ring.
    """
    try:
        idx = ring.index_of(event.target)
    except KeyError:
        return ring, False
    if ring.kinds[idx] == int(VehicleKind.AV):
        return ring, False
    if ring.n == 1:
        return ring, False

    follower = (idx - 1) % ring.n
    headways = np.delete(ring.headways, idx)
    merged = ring.headways[follower] + ring.headways[idx] + ring.lengths[idx]
    # follower's index after deletion: unchanged if it precedes idx
    headways[follower if follower < idx else follower - 1] = merged

    new = RingState(
        circumference=ring.circumference,
        ids=np.delete(ring.ids, idx),
        positions=np.delete(ring.positions, idx),
        speeds=np.delete(ring.speeds, idx),
        lengths=np.delete(ring.lengths, idx),
        kinds=np.delete(ring.kinds, idx),
        headways=headways,
        time=ring.time,
        next_id=ring.next_id,
    )
    return new, True


@dataclass(frozen=True)
class EventRecord:
    """Applied event, as logged to the audit CSV."""

    time: float
    kind: EventKind
    target: int
    entry_speed: float | None
    entry_gap: float | None


def apply_events(ring: RingState, events: list[LaneChangeEvent],
                 cfg: LaneChangeConfig,
                 vehicle_length: float = DEFAULT_VEHICLE_LENGTH,
                 ) -> tuple[RingState, list[EventRecord]]:
    """Apply a sampled batch in order, re-validating each event.

    Returns the final ring and records for the events that took effect.
    """
    records: list[EventRecord] = []
    for ev in events:
        if ev.kind is EventKind.INSERTION:
            ring, ok = apply_insertion(ring, ev, cfg, vehicle_length)
            if ok:
                records.append(EventRecord(
                    time=ring.time, kind=ev.kind, target=ev.target,
                    entry_speed=ev.entry_speed, entry_gap=ev.entry_gap))
        else:
            ring, ok = apply_deletion(ring, ev)
            if ok:
                records.append(EventRecord(
                    time=ring.time, kind=ev.kind, target=ev.target,
                    entry_speed=None, entry_gap=None))
    return ring, records


EVENT_CSV_HEADER = "time,kind,follower_id,entry_speed,entry_gap"


def write_event_csv(records: list[EventRecord], path) -> None:
    """Audit log of applied events; floats via repr for byte-stable output."""
    with open(path, "w", newline="") as fh:
        fh.write(EVENT_CSV_HEADER + "\n")
        for r in records:
            speed = repr(float(r.entry_speed)) if r.entry_speed is not None else ""
            gap = repr(float(r.entry_gap)) if r.entry_gap is not None else ""
            fh.write(f"{float(r.time)!r},{r.kind.value},{r.target},"
                     f"{speed},{gap}\n")
