"""Exact event-driven simulation of the age-structured population.

Between events every age advances at unit speed, so the population is stored
as a sorted list of *birth offsets* (age minus elapsed time): aging is free and
events touch O(1) entries.  Branch events are realized by thinning: waiting
times are proposed at the dominating rate ``c1 * mass`` (c1 = sup of the death
rate), ages advance to the proposal, and the proposal is accepted with
probability ``<aged state, alpha> / (c1 * mass)``.  On acceptance the dying
particle is drawn with probability proportional to ``alpha(age)`` per atom and
replaced by its offspring at age zero.  Because the population size is constant
between events and ``alpha <= c1`` pointwise, this realizes the law of the
driving point process exactly; a fresh exponential is drawn after every
accepted or rejected proposal (memorylessness makes the redraw exact).

Immigration arrivals form an independent Poisson stream of the mechanism's
total rate; the merged event stream is generated by competing exponentials.
With a zero-rate mechanism no arrival randomness is consumed, so the random
stream (hence the path) coincides with the plain branching simulation.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .measures import AgeMeasure
from .models import BranchingModel, ImmigrationMechanism

__all__ = ["SimConfig", "Event", "Trajectory", "replicate_rng", "simulate", "replay_statistics"]

DEFAULT_EVENT_CAP = 10_000_000


def replicate_rng(seed: int, *path: int) -> np.random.Generator:
    """Counter-based generator for one replicate, independent across paths.

    Streams are derived from (seed, *path) through a seed sequence feeding a
    Philox counter generator, so replicate r of check c never shares state
    with any other (seed, c, r) and no generator is ever shared or advanced
    across tasks.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *path))))


@dataclass(frozen=True)
class SimConfig:
    """One simulation task: model, optional immigration, horizon, seeding."""

    model: BranchingModel
    initial: AgeMeasure
    t_end: float
    snapshot_times: tuple[float, ...]
    immigration: ImmigrationMechanism | None = None
    seed: int = 0
    replicate_index: int = 0
    max_events: int = DEFAULT_EVENT_CAP

    def __post_init__(self) -> None:
        if not (self.t_end > 0):
            raise ValueError("t_end must be > 0")
        if self.max_events <= 0:
            raise ValueError("max_events must be > 0")
        times = tuple(float(s) for s in self.snapshot_times)
        if any(s < 0 or s > self.t_end for s in times):
            raise ValueError("snapshot times must lie within [0, t_end]")
        if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
            times = tuple(sorted(times))
        object.__setattr__(self, "snapshot_times", times)

    def with_replicate(self, r: int) -> "SimConfig":
        return SimConfig(
            self.model,
            self.initial,
            self.t_end,
            self.snapshot_times,
            self.immigration,
            self.seed,
            r,
            self.max_events,
        )


@dataclass(frozen=True)
class Event:
    """One jump of the population path.

    ``kind`` is "branch" (a death with offspring) or "immigrate" (a group
    arrival).  Branch events carry the dying particle's age and the offspring
    count; immigration events carry the arriving group with its ages at
    arrival time.
    """

    time: float
    kind: str
    dying_age: float = math.nan
    offspring_count: int = -1
    group: AgeMeasure | None = None

    @property
    def mass_delta(self) -> int:
        if self.kind == "branch":
            return self.offspring_count - 1
        assert self.group is not None
        return self.group.total_mass


@dataclass(frozen=True)
class Trajectory:
    """Snapshots at requested times plus the full event log.

    ``terminated_by`` is "t_end" (ran to the horizon), "extinction" (the
    population died and, without immigration, can never recover) or
    "event_cap" (truncated; statistics from such a path are biased and all
    consumers must check the flag).
    """

    snapshots: tuple[tuple[float, AgeMeasure], ...]
    events: tuple[Event, ...]
    terminated_by: str
    initial: AgeMeasure

    def branch_count(self, t: float) -> int:
        """Number of branch events up to and including time t."""
        return sum(1 for e in self.events if e.kind == "branch" and e.time <= t)

    def mass_path(self) -> tuple[np.ndarray, np.ndarray]:
        """Event times and the population size right after each event."""
        times = np.empty(len(self.events))
        masses = np.empty(len(self.events), dtype=np.int64)
        m = self.initial.total_mass
        for i, e in enumerate(self.events):
            m += e.mass_delta
            times[i] = e.time
            masses[i] = m
        return times, masses

    def running_max_mass(self, t: float) -> int:
        """sup of the population size over [0, t]; exact from the event log."""
        m = self.initial.total_mass
        best = m
        for e in self.events:
            if e.time > t:
                break
            m += e.mass_delta
            best = max(best, m)
        return best


def simulate(cfg: SimConfig, rng: np.random.Generator | None = None) -> Trajectory:
    """Run one exact path of the branching process, with immigration if configured.

    Deterministic: identical (seed, replicate_index, config) gives a
    bit-identical trajectory.  Exceeding ``max_events`` truncates the path and
    flags it; it is never silently dropped.
    """
    if rng is None:
        rng = replicate_rng(cfg.seed, cfg.replicate_index)
    alpha = cfg.model.alpha
    offspring = cfg.model.offspring
    _, c1, _ = cfg.model.constants()
    imm = cfg.immigration
    rate_arrival = imm.total_rate if imm is not None else 0.0

    # age of particle i at time t is bases[i] + t; newborns get base = -t,
    # which is strictly smaller than every existing base, so prepending keeps
    # the list sorted
    bases: list[float] = list(cfg.initial.ages)
    clock = 0.0
    events: list[Event] = []
    snapshots: list[tuple[float, AgeMeasure]] = []
    snap_times = list(cfg.snapshot_times)
    snap_pos = 0

    def record_through(t: float, inclusive: bool) -> None:
        # The path is right-continuous: a snapshot exactly at a jump time sees
        # the post-jump state, so pre-event recording stays strictly below it.
        nonlocal snap_pos
        while snap_pos < len(snap_times) and (
            snap_times[snap_pos] < t or (inclusive and snap_times[snap_pos] <= t)
        ):
            s = snap_times[snap_pos]
            snapshots.append((s, AgeMeasure(tuple(b + s for b in bases))))
            snap_pos += 1

    n_events = 0
    terminated_by = "t_end"
    while True:
        mass = len(bases)
        if mass == 0 and rate_arrival == 0.0:
            terminated_by = "extinction"
            record_through(cfg.t_end, inclusive=True)
            break
        t_branch = math.inf
        if mass > 0:
            t_branch = clock + rng.exponential(1.0 / (c1 * mass))
        t_arrival = math.inf
        if rate_arrival > 0.0:
            t_arrival = clock + rng.exponential(1.0 / rate_arrival)
        t_next = min(t_branch, t_arrival)
        if t_next > cfg.t_end:
            record_through(cfg.t_end, inclusive=True)
            break
        record_through(t_next, inclusive=False)
        if t_branch <= t_arrival:
            ages_now = np.asarray(bases) + t_next
            weights = np.asarray(alpha(ages_now), dtype=np.float64)
            hazard = float(weights.sum())
            if rng.random() * c1 * mass < hazard:
                cum = np.cumsum(weights)
                idx = int(np.searchsorted(cum, rng.random() * hazard, side="right"))
                idx = min(idx, mass - 1)
                dying_age = float(ages_now[idx])
                k = offspring.sample(dying_age, rng)
                del bases[idx]
                if k:
                    bases[0:0] = [-t_next] * k
                events.append(Event(t_next, "branch", dying_age=dying_age, offspring_count=k))
                n_events += 1
        else:
            assert imm is not None
            group = imm.sample_group(rng)
            for a in group.ages:
                bisect.insort(bases, a - t_next)
            events.append(Event(t_next, "immigrate", group=group))
            n_events += 1
        clock = t_next
        if n_events >= cfg.max_events:
            terminated_by = "event_cap"
            break

    return Trajectory(tuple(snapshots), tuple(events), terminated_by, cfg.initial)


def replay_statistics(traj: Trajectory, f) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """Per-snapshot times, integrals <X_t, f>, branch counts n(t), and a bias flag.

    A pure function of the trajectory.  ``biased`` is True when the path was
    cut off by the event cap, in which case the statistics must not be pooled
    into unbiased estimators.
    """
    times = np.array([t for t, _ in traj.snapshots])
    integrals = np.array([m.integrate(f) for _, m in traj.snapshots])
    branch_times = sorted(e.time for e in traj.events if e.kind == "branch")
    counts = np.searchsorted(branch_times, times, side="right")
    return times, integrals, counts, traj.terminated_by == "event_cap"
