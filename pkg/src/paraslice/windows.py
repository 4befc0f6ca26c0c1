"""Adaptive time windows and clock interpolation between event points.

The analysis span is tiled with fixed-length windows, the tile length is
doubled while any window contains no MPI event point at all, and windows
that still leave some rank under the event-count threshold are merged
greedily into their successors.  Between two stored event points a clock
is interpolated with the min-cap rule: it rises 1:1 with elapsed time
until it hits the value stored at the segment end, so waiting inside MPI
is attributed to the tail of the region, never smeared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .replay import AnnotatedTimeline, ClockTriple, RankTimeline


@dataclass(slots=True)
class Window:
    start_ns: int
    end_ns: int
    merged_from: int = 1
    idle: bool = False
    event_counts: list[int] = field(default_factory=list)

    @property
    def merged(self) -> bool:
        return self.merged_from > 1

    @property
    def length_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass(slots=True)
class WindowPlan:
    windows: list[Window]
    base_length_ns: int
    requested_length_ns: int
    effective_duration_ns: int
    clamped: bool
    min_events: int

    def boundaries(self) -> np.ndarray:
        bounds = [w.start_ns for w in self.windows]
        bounds.append(self.windows[-1].end_ns)
        return np.asarray(bounds, dtype=np.int64)


def _tile(duration: int, length: int) -> list[tuple[int, int]]:
    spans = []
    start = 0
    while start < duration:
        spans.append((start, min(start + length, duration)))
        start += length
    return spans


def _counts(events: np.ndarray, spans: list[tuple[int, int]],
            duration: int) -> np.ndarray:
    """Events per span; half-open except the last span, which keeps its
    end so a point exactly at the analysis end is not lost."""
    edges = np.asarray([s for s, _ in spans] + [spans[-1][1]], dtype=np.int64)
    lo = np.searchsorted(events, edges[:-1], side="left")
    hi = np.searchsorted(events, edges[1:], side="left")
    out = hi - lo
    out[-1] = np.searchsorted(events, edges[-1], side="right") - lo[-1]
    return out


def plan_windows(timeline: AnnotatedTimeline, base_length_ns: int,
                 min_events: int = 8,
                 cutoff_ns: int | None = None) -> WindowPlan:
    """Lay out the analysis windows for one replayed trace."""
    if base_length_ns <= 0:
        raise ValueError("window length must be positive")
    if min_events < 3:
        raise ValueError("min_events must be at least 3: fewer pooled event"
                         " points cannot anchor a window's clock deltas")
    duration = timeline.total_duration
    clamped = cutoff_ns is not None and cutoff_ns < duration
    if clamped:
        duration = cutoff_ns
    if duration <= 0:
        raise ValueError("analysis span is empty")

    per_rank = [tl.event_times for tl in timeline.ranks]
    pooled = (np.sort(np.concatenate(per_rank))
              if any(len(e) for e in per_rank)
              else np.asarray([], dtype=np.int64))
    pooled = pooled[pooled <= duration]

    length = base_length_ns
    while length < duration:
        spans = _tile(duration, length)
        if _counts(pooled, spans, duration).min() > 0:
            break
        length *= 2
    if length >= duration:
        spans = [(0, duration)]
        length = duration
    else:
        spans = _tile(duration, length)

    rank_counts = np.stack([_counts(ev[ev <= duration], spans, duration)
                            for ev in per_rank])

    windows: list[Window] = []
    i = 0
    total = len(spans)
    while i < total:
        start, end = spans[i]
        counts = rank_counts[:, i].copy()
        merged_from = 1
        while counts.min() < min_events and i + 1 < total:
            i += 1
            end = spans[i][1]
            counts += rank_counts[:, i]
            merged_from += 1
        windows.append(Window(start, end, merged_from,
                              idle=bool(counts.min() < min_events),
                              event_counts=[int(c) for c in counts]))
        i += 1

    return WindowPlan(windows, length, base_length_ns, duration,
                      clamped, min_events)


def interpolate_clock(tl: RankTimeline, t: int) -> ClockTriple:
    """Clock triple of one rank at an arbitrary time inside the trace.

    Elapsed time is the identity.  The stored clocks are interpolated
    with min(c0 + (t - t0), c1) over the enclosing segment: the clock
    keeps pace with elapsed time until the segment's final value caps it.
    """
    times = tl.times
    i = int(np.searchsorted(times, t, side="right")) - 1
    i = max(0, min(i, len(times) - 2))
    dt = t - int(times[i])
    oom = min(int(tl.oom[i]) + dt, int(tl.oom[i + 1]))
    ideal = min(int(tl.ideal[i]) + dt, int(tl.ideal[i + 1]))
    return ClockTriple(t, oom, ideal)


def clocks_at(tl: RankTimeline, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized min-cap interpolation: (oom, ideal) at each time."""
    idx = np.searchsorted(tl.times, ts, side="right") - 1
    idx = np.clip(idx, 0, len(tl.times) - 2)
    dt = ts - tl.times[idx]
    oom = np.minimum(tl.oom[idx] + dt, tl.oom[idx + 1])
    ideal = np.minimum(tl.ideal[idx] + dt, tl.ideal[idx + 1])
    return oom, ideal


@dataclass(slots=True)
class BoundaryClocks:
    """Out-of-MPI and ideal clock values of every rank at every window
    boundary; row r column b belongs to rank r at boundaries[b]."""
    boundaries: np.ndarray
    oom: np.ndarray
    ideal: np.ndarray


def boundary_clocks(timeline: AnnotatedTimeline,
                    boundaries: np.ndarray) -> BoundaryClocks:
    ooms = []
    ideals = []
    for tl in timeline.ranks:
        o, i = clocks_at(tl, boundaries)
        ooms.append(o)
        ideals.append(i)
    return BoundaryClocks(boundaries, np.stack(ooms), np.stack(ideals))
