"""Parallel-efficiency factors, per window and for the whole run.

Within a window of length E the factors come from integer clock deltas:
load balance spreads the out-of-MPI work across ranks, serialisation
relates the slowest rank to the critical-path advance, and transfer
relates that advance to elapsed time.  Their product equals the plain
efficiency sum(delta_oom) / (P * E).  The global factors use the final
clock values instead, so they are exact for the full run and independent
of the window layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .replay import AnnotatedTimeline
from .windows import BoundaryClocks, WindowPlan, boundary_clocks


class NoComputeError(Exception):
    """The trace contains no out-of-MPI time on any rank."""


@dataclass(frozen=True, slots=True)
class WindowMetrics:
    start_ns: int
    end_ns: int
    merged_from: int
    idle: bool
    defined: bool
    delta_oom: tuple[int, ...]
    delta_cp: int
    load_balance: float | None
    serialisation: float | None
    transfer: float | None
    efficiency: float | None

    @property
    def merged(self) -> bool:
        return self.merged_from > 1

    @property
    def length_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass(frozen=True, slots=True)
class GlobalMetrics:
    rank_count: int
    t_compute: tuple[int, ...]
    runtime_ideal: int
    runtime_observed: int
    load_balance: float
    serialisation: float
    transfer: float
    efficiency: float


def window_metrics(start_ns: int, end_ns: int, delta_oom: np.ndarray,
                   delta_cp: int, merged_from: int = 1,
                   idle: bool = False) -> WindowMetrics:
    """Factors of one window from its integer clock deltas.

    Efficiency and transfer divide by the window length, so they exist
    for every window; load balance needs at least one computing rank and
    serialisation a critical path that advanced, so each is None when its
    denominator vanishes.  A window where nobody computed is flagged
    idle; defined marks windows where the full factor decomposition
    load_balance * serialisation * transfer = efficiency exists.
    Serialisation may exceed 1 in a window that drains work queued
    before its start; it is reported as measured.
    """
    length = end_ns - start_ns
    if length <= 0:
        raise ValueError("window must have positive length")
    total = int(delta_oom.sum())
    peak = int(delta_oom.max())
    ranks = len(delta_oom)
    return WindowMetrics(
        start_ns, end_ns, merged_from, idle or peak == 0,
        defined=peak > 0 and delta_cp > 0,
        delta_oom=tuple(int(d) for d in delta_oom), delta_cp=int(delta_cp),
        load_balance=total / (ranks * peak) if peak else None,
        serialisation=peak / delta_cp if delta_cp else None,
        transfer=delta_cp / length,
        efficiency=total / (ranks * length),
    )


def window_series(timeline: AnnotatedTimeline,
                  plan: WindowPlan) -> list[WindowMetrics]:
    """Metrics for every window of a plan, via one vectorized
    interpolation pass over the boundaries."""
    bc = boundary_clocks(timeline, plan.boundaries())
    cp = bc.ideal.max(axis=0)
    out = []
    for j, w in enumerate(plan.windows):
        delta_oom = bc.oom[:, j + 1] - bc.oom[:, j]
        delta_cp = int(cp[j + 1] - cp[j])
        out.append(window_metrics(w.start_ns, w.end_ns, delta_oom, delta_cp,
                                  merged_from=w.merged_from, idle=w.idle))
    return out


def critical_path(bc: BoundaryClocks) -> np.ndarray:
    """Critical-path clock at each boundary: the rank maximum of the
    ideal clock, itself 1-Lipschitz on causally consistent traces."""
    return bc.ideal.max(axis=0)


def global_metrics(timeline: AnnotatedTimeline) -> GlobalMetrics:
    """Whole-run factors from the final clock values of every rank."""
    finals = timeline.final_triples()
    t_compute = tuple(f.oom for f in finals)
    ranks = len(t_compute)
    peak = max(t_compute)
    if peak == 0:
        raise NoComputeError("no rank spent any time outside MPI")
    runtime_ideal = max(f.ideal for f in finals)
    runtime_observed = timeline.total_duration
    return GlobalMetrics(
        rank_count=ranks,
        t_compute=t_compute,
        runtime_ideal=runtime_ideal,
        runtime_observed=runtime_observed,
        load_balance=sum(t_compute) / (ranks * peak),
        serialisation=peak / runtime_ideal,
        transfer=runtime_ideal / runtime_observed,
        efficiency=sum(t_compute) / (ranks * runtime_observed),
    )
