"""Reading Paraver .prv traces and their .pcf label files.

The reader is line oriented and keeps memory proportional to the model it
builds, not to the file: records stream through build_trace one at a time.
Only MPI event types and communication records feed the model; state
records are folded into per-rank totals for a cross-check, everything
else is counted and dropped.
"""

from __future__ import annotations

import os
from array import array
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, NamedTuple

from .model import (
    AnomalyKind,
    AnomalyLog,
    CLASS_CODES,
    CallClass,
    CollectiveStore,
    CommunicatorDef,
    MessageStatus,
    MessageStore,
    TimeUnit,
    Trace,
    TraceMeta,
    WORLD_COMM_ID,
)

# Event types carrying MPI call activity.  A positive value opens a region
# of the class given by the type, value 0 closes it.
EVTYPE_P2P = 50000001
EVTYPE_COLLECTIVE = 50000002
EVTYPE_OTHER = 50000003
# Companion event naming the communicator of a collective entered at the
# same timestamp.  Absent, the collective belongs to the world communicator.
EVTYPE_COMM_ID = 50000004

_MPI_CLASS = {
    EVTYPE_P2P: CallClass.POINT_TO_POINT,
    EVTYPE_COLLECTIVE: CallClass.COLLECTIVE,
    EVTYPE_OTHER: CallClass.OTHER_MPI,
}


class IngestError(Exception):
    """Unrecoverable problem with the input file."""


class RecordKind(Enum):
    STATE = "state"
    EVENT = "event"
    COMMUNICATION = "communication"
    COMMUNICATOR_DEF = "communicator_def"


class RawRecord(NamedTuple):
    kind: RecordKind
    fields: list[int]
    line_number: int


@dataclass
class IngestCounters:
    """Bookkeeping so no record disappears silently.

    The identity records == consumed + ignored + dropped covers event and
    communication records: consumed ones landed in the Trace, ignored ones
    carried only foreign event types, dropped ones have an anomaly entry.
    """

    records: int = 0
    consumed: int = 0
    ignored: int = 0
    dropped: int = 0
    comments: int = 0
    states: int = 0
    communicator_defs: int = 0
    anomalies: int = 0


def _split_outside_parens(text: str) -> list[str]:
    parts: list[str] = []
    depth = 0
    cur: list[str] = []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == ":" and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


def _scale(unit: TimeUnit) -> int:
    return 1000 if unit is TimeUnit.MICROSECONDS else 1


def parse_header(line: str, time_unit: TimeUnit | None = None,
                 source_name: str = "") -> TraceMeta:
    """Extract duration and rank count from a #Paraver header line.

    The application list accepts both the per-task form
    "4(1:1,1:1,1:1,1:1)" and the flat single-task form "1(4:0)"; several
    tasks with several threads each would be a hybrid trace, which is
    rejected, as are multi-application headers.
    """
    line = line.strip()
    if not line.startswith("#Paraver"):
        raise IngestError("line 1: not a Paraver header")
    close = line.find("):")
    if close < 0:
        raise IngestError("line 1: header missing date section")
    parts = _split_outside_parens(line[close + 2:])
    if len(parts) < 4:
        raise IngestError("line 1: header too short")

    dur_text = parts[0].strip()
    unit = time_unit
    if dur_text.endswith("_ns"):
        dur_text, unit = dur_text[:-3], unit or TimeUnit.NANOSECONDS
    elif dur_text.endswith("_us"):
        dur_text, unit = dur_text[:-3], unit or TimeUnit.MICROSECONDS
    if unit is None:
        unit = TimeUnit.NANOSECONDS
    try:
        duration = int(dur_text)
    except ValueError as exc:
        raise IngestError(f"line 1: bad duration {parts[0]!r}") from exc
    if duration < 0:
        raise IngestError("line 1: negative duration")
    if duration * _scale(unit) > (1 << 63) - 1:
        raise IngestError("line 1: duration overflows 64-bit nanoseconds")

    if parts[2].strip() != "1":
        raise IngestError(
            f"line 1: {parts[2].strip()} applications, exactly one supported")

    appl = parts[3].strip()
    open_p = appl.find("(")
    if open_p < 0 or not appl.endswith(")"):
        raise IngestError(f"line 1: malformed application list {appl!r}")
    try:
        ntasks = int(appl[:open_p])
        entries = [e for e in appl[open_p + 1:-1].split(",") if e]
        threads = [int(e.split(":")[0]) for e in entries]
    except ValueError as exc:
        raise IngestError(f"line 1: malformed application list {appl!r}") from exc
    if ntasks != len(threads):
        raise IngestError(f"line 1: {ntasks} tasks but {len(threads)} entries")

    flat = False
    if ntasks == 1:
        rank_count = threads[0]
        flat = rank_count > 1
    else:
        if any(t != 1 for t in threads):
            raise IngestError("line 1: hybrid (multi-thread) traces not supported")
        rank_count = ntasks
    if rank_count < 1:
        raise IngestError("line 1: no ranks declared")

    return TraceMeta(total_duration_ns=duration * _scale(unit),
                     rank_count=rank_count, time_unit=unit,
                     source_name=source_name, flat_rank_encoding=flat)


_KIND_BY_PREFIX = {"1": RecordKind.STATE, "2": RecordKind.EVENT,
                   "3": RecordKind.COMMUNICATION}

# Payload lengths: state rows carry 7 integers, events 5 plus
# type/value pairs, communication rows exactly 14.
_STATE_LEN = 7
_EVENT_MIN = 7
_COMM_LEN = 14


def iter_raw_records(lines: Iterable[str], log: AnomalyLog,
                     counters: IngestCounters | None = None,
                     first_line_number: int = 2) -> Iterator[RawRecord]:
    """Yield well-formed records; malformed lines go to the anomaly log."""
    counters = counters if counters is not None else IngestCounters()
    lineno = first_line_number - 1
    event_kind = RecordKind.EVENT
    comm_kind = RecordKind.COMMUNICATION
    state_kind = RecordKind.STATE
    kind_of = _KIND_BY_PREFIX.get
    for raw in lines:
        lineno += 1
        line = raw.strip()
        if not line:
            continue
        if line[0] == "#":
            counters.comments += 1
            continue
        head, _, rest = line.partition(":")
        if head == "c":
            try:
                fields = list(map(int, rest.split(":")))
            except ValueError:
                log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                        "unparseable communicator definition")
                continue
            counters.communicator_defs += 1
            yield RawRecord(RecordKind.COMMUNICATOR_DEF, fields, lineno)
            continue
        kind = kind_of(head)
        if kind is None:
            log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                    f"unknown record kind {head!r}")
            continue
        countable = kind is event_kind or kind is comm_kind
        if countable:
            counters.records += 1
        try:
            fields = list(map(int, rest.split(":")))
        except ValueError:
            log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                    "non-integer payload")
            if countable:
                counters.dropped += 1
            continue
        bad = (kind is state_kind and len(fields) != _STATE_LEN) \
            or (kind is event_kind
                and (len(fields) < _EVENT_MIN or (len(fields) - 5) % 2)) \
            or (kind is comm_kind and len(fields) != _COMM_LEN)
        if bad:
            log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                    f"{kind.value} record with {len(fields)} payload fields")
            if countable:
                counters.dropped += 1
            continue
        if kind is state_kind:
            counters.states += 1
        yield RawRecord(kind, fields, lineno)


def parse_records(lines: Iterable[str],
                  log: AnomalyLog | None = None,
                  counters: IngestCounters | None = None,
                  ) -> tuple[list[RawRecord], AnomalyLog]:
    """Materialize every record of a trace body.

    Convenience for tests and small inputs; large files should stream
    through build_trace via iter_raw_records instead.
    """
    log = log if log is not None else AnomalyLog()
    return list(iter_raw_records(lines, log, counters)), log


class _RankCursor:
    """Open-region tracking for one rank during assembly.

    A communicator-id companion event binds to the region opened at the
    same timestamp, whichever of the two arrives first in the stream.
    """

    __slots__ = ("open_entry", "open_class", "open_call", "open_hint",
                 "hint_time", "hint_value", "last_time")

    def __init__(self) -> None:
        self.open_entry: int | None = None
        self.open_class = CallClass.OTHER_MPI
        self.open_call = 0
        self.open_hint: int | None = None
        self.hint_time: int | None = None
        self.hint_value = 0
        self.last_time = 0


def build_trace(records: Iterable[RawRecord], meta: TraceMeta,
                log: AnomalyLog | None = None,
                counters: IngestCounters | None = None,
                comm_id_event_type: int = EVTYPE_COMM_ID,
                ) -> tuple[Trace, AnomalyLog]:
    """Assemble the trace model from raw records.

    Event pairing is per rank: a positive MPI value opens a region, zero
    closes it.  A second open closes the dangling region where the new one
    starts; a close without an open is logged and dropped; regions still
    open at stream end close at the rank's last observed timestamp.
    Non-monotonic event timestamps are clamped so the offending duration
    collapses to zero.  Microsecond traces are scaled to nanoseconds here.
    """
    log = log if log is not None else AnomalyLog()
    counters = counters if counters is not None else IngestCounters()
    scale = _scale(meta.time_unit)
    trace = Trace.empty(meta)
    trace.messages = MessageStore()
    trace.collectives = CollectiveStore()
    cursors = [_RankCursor() for _ in range(meta.rank_count)]
    flat = meta.flat_rank_encoding

    def resolve_rank(appl: int, task: int, thread: int, lineno: int) -> int | None:
        if appl != 1:
            log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                    f"application {appl} out of range")
            return None
        rank, other = (thread - 1, task) if flat else (task - 1, thread)
        if other != 1:
            log.add(AnomalyKind.MALFORMED_RECORD, f"line {lineno}",
                    "record addresses a second thread of a rank")
            return None
        if not (0 <= rank < meta.rank_count):
            raise IngestError(f"line {lineno}: rank index {rank} out of range")
        return rank

    event_kind = RecordKind.EVENT
    rank_count = meta.rank_count
    for rec in records:
        if rec.kind is event_kind:
            f = rec.fields
            # straight-line coordinate decode; anything off the happy path
            # falls back to resolve_rank for logging or rejection
            rank = (f[3] - 1) if flat else (f[2] - 1)
            other = f[2] if flat else f[3]
            if f[1] != 1 or other != 1 or not 0 <= rank < rank_count:
                rank = resolve_rank(f[1], f[2], f[3], rec.line_number)
                if rank is None:
                    counters.dropped += 1
                    continue
            cur = cursors[rank]
            time = f[4] * scale
            if time < cur.last_time:
                log.add(AnomalyKind.NONMONOTONIC_TIMESTAMP,
                        f"line {rec.line_number}",
                        f"rank {rank} time {time} before {cur.last_time}")
                time = cur.last_time
            cur.last_time = time
            touched = False
            for i in range(5, len(f), 2):
                etype, value = f[i], f[i + 1]
                klass = _MPI_CLASS.get(etype)
                if klass is None:
                    if etype == comm_id_event_type:
                        if cur.open_entry == time:
                            cur.open_hint = value
                        else:
                            cur.hint_time = time
                            cur.hint_value = value
                        touched = True
                    continue
                touched = True
                if value > 0:
                    if cur.open_entry is not None:
                        log.add(AnomalyKind.UNMATCHED_SEND,
                                f"line {rec.line_number}",
                                f"rank {rank} region opened at {cur.open_entry} never closed")
                        _close_region(trace, rank, cur, time)
                    cur.open_entry = time
                    cur.open_class = klass
                    cur.open_call = value
                    if cur.hint_time == time:
                        cur.open_hint = cur.hint_value
                        cur.hint_time = None
                else:
                    if cur.open_entry is None:
                        log.add(AnomalyKind.UNMATCHED_RECV,
                                f"line {rec.line_number}",
                                f"rank {rank} close event with no open region")
                    else:
                        _close_region(trace, rank, cur, time)
            if touched:
                counters.consumed += 1
            else:
                counters.ignored += 1
        elif rec.kind is RecordKind.COMMUNICATION:
            f = rec.fields
            s_rank = resolve_rank(f[1], f[2], f[3], rec.line_number)
            r_rank = resolve_rank(f[7], f[8], f[9], rec.line_number)
            if s_rank is None or r_rank is None:
                counters.dropped += 1
                continue
            send_begin = f[4] * scale   # logical send
            recv_end = f[11] * scale    # physical receive completion
            status = MessageStatus.VALID
            if send_begin > recv_end:
                status = MessageStatus.FAULTY_LOCAL
                log.add(AnomalyKind.REVERSED_PTP, f"line {rec.line_number}",
                        f"send at {send_begin} after receive completion {recv_end}")
            trace.messages.append_fields(s_rank, r_rank, send_begin, recv_end,
                                         f[12], f[13], status)
            counters.consumed += 1
        elif rec.kind is RecordKind.COMMUNICATOR_DEF:
            f = rec.fields
            if len(f) < 3 or len(f) != 3 + f[2]:
                log.add(AnomalyKind.MALFORMED_RECORD, f"line {rec.line_number}",
                        "communicator definition length mismatch")
                continue
            members = [t - 1 for t in f[3:]]
            trace.communicators[f[1]] = CommunicatorDef(f[1], members)
        elif rec.kind is RecordKind.STATE:
            f = rec.fields
            rank = resolve_rank(f[1], f[2], f[3], rec.line_number)
            if rank is None:
                continue
            begin, end, state = f[4] * scale, f[5] * scale, f[6]
            key = (rank, state)
            trace.state_time_ns[key] = trace.state_time_ns.get(key, 0) \
                + max(0, end - begin)

    for rank, cur in enumerate(cursors):
        if cur.open_entry is not None:
            log.add(AnomalyKind.UNMATCHED_SEND, f"rank {rank}",
                    f"region opened at {cur.open_entry} still open at stream end")
            _close_region(trace, rank, cur, cur.last_time)

    if WORLD_COMM_ID not in trace.communicators:
        trace.communicators[WORLD_COMM_ID] = CommunicatorDef(
            WORLD_COMM_ID, list(range(meta.rank_count)))

    _group_collectives(trace)
    counters.anomalies = log.total
    return trace, log


def _close_region(trace: Trace, rank: int, cur: _RankCursor, time: int) -> None:
    trace.regions[rank].append_fields(cur.open_entry, time, cur.open_class,
                                      cur.open_call, cur.open_hint)
    cur.open_entry = None
    cur.open_hint = None


def _group_collectives(trace: Trace) -> None:
    """Group per-rank collective regions into collective occurrences.

    A region belongs to the communicator its entry hint named, defaulting
    to world; the n-th collective of a communicator on each member rank
    forms occurrence n.  Each participant row records the region index it
    came from, so replay can reattach without re-matching timestamps.
    """
    per_comm: dict[int, dict[int, array]] = {}
    coll_code = CLASS_CODES[CallClass.COLLECTIVE]
    for rank, regs in enumerate(trace.regions):
        hints = regs.comm_hints
        for k, code in enumerate(regs.class_codes):
            if code != coll_code:
                continue
            cid = hints.get(k, WORLD_COMM_ID)
            per_comm.setdefault(cid, {}).setdefault(rank, array("q")).append(k)
    store = trace.collectives
    for cid in sorted(per_comm):
        by_rank = per_comm[cid]
        member_ranks = sorted(by_rank)
        depth = max(len(v) for v in by_rank.values())
        for occ in range(depth):
            participants = []
            region_indices = []
            for r in member_ranks:
                ks = by_rank[r]
                if occ < len(ks):
                    k = ks[occ]
                    regs = trace.regions[r]
                    participants.append(
                        (r, regs.entry_times[k], regs.exit_times[k]))
                    region_indices.append(k)
            store.append_fields(cid, occ, participants, region_indices)


def parse_pcf_labels(lines: Iterable[str],
                     log: AnomalyLog | None = None) -> dict[tuple[int, int], str]:
    """Read EVENT_TYPE/VALUES blocks of a .pcf into {(type, value): label}.

    On duplicate value lines the last definition wins and an anomaly is
    logged.  Sections other than EVENT_TYPE are skipped wholesale.
    """
    labels: dict[tuple[int, int], str] = {}
    current_types: list[int] = []
    in_values = False
    in_event_type = False
    for n, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        upper = line.upper()
        if upper.startswith("EVENT_TYPE"):
            current_types = []
            in_values = False
            in_event_type = True
            continue
        if upper.startswith("VALUES") and in_event_type:
            in_values = True
            continue
        if line[0].isalpha():
            current_types = []
            in_values = False
            in_event_type = False
            continue
        if not in_event_type:
            continue
        parts = line.split(None, 2)
        if not in_values:
            # "<gradient> <type> <label>" rows naming the event types
            if len(parts) >= 2:
                try:
                    current_types.append(int(parts[1]))
                except ValueError:
                    pass
            continue
        if current_types and len(parts) >= 2:
            try:
                value = int(parts[0])
            except ValueError:
                continue
            label = line.split(None, 1)[1].strip()
            for etype in current_types:
                key = (etype, value)
                if key in labels and log is not None:
                    log.add(AnomalyKind.MALFORMED_RECORD, f"pcf line {n}",
                            f"duplicate label for type {etype} value {value}")
                labels[key] = label
    return labels


def load_trace(path: str, time_unit: TimeUnit | None = None,
               ) -> tuple[Trace, AnomalyLog, IngestCounters]:
    """Stream a .prv file from disk into a Trace."""
    log = AnomalyLog()
    counters = IngestCounters()
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        header = fh.readline()
        meta = parse_header(header, time_unit=time_unit,
                            source_name=os.path.basename(path))
        records = iter_raw_records(fh, log, counters)
        trace, log = build_trace(records, meta, log, counters)
    return trace, log, counters


def load_labels(prv_path: str) -> dict[tuple[int, int], str]:
    """Labels from the .pcf sitting next to a .prv, if there is one."""
    pcf = os.path.splitext(prv_path)[0] + ".pcf"
    if not os.path.exists(pcf):
        return {}
    with open(pcf, "r", encoding="utf-8", errors="replace") as fh:
        return parse_pcf_labels(fh)
