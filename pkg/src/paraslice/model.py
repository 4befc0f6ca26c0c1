"""In-memory model of an MPI-only trace.

Holds the parsed regions, point-to-point messages, collective operations
and communicator definitions of one run, together with the anomaly log
that ingestion and replay append to.  All timestamps are 64-bit integer
nanoseconds; traces recorded in microseconds are scaled on the way in.
"""

from __future__ import annotations

import enum
from array import array
from bisect import bisect_left, bisect_right
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

#: Communicator id conventionally used for the world communicator.
WORLD_COMM_ID = 1


class TimeUnit(enum.Enum):
    NANOSECONDS = "ns"
    MICROSECONDS = "us"


class CallClass(enum.Enum):
    POINT_TO_POINT = "point_to_point"
    COLLECTIVE = "collective"
    OTHER_MPI = "other_mpi"


class MessageStatus(enum.Enum):
    VALID = "valid"
    FAULTY_LOCAL = "faulty_local"


class AnomalyKind(enum.Enum):
    REVERSED_PTP = "reversed_ptp"
    UNMATCHED_SEND = "unmatched_send"
    UNMATCHED_RECV = "unmatched_recv"
    NONMONOTONIC_TIMESTAMP = "nonmonotonic_timestamp"
    MALFORMED_RECORD = "malformed_record"


@dataclass(slots=True)
class TraceMeta:
    """Header-level facts about a trace.

    flat_rank_encoding marks headers that declare a single task with N
    threads; record coordinates then carry the rank in the thread field.
    """

    total_duration_ns: int
    rank_count: int
    time_unit: TimeUnit = TimeUnit.NANOSECONDS
    source_name: str = ""
    flat_rank_encoding: bool = False


@dataclass(slots=True)
class MpiRegion:
    """One [entry, exit] interval a rank spent inside the MPI runtime."""

    rank: int
    entry_time: int
    exit_time: int
    call_class: CallClass
    call_id: int = 0
    region_seq: int = 0
    # communicator announced by a companion event at entry (collectives)
    comm_hint: int | None = None

    def duration(self) -> int:
        return self.exit_time - self.entry_time

    def contains(self, t: int) -> bool:
        return self.entry_time <= t <= self.exit_time


#: stable wire order of call classes inside RegionStore.class_codes
CLASS_BY_CODE = (CallClass.POINT_TO_POINT, CallClass.COLLECTIVE,
                 CallClass.OTHER_MPI)
CLASS_CODES = {cls: code for code, cls in enumerate(CLASS_BY_CODE)}


class RegionStore:
    """Columnar storage of one rank's MPI regions.

    Multi-million-region traces cannot afford an object per region, so
    times, call classes, and ids live in flat arrays; indexing and
    iteration materialize MpiRegion values on demand and hot paths read
    the arrays directly.  Append order must be entry-time order, matching
    the region_seq each materialized view derives from its index.
    """

    __slots__ = ("rank", "entry_times", "exit_times", "class_codes",
                 "call_ids", "comm_hints")

    def __init__(self, rank: int) -> None:
        self.rank = rank
        self.entry_times = array("q")
        self.exit_times = array("q")
        self.class_codes = bytearray()
        self.call_ids = array("q")
        #: sparse: region index -> communicator id announced at entry
        self.comm_hints: dict[int, int] = {}

    def append_fields(self, entry_time: int, exit_time: int,
                      call_class: CallClass, call_id: int = 0,
                      comm_hint: int | None = None) -> None:
        if comm_hint is not None:
            self.comm_hints[len(self.entry_times)] = comm_hint
        self.entry_times.append(entry_time)
        self.exit_times.append(exit_time)
        self.class_codes.append(CLASS_CODES[call_class])
        self.call_ids.append(call_id)

    def append(self, region: MpiRegion) -> None:
        self.append_fields(region.entry_time, region.exit_time,
                           region.call_class, region.call_id,
                           region.comm_hint)

    def hint_at(self, index: int) -> int | None:
        return self.comm_hints.get(index)

    def __len__(self) -> int:
        return len(self.entry_times)

    def __getitem__(self, index):
        n = len(self.entry_times)
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(n))]
        if index < 0:
            index += n
        if not 0 <= index < n:
            raise IndexError("region index out of range")
        return MpiRegion(rank=self.rank,
                         entry_time=self.entry_times[index],
                         exit_time=self.exit_times[index],
                         call_class=CLASS_BY_CODE[self.class_codes[index]],
                         call_id=self.call_ids[index],
                         region_seq=index,
                         comm_hint=self.comm_hints.get(index))

    def __iter__(self) -> Iterator[MpiRegion]:
        for i in range(len(self.entry_times)):
            yield self[i]

    def __repr__(self) -> str:
        return f"RegionStore(rank={self.rank}, regions={len(self)})"


@dataclass(slots=True)
class PtpMessage:
    """A matched point-to-point message between two ranks.

    send_begin is the beginning of the send directive, recv_end the end of
    the corresponding receive directive.  Replay may downgrade the status
    to FAULTY_LOCAL; a degraded message never synchronizes clocks.
    """

    sender: int
    receiver: int
    send_begin: int
    recv_end: int
    size_bytes: int = 0
    tag: int = 0
    status: MessageStatus = MessageStatus.VALID


#: stable wire order of statuses inside MessageStore.status_codes
STATUS_BY_CODE = (MessageStatus.VALID, MessageStatus.FAULTY_LOCAL)
STATUS_CODES = {status: code for code, status in enumerate(STATUS_BY_CODE)}


class MessageStore:
    """Columnar storage of matched point-to-point messages.

    Six int64 columns plus one status byte per message; indexing and
    iteration materialize PtpMessage values on demand.  The views are
    snapshots — assigning to a view's fields does not write back, so
    status changes must go through set_status (replay does).
    """

    __slots__ = ("senders", "receivers", "send_begins", "recv_ends",
                 "sizes", "tags", "status_codes")

    def __init__(self) -> None:
        self.senders = array("q")
        self.receivers = array("q")
        self.send_begins = array("q")
        self.recv_ends = array("q")
        self.sizes = array("q")
        self.tags = array("q")
        self.status_codes = bytearray()

    def append_fields(self, sender: int, receiver: int, send_begin: int,
                      recv_end: int, size_bytes: int = 0, tag: int = 0,
                      status: MessageStatus = MessageStatus.VALID) -> None:
        self.senders.append(sender)
        self.receivers.append(receiver)
        self.send_begins.append(send_begin)
        self.recv_ends.append(recv_end)
        self.sizes.append(size_bytes)
        self.tags.append(tag)
        self.status_codes.append(STATUS_CODES[status])

    def append(self, message: PtpMessage) -> None:
        self.append_fields(message.sender, message.receiver,
                           message.send_begin, message.recv_end,
                           message.size_bytes, message.tag, message.status)

    def set_status(self, index: int, status: MessageStatus) -> None:
        self.status_codes[index] = STATUS_CODES[status]

    def status_at(self, index: int) -> MessageStatus:
        return STATUS_BY_CODE[self.status_codes[index]]

    def __len__(self) -> int:
        return len(self.senders)

    def __getitem__(self, index):
        n = len(self.senders)
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(n))]
        if index < 0:
            index += n
        if not 0 <= index < n:
            raise IndexError("message index out of range")
        return PtpMessage(sender=self.senders[index],
                          receiver=self.receivers[index],
                          send_begin=self.send_begins[index],
                          recv_end=self.recv_ends[index],
                          size_bytes=self.sizes[index],
                          tag=self.tags[index],
                          status=STATUS_BY_CODE[self.status_codes[index]])

    def __iter__(self) -> Iterator[PtpMessage]:
        for i in range(len(self.senders)):
            yield self[i]

    def __repr__(self) -> str:
        return f"MessageStore(messages={len(self)})"


@dataclass(slots=True)
class CollectiveOp:
    """One occurrence of a collective on a communicator.

    participants holds (rank, entry_time, exit_time) per member, in rank
    order.  occurrence_index counts collectives per communicator.
    """

    communicator_id: int
    occurrence_index: int
    participants: list[tuple[int, int, int]] = field(default_factory=list)

    def ranks(self) -> list[int]:
        return [p[0] for p in self.participants]


class CollectiveStore:
    """Columnar storage of collective occurrences.

    comm_ids and occ_indices hold one row per occurrence; participant
    triples live flattened behind part_offsets (row i owns the slice
    part_offsets[i]:part_offsets[i+1]).  part_region_idx optionally pins
    each participant to the region index it was grouped from (-1 when
    unknown), letting replay skip re-matching regions by timestamp.
    Indexing and iteration materialize CollectiveOp snapshots.
    """

    __slots__ = ("comm_ids", "occ_indices", "part_offsets", "part_ranks",
                 "part_entries", "part_exits", "part_region_idx")

    def __init__(self) -> None:
        self.comm_ids = array("q")
        self.occ_indices = array("q")
        self.part_offsets = array("q", [0])
        self.part_ranks = array("q")
        self.part_entries = array("q")
        self.part_exits = array("q")
        self.part_region_idx = array("q")

    def append_fields(self, communicator_id: int, occurrence_index: int,
                      participants, region_indices=None) -> None:
        self.comm_ids.append(communicator_id)
        self.occ_indices.append(occurrence_index)
        for j, (rank, entry, exit_) in enumerate(participants):
            self.part_ranks.append(rank)
            self.part_entries.append(entry)
            self.part_exits.append(exit_)
            self.part_region_idx.append(
                -1 if region_indices is None else region_indices[j])
        self.part_offsets.append(len(self.part_ranks))

    def append(self, op: CollectiveOp) -> None:
        self.append_fields(op.communicator_id, op.occurrence_index,
                           op.participants)

    def __len__(self) -> int:
        return len(self.comm_ids)

    def __getitem__(self, index):
        n = len(self.comm_ids)
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(n))]
        if index < 0:
            index += n
        if not 0 <= index < n:
            raise IndexError("collective index out of range")
        lo = self.part_offsets[index]
        hi = self.part_offsets[index + 1]
        return CollectiveOp(
            communicator_id=self.comm_ids[index],
            occurrence_index=self.occ_indices[index],
            participants=[(self.part_ranks[j], self.part_entries[j],
                           self.part_exits[j]) for j in range(lo, hi)])

    def __iter__(self) -> Iterator[CollectiveOp]:
        for i in range(len(self.comm_ids)):
            yield self[i]

    def __repr__(self) -> str:
        return f"CollectiveStore(collectives={len(self)})"


@dataclass(slots=True)
class CommunicatorDef:
    communicator_id: int
    members: list[int]


@dataclass(slots=True)
class AnomalyEntry:
    kind: AnomalyKind
    location: str
    detail: str = ""


class AnomalyLog:
    """Append-only record of everything suspicious seen along the way."""

    def __init__(self) -> None:
        self.entries: list[AnomalyEntry] = []
        self.counters: Counter[AnomalyKind] = Counter()

    def add(self, kind: AnomalyKind, location: str, detail: str = "") -> None:
        self.entries.append(AnomalyEntry(kind, location, detail))
        self.counters[kind] += 1

    def count(self, kind: AnomalyKind) -> int:
        return self.counters.get(kind, 0)

    @property
    def total(self) -> int:
        return len(self.entries)

    def extend(self, other: "AnomalyLog") -> None:
        for entry in other.entries:
            self.entries.append(entry)
            self.counters[entry.kind] += 1

    def consistent(self) -> bool:
        """Counters must agree with a recount of the entries."""
        return self.counters == Counter(e.kind for e in self.entries)

    def __repr__(self) -> str:
        parts = ", ".join(f"{k.value}={v}" for k, v in sorted(
            self.counters.items(), key=lambda kv: kv[0].value))
        return f"AnomalyLog({parts or 'clean'})"


@dataclass
class Trace:
    """A fully assembled trace, immutable in structure after construction.

    Replay may still flip PtpMessage.status on degradation; everything
    else is fixed.  regions is indexed by rank and each list is ordered
    by region_seq, which matches entry-time order.
    """

    meta: TraceMeta
    #: per rank, a RegionStore or any sequence of MpiRegion in entry order
    regions: list
    messages: list[PtpMessage] = field(default_factory=list)
    collectives: list[CollectiveOp] = field(default_factory=list)
    communicators: dict[int, CommunicatorDef] = field(default_factory=dict)
    #: (rank, state) -> total ns, kept only for the summary cross-check.
    state_time_ns: dict[tuple[int, int], int] = field(default_factory=dict)

    @classmethod
    def empty(cls, meta: TraceMeta) -> "Trace":
        return cls(meta=meta,
                   regions=[RegionStore(r) for r in range(meta.rank_count)])


def locate_region(regions: list[MpiRegion], t: int,
                  prefer_exit: bool = False) -> int | None:
    """Index of the region containing time t, or None.

    Consecutive regions may share a boundary and zero-length regions may
    stack at one timestamp, so several regions can contain t.  A receive
    completion (prefer_exit) resolves to the earliest of them: the region
    that ends at t.  A send origin resolves to the earliest region that
    begins at t, falling back to the last one containing it.
    """
    if not len(regions):
        return None
    if isinstance(regions, RegionStore):
        entries = regions.entry_times
        exits = regions.exit_times
    else:
        entries = [r.entry_time for r in regions]
        exits = [r.exit_time for r in regions]
    hi = bisect_right(entries, t) - 1
    if hi < 0:
        return None
    lo = bisect_left(exits, t)
    if lo > hi:
        return None
    if prefer_exit:
        return lo
    if entries[hi] == t:
        return max(lo, bisect_left(entries, t))
    return hi


@dataclass(slots=True)
class Violation:
    code: str
    location: str
    detail: str = ""


class ValidationReport:
    def __init__(self) -> None:
        self.violations: list[Violation] = []

    def add(self, code: str, location: str, detail: str = "") -> None:
        self.violations.append(Violation(code, location, detail))

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "trace valid"
        lines = [f"{v.code} at {v.location}: {v.detail}" for v in self.violations]
        return "\n".join(lines)


def validate_trace(trace: Trace) -> ValidationReport:
    """Check every structural invariant of the model; report, never raise."""
    report = ValidationReport()
    meta = trace.meta
    if meta.rank_count < 1:
        report.add("meta.rank_count", "header", f"rank_count={meta.rank_count}")
    if len(trace.regions) != meta.rank_count:
        report.add("meta.rank_count", "regions",
                   f"{len(trace.regions)} rank lists for {meta.rank_count} ranks")

    max_ts = 0
    for rank, regs in enumerate(trace.regions):
        if isinstance(regs, RegionStore):
            # seq and owner rank hold by construction; check times in bulk
            if not len(regs):
                continue
            ent = np.frombuffer(regs.entry_times, dtype=np.int64)
            ex = np.frombuffer(regs.exit_times, dtype=np.int64)
            for k in np.nonzero(ent > ex)[0]:
                report.add("region.negative", f"rank {rank} region {k}",
                           f"entry {ent[k]} > exit {ex[k]}")
            for k in np.nonzero(ent[1:] < ex[:-1])[0]:
                report.add("region.overlap", f"rank {rank} region {k + 1}",
                           f"entry {ent[k + 1]} < previous exit {ex[k]}")
            max_ts = max(max_ts, int(ex.max()))
            continue
        prev_exit = None
        for k, reg in enumerate(regs):
            where = f"rank {rank} region {k}"
            if reg.region_seq != k:
                report.add("region.seq", where, f"seq={reg.region_seq}")
            if reg.entry_time > reg.exit_time:
                report.add("region.negative", where,
                           f"entry {reg.entry_time} > exit {reg.exit_time}")
            if prev_exit is not None and reg.entry_time < prev_exit:
                report.add("region.overlap", where,
                           f"entry {reg.entry_time} < previous exit {prev_exit}")
            prev_exit = reg.exit_time
            max_ts = max(max_ts, reg.exit_time)

    max_ts = _validate_messages(trace, report, max_ts)

    for comm_id, comm in trace.communicators.items():
        where = f"communicator {comm_id}"
        if comm.communicator_id != comm_id:
            report.add("communicator.id", where, "key does not match definition")
        if not comm.members:
            report.add("communicator.members", where, "empty membership")
        if len(set(comm.members)) != len(comm.members):
            report.add("communicator.members", where, "duplicate members")
        if any(not (0 <= m < meta.rank_count) for m in comm.members):
            report.add("communicator.members", where, "member out of range")

    last_entry: dict[tuple[int, int], int] = {}
    colls = trace.collectives
    if isinstance(colls, CollectiveStore):
        # same checks as below, reading the columns directly
        members_of = {cid: set(c.members)
                      for cid, c in trace.communicators.items()}
        offsets = colls.part_offsets
        p_ranks = colls.part_ranks
        p_entries = colls.part_entries
        p_exits = colls.part_exits
        for i in range(len(colls)):
            cid = colls.comm_ids[i]
            lo = offsets[i]
            hi = offsets[i + 1]
            where = f"collective comm={cid} occ={colls.occ_indices[i]}"
            ranks = p_ranks[lo:hi].tolist()
            if len(set(ranks)) != len(ranks):
                report.add("collective.participants", where,
                           "duplicate participant rank")
            members = members_of.get(cid)
            if members is not None and set(ranks) != members:
                report.add("collective.membership", where,
                           f"participants {sorted(ranks)} != members "
                           f"{sorted(members)}")
            for j in range(lo, hi):
                key = (cid, p_ranks[j])
                entry = p_entries[j]
                prev = last_entry.get(key)
                if prev is not None and entry < prev:
                    report.add("collective.order", where,
                               f"rank {p_ranks[j]} occurrence entered at "
                               f"{entry} before {prev}")
                last_entry[key] = entry
                if p_exits[j] > max_ts:
                    max_ts = p_exits[j]
    else:
        for op in colls:
            where = f"collective comm={op.communicator_id} occ={op.occurrence_index}"
            ranks = op.ranks()
            if len(set(ranks)) != len(ranks):
                report.add("collective.participants", where, "duplicate participant rank")
            comm = trace.communicators.get(op.communicator_id)
            if comm is not None and set(ranks) != set(comm.members):
                report.add("collective.membership", where,
                           f"participants {sorted(ranks)} != members {sorted(comm.members)}")
            for rank, entry, exit_ in op.participants:
                key = (op.communicator_id, rank)
                prev = last_entry.get(key)
                if prev is not None and entry < prev:
                    report.add("collective.order", where,
                               f"rank {rank} occurrence entered at {entry} before {prev}")
                last_entry[key] = entry
                max_ts = max(max_ts, exit_)

    if meta.total_duration_ns < max_ts:
        report.add("meta.duration", "header",
                   f"total_duration {meta.total_duration_ns} < last timestamp {max_ts}")
    return report


def _validate_messages(trace: Trace, report: ValidationReport,
                       max_ts: int) -> int:
    """Message checks of validate_trace; returns the updated max timestamp.

    The containment rule is the one locate_region applies: a timestamp t
    lies in some region iff the earliest region ending at or after t has
    begun by t.  For columnar messages the rule is evaluated with bulk
    searchsorted passes per rank instead of one bisect pair per message.
    """
    meta = trace.meta
    msgs = trace.messages
    if not isinstance(msgs, MessageStore):
        for i, msg in enumerate(msgs):
            where = f"message {i}"
            if not (0 <= msg.sender < meta.rank_count
                    and 0 <= msg.receiver < meta.rank_count):
                report.add("message.rank_range", where,
                           f"sender={msg.sender} receiver={msg.receiver}")
                continue
            if msg.status is MessageStatus.VALID and msg.send_begin > msg.recv_end:
                report.add("message.reversed", where,
                           f"send {msg.send_begin} > recv {msg.recv_end} but status valid")
            if locate_region(trace.regions[msg.sender], msg.send_begin) is None:
                report.add("message.sender_region", where,
                           f"send_begin {msg.send_begin} outside any region of rank {msg.sender}")
            if locate_region(trace.regions[msg.receiver], msg.recv_end,
                             prefer_exit=True) is None:
                report.add("message.recv_region", where,
                           f"recv_end {msg.recv_end} outside any region of rank {msg.receiver}")
            max_ts = max(max_ts, msg.recv_end, msg.send_begin)
        return max_ts

    if not len(msgs):
        return max_ts
    snd = np.frombuffer(msgs.senders, dtype=np.int64)
    rcv = np.frombuffer(msgs.receivers, dtype=np.int64)
    sb = np.frombuffer(msgs.send_begins, dtype=np.int64)
    re_ = np.frombuffer(msgs.recv_ends, dtype=np.int64)
    st = np.frombuffer(msgs.status_codes, dtype=np.uint8)

    in_range = ((snd >= 0) & (snd < meta.rank_count)
                & (rcv >= 0) & (rcv < meta.rank_count))
    for i in np.nonzero(~in_range)[0]:
        report.add("message.rank_range", f"message {i}",
                   f"sender={snd[i]} receiver={rcv[i]}")
    for i in np.nonzero(in_range & (st == 0) & (sb > re_))[0]:
        report.add("message.reversed", f"message {i}",
                   f"send {sb[i]} > recv {re_[i]} but status valid")

    outside_send = np.zeros(len(snd), dtype=bool)
    outside_recv = np.zeros(len(snd), dtype=bool)
    for rank in range(meta.rank_count):
        regs = trace.regions[rank]
        if isinstance(regs, RegionStore):
            ent = np.frombuffer(regs.entry_times, dtype=np.int64)
            ex = np.frombuffer(regs.exit_times, dtype=np.int64)
        else:
            ent = np.asarray([g.entry_time for g in regs], dtype=np.int64)
            ex = np.asarray([g.exit_time for g in regs], dtype=np.int64)
        smask = in_range & (snd == rank)
        if smask.any():
            t = sb[smask]
            hi = np.searchsorted(ent, t, side="right") - 1
            lo = np.searchsorted(ex, t, side="left")
            outside_send[smask] = lo > hi
        rmask = in_range & (rcv == rank)
        if rmask.any():
            t = re_[rmask]
            hi = np.searchsorted(ent, t, side="right") - 1
            lo = np.searchsorted(ex, t, side="left")
            outside_recv[rmask] = lo > hi
    for i in np.nonzero(outside_send)[0]:
        report.add("message.sender_region", f"message {i}",
                   f"send_begin {sb[i]} outside any region of rank {snd[i]}")
    for i in np.nonzero(outside_recv)[0]:
        report.add("message.recv_region", f"message {i}",
                   f"recv_end {re_[i]} outside any region of rank {rcv[i]}")
    if in_range.any():
        max_ts = max(max_ts, int(sb[in_range].max()), int(re_[in_range].max()))
    return max_ts
