"""Block I/O traces: MSRC-style CSV parsing, synthetic generators, workload stats.

A trace is an ordered sequence of page-granular requests. Timestamps are kept
as opaque monotonic integers; replay is request-clocked, so only their order
matters.
"""

from __future__ import annotations

import bisect
import enum
import random
from dataclasses import dataclass
from typing import IO, Iterator

DEFAULT_PAGE_SIZE = 4096


class TraceError(Exception):
    """Base class for trace parsing and validation failures."""


class MalformedLine(TraceError):
    """CSV line with wrong field count, non-numeric fields, or unknown op."""


class NegativeValue(TraceError):
    """Offset/size/timestamp outside its value domain."""


class EmptyWorkload(TraceError):
    """Statistics requested for a workload with no records."""


class InvalidParameter(TraceError):
    """Synthetic-trace parameters out of range."""


class Op(enum.Enum):
    READ = "Read"
    WRITE = "Write"


@dataclass(frozen=True)
class TraceRecord:
    """One block I/O request, page-aligned bookkeeping included.

    page_id/size_pages are derived from offset/size at a fixed page size:
    page_id = offset // page_size, size_pages = ceil(size / page_size).
    The request is attributed to pages [page_id, page_id + size_pages).
    """

    timestamp: int
    op: Op
    offset: int
    size: int
    page_id: int
    size_pages: int

    @classmethod
    def make(cls, timestamp: int, op: Op, offset: int, size: int,
             page_size: int = DEFAULT_PAGE_SIZE) -> "TraceRecord":
        if timestamp < 0 or offset < 0:
            raise NegativeValue(f"negative timestamp/offset: {timestamp}, {offset}")
        if size <= 0:
            raise NegativeValue(f"request size must be positive, got {size}")
        return cls(
            timestamp=timestamp,
            op=op,
            offset=offset,
            size=size,
            page_id=offset // page_size,
            size_pages=-(-size // page_size),
        )

    def pages(self) -> range:
        return range(self.page_id, self.page_id + self.size_pages)


@dataclass
class Workload:
    """An ordered trace plus the page size its records were derived with."""

    records: list[TraceRecord]
    page_size: int = DEFAULT_PAGE_SIZE

    def __post_init__(self) -> None:
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise InvalidParameter(f"page_size must be a power of two, got {self.page_size}")
        for prev, cur in zip(self.records, self.records[1:]):
            if cur.timestamp < prev.timestamp:
                raise TraceError("records are not sorted by timestamp")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> TraceRecord:
        return self.records[i]


@dataclass(frozen=True)
class WorkloadStats:
    write_fraction: float
    read_fraction: float
    avg_request_size_pages: float
    avg_access_count: float
    unique_pages: int

    @property
    def working_set_pages(self) -> int:
        return self.unique_pages


def parse_msrc_line(line: str, page_size: int = DEFAULT_PAGE_SIZE) -> TraceRecord:
    """Parse one MSRC CSV line: timestamp,hostname,disknum,type,offset,size,responsetime.

    hostname, disk number and response time are discarded; extra trailing
    fields are tolerated. The type field is matched case-insensitively.
    """
    fields = line.strip().split(",")
    if len(fields) < 7:
        raise MalformedLine(f"expected >=7 comma-separated fields, got {len(fields)}: {line!r}")
    ts_s, _host, _disk, type_s, offset_s, size_s = fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]
    try:
        timestamp = int(ts_s)
        offset = int(offset_s)
        size = int(size_s)
    except ValueError as exc:
        raise MalformedLine(f"non-numeric timestamp/offset/size in {line!r}") from exc
    op_token = type_s.strip().lower()
    if op_token == "read":
        op = Op.READ
    elif op_token == "write":
        op = Op.WRITE
    else:
        raise MalformedLine(f"unknown op token {type_s!r} in {line!r}")
    return TraceRecord.make(timestamp, op, offset, size, page_size)


def format_msrc_line(rec: TraceRecord, hostname: str = "synth", disknum: int = 0) -> str:
    return f"{rec.timestamp},{hostname},{disknum},{rec.op.value},{rec.offset},{rec.size},0"


def load_msrc(source: str | IO[str], page_size: int = DEFAULT_PAGE_SIZE) -> Workload:
    """Load a workload from a path or open text stream, skipping blank lines.

    Records are stably sorted by timestamp so the workload invariant holds
    even for traces merged from several sources.
    """
    if isinstance(source, str):
        with open(source, "r", encoding="utf-8", newline=None) as fh:
            return load_msrc(fh, page_size)
    records = []
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            records.append(parse_msrc_line(line, page_size))
        except TraceError as exc:
            raise type(exc)(f"line {lineno}: {exc}") from None
    records.sort(key=lambda r: r.timestamp)
    return Workload(records, page_size)


def dump_msrc(w: Workload, dest: str | IO[str]) -> None:
    if isinstance(dest, str):
        with open(dest, "w", encoding="utf-8") as fh:
            dump_msrc(w, fh)
            return
    for rec in w:
        dest.write(format_msrc_line(rec) + "\n")


def workload_stats(w: Workload) -> WorkloadStats:
    """Characterize a workload: op mix, request size, and page access counts.

    A page's access count goes up once per request touching it, no matter how
    many bytes of the page the request covers.
    """
    if len(w) == 0:
        raise EmptyWorkload("cannot compute stats of an empty workload")
    writes = 0
    total_size_pages = 0
    touches = 0
    counts: dict[int, int] = {}
    for rec in w:
        if rec.op is Op.WRITE:
            writes += 1
        total_size_pages += rec.size_pages
        touches += rec.size_pages
        for page in rec.pages():
            counts[page] = counts.get(page, 0) + 1
    n = len(w)
    write_fraction = writes / n
    return WorkloadStats(
        write_fraction=write_fraction,
        read_fraction=1.0 - write_fraction,
        avg_request_size_pages=total_size_pages / n,
        avg_access_count=touches / len(counts),
        unique_pages=len(counts),
    )


class SynthKind(enum.Enum):
    HOT_RANDOM = "HotRandom"
    COLD_SEQUENTIAL = "ColdSequential"
    MIXED = "Mixed"


def _zipf_cdf(n: int, exponent: float = 1.1) -> list[float]:
    weights = [1.0 / (i + 1) ** exponent for i in range(n)]
    total = sum(weights)
    cdf = []
    acc = 0.0
    for wgt in weights:
        acc += wgt / total
        cdf.append(acc)
    return cdf


def synth_trace(kind: SynthKind | str, n: int, pages: int, seed: int,
                page_size: int = DEFAULT_PAGE_SIZE) -> Workload:
    """Generate a deterministic synthetic workload.

    HotRandom: one-page requests, page ids Zipf-distributed over [0, pages)
    so low page ids form the hot set; ~30% writes.
    ColdSequential: writes sweeping [0, pages) exactly once, the pages split
    evenly across the n requests (requires n <= pages). With pages >= 32*n
    this yields the large sequential requests the name implies.
    Mixed: alternates hot one-page requests over the lower half of the page
    range with a cold sweep over the upper half.
    """
    if isinstance(kind, str):
        kind = SynthKind(kind)
    if n < 1 or pages < 1:
        raise InvalidParameter(f"n and pages must be >= 1, got n={n}, pages={pages}")
    rng = random.Random(seed)
    records: list[TraceRecord] = []

    def add(i: int, op: Op, page: int, n_pages: int) -> None:
        records.append(TraceRecord.make(i, op, page * page_size, n_pages * page_size, page_size))

    if kind is SynthKind.HOT_RANDOM:
        cdf = _zipf_cdf(pages)
        for i in range(n):
            page = bisect.bisect_left(cdf, rng.random())
            op = Op.WRITE if rng.random() < 0.3 else Op.READ
            add(i, op, page, 1)
    elif kind is SynthKind.COLD_SEQUENTIAL:
        if n > pages:
            raise InvalidParameter(
                f"ColdSequential touches each page once: need n <= pages, got n={n}, pages={pages}")
        for i in range(n):
            start = i * pages // n
            end = (i + 1) * pages // n
            add(i, Op.WRITE, start, end - start)
    elif kind is SynthKind.MIXED:
        hot_pages = max(1, pages // 2)
        cold_lo = hot_pages
        cold_span = max(1, pages - cold_lo)
        chunk = max(1, min(cold_span, 8))
        cdf = _zipf_cdf(hot_pages)
        cold_pos = 0
        for i in range(n):
            if i % 2 == 0:
                page = bisect.bisect_left(cdf, rng.random())
                op = Op.WRITE if rng.random() < 0.3 else Op.READ
                add(i, op, page, 1)
            else:
                start = cold_lo + cold_pos
                span = min(chunk, cold_lo + cold_span - start)
                add(i, Op.WRITE, start, span)
                cold_pos = (cold_pos + span) % cold_span
    else:  # pragma: no cover - enum is exhaustive
        raise InvalidParameter(f"unknown synthetic kind {kind!r}")
    return Workload(records, page_size)
