"""Hybrid storage model: device latency, page residency, placement, eviction.

Devices are ordered fastest-first. Every referenced logical page resides on
exactly one device; capacity pressure on device i evicts victims one level
down (i -> i+1), cascading until everything fits. The slowest device is
normally unbounded, which guarantees the chain terminates.

The latency model is base + size/bandwidth with no queueing: the replay is
closed-loop and serves requests one at a time in trace order.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .trace import Op, TraceRecord, WorkloadStats


class SimError(Exception):
    """Base class for storage-model errors."""


class UnknownDevice(SimError):
    """Placement targeted a device index outside the configured HSS."""


class NoCapacityAnywhere(SimError):
    """No device in the chain can hold the data being placed or evicted."""


class InvalidFraction(SimError):
    """Capacity fraction outside (0, 1]."""


@dataclass(frozen=True)
class DeviceSpec:
    """Latency/bandwidth/capacity parameters of one storage device.

    Bandwidths are in MB/s (1 MB = 1e6 bytes), which conveniently equals
    bytes per microsecond. capacity_pages=None means unbounded.
    """

    name: str
    read_base_us: float
    write_base_us: float
    read_bw_mbps: float
    write_bw_mbps: float
    capacity_pages: Optional[int] = None

    def __post_init__(self) -> None:
        if self.read_base_us < 0 or self.write_base_us < 0:
            raise SimError(f"{self.name}: base latencies must be >= 0")
        if self.read_bw_mbps <= 0 or self.write_bw_mbps <= 0:
            raise SimError(f"{self.name}: bandwidths must be > 0")
        if self.capacity_pages is not None and self.capacity_pages < 1:
            raise SimError(f"{self.name}: bounded capacity must be >= 1 page")

    def with_capacity(self, capacity_pages: Optional[int]) -> "DeviceSpec":
        return DeviceSpec(self.name, self.read_base_us, self.write_base_us,
                          self.read_bw_mbps, self.write_bw_mbps, capacity_pages)


# Bandwidths follow the evaluated devices; base latencies are artifact
# parameters (configurable) chosen to keep the fast/slow ordering pointwise.
PRESETS: dict[str, DeviceSpec] = {
    "H": DeviceSpec("H", 10.0, 10.0, 2400.0, 2000.0),
    "M": DeviceSpec("M", 80.0, 90.0, 550.0, 510.0),
    "L": DeviceSpec("L", 4000.0, 4500.0, 210.0, 210.0),
    "L_SSD": DeviceSpec("L_SSD", 100.0, 110.0, 520.0, 450.0),
}


def device_service_us(spec: DeviceSpec, op: Op, size_bytes: int) -> float:
    """Service time of one transfer: base latency plus size over bandwidth."""
    if size_bytes < 1:
        raise SimError(f"size_bytes must be >= 1, got {size_bytes}")
    if op is Op.READ:
        return spec.read_base_us + size_bytes / spec.read_bw_mbps
    return spec.write_base_us + size_bytes / spec.write_bw_mbps


@dataclass
class PageMeta:
    device_index: int
    access_count: int
    last_access_req_index: int


class PageTable:
    """page_id -> (device, access count, last access) for every page seen."""

    def __init__(self) -> None:
        self.entries: dict[int, PageMeta] = {}

    def get(self, page_id: int) -> Optional[PageMeta]:
        return self.entries.get(page_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, page_id: int) -> bool:
        return page_id in self.entries


@dataclass
class DeviceState:
    """Live residency of one device.

    `resident` is an insertion-ordered dict used as an LRU queue: touching a
    page moves it to the back, so the front is always the least recently used
    resident page.
    """

    spec: DeviceSpec
    resident: dict[int, None] = field(default_factory=dict)

    @property
    def bounded(self) -> bool:
        return self.spec.capacity_pages is not None

    @property
    def free_pages(self) -> Optional[int]:
        if self.spec.capacity_pages is None:
            return None
        return self.spec.capacity_pages - len(self.resident)

    def touch(self, page_id: int) -> None:
        if page_id in self.resident:
            del self.resident[page_id]
        self.resident[page_id] = None

    def remove(self, page_id: int) -> None:
        del self.resident[page_id]


@dataclass(frozen=True)
class ServiceOutcome:
    """Cost accounting of one placed request.

    latency_us is the request service time including any migration of the
    request's own pages; eviction_latency_us is the background time spent
    moving capacity victims down the chain.
    """

    latency_us: float
    eviction_occurred: bool
    eviction_latency_us: float
    evicted_pages: int
    promoted: bool


class LruVictims:
    """Evict the least recently used resident page (by last access order)."""

    def select(self, dev: DeviceState, pt: PageTable, protected: set[int],
               req_index: int) -> int:
        for page in dev.resident:
            if page not in protected:
                return page
        raise NoCapacityAnywhere(
            f"device {dev.spec.name} holds only pages of the current request")


class BeladyVictims:
    """Evict the resident page whose next reference is furthest in the future.

    Requires the page -> sorted request positions map of the trace being
    replayed; used by the oracle baseline only.
    """

    def __init__(self, positions: dict[int, list[int]]) -> None:
        self.positions = positions

    def _next_use(self, page: int, req_index: int) -> int:
        pos = self.positions.get(page)
        if not pos:
            return 1 << 62
        i = bisect.bisect_right(pos, req_index)
        return pos[i] if i < len(pos) else 1 << 62

    def select(self, dev: DeviceState, pt: PageTable, protected: set[int],
               req_index: int) -> int:
        best_page = -1
        best_use = -1
        for page in dev.resident:
            if page in protected:
                continue
            use = self._next_use(page, req_index)
            if use > best_use:
                best_use = use
                best_page = page
        if best_page < 0:
            raise NoCapacityAnywhere(
                f"device {dev.spec.name} holds only pages of the current request")
        return best_page


VictimPolicy = LruVictims | BeladyVictims


def _evict_one(devices: Sequence[DeviceState], pt: PageTable, level: int,
               protected: set[int], victim_policy: VictimPolicy,
               req_index: int, page_size: int) -> tuple[float, int]:
    """Move one victim from `level` to `level + 1`, cascading if needed.

    Returns (latency_us, pages_moved) accumulated over the cascade.
    """
    if level + 1 >= len(devices):
        raise NoCapacityAnywhere("slowest device is full; nowhere to evict")
    src, dst = devices[level], devices[level + 1]
    victim = victim_policy.select(src, pt, protected, req_index)
    latency = 0.0
    moved = 0
    if dst.bounded and dst.free_pages == 0:
        sub_latency, sub_moved = _evict_one(
            devices, pt, level + 1, protected, victim_policy, req_index, page_size)
        latency += sub_latency
        moved += sub_moved
    src.remove(victim)
    dst.touch(victim)
    pt.entries[victim].device_index = level + 1
    latency += device_service_us(src.spec, Op.READ, page_size)
    latency += device_service_us(dst.spec, Op.WRITE, page_size)
    return latency, moved + 1


def apply_placement(pt: PageTable, devices: Sequence[DeviceState], req: TraceRecord,
                    target_device: int, victim_policy: VictimPolicy,
                    req_index: int, page_size: int = 4096) -> ServiceOutcome:
    """Serve one request, placing all of its pages on the target device.

    Request pages already resident elsewhere are migrated (read from their
    current device + write to the target, charged into latency_us); pages
    never seen before materialize on the target for free. If the target lacks
    free space, victims are evicted one level down until the request fits. A
    request bigger than a bounded device falls through to the next level
    that can hold it.
    """
    if not 0 <= target_device < len(devices):
        raise UnknownDevice(f"device index {target_device} out of range")

    while (devices[target_device].spec.capacity_pages is not None
           and req.size_pages > devices[target_device].spec.capacity_pages):
        target_device += 1
        if target_device >= len(devices):
            raise NoCapacityAnywhere(
                f"request of {req.size_pages} pages exceeds every remaining device")

    target = devices[target_device]
    pages = list(req.pages())
    protected = set(pages)

    latency = device_service_us(target.spec, req.op, req.size)
    promoted = False

    # Detach request pages resident on other devices first so their slots
    # free up before we measure eviction pressure on the target.
    incoming = 0
    for page in pages:
        meta = pt.get(page)
        if meta is None:
            incoming += 1
        elif meta.device_index != target_device:
            src = devices[meta.device_index]
            latency += device_service_us(src.spec, Op.READ, page_size)
            latency += device_service_us(target.spec, Op.WRITE, page_size)
            src.remove(page)
            if target_device < meta.device_index:
                promoted = True
            incoming += 1

    eviction_latency = 0.0
    evicted = 0
    if target.bounded:
        while target.free_pages < incoming:
            ev_lat, ev_pages = _evict_one(
                devices, pt, target_device, protected, victim_policy, req_index, page_size)
            eviction_latency += ev_lat
            evicted += ev_pages

    for page in pages:
        meta = pt.get(page)
        if meta is None:
            pt.entries[page] = PageMeta(target_device, 1, req_index)
        else:
            meta.device_index = target_device
            meta.access_count += 1
            meta.last_access_req_index = req_index
        target.touch(page)

    return ServiceOutcome(
        latency_us=latency,
        eviction_occurred=evicted > 0,
        eviction_latency_us=eviction_latency,
        evicted_pages=evicted,
        promoted=promoted,
    )


def fast_capacity_for(stats: WorkloadStats, fraction: float) -> int:
    """Bounded fast capacity as a fraction of the working set, at least 1 page."""
    if not 0 < fraction <= 1:
        raise InvalidFraction(f"fraction must be in (0, 1], got {fraction}")
    return max(1, math.floor(fraction * stats.working_set_pages))


class Hss:
    """One hybrid storage system instance: devices plus the shared page table."""

    def __init__(self, specs: Sequence[DeviceSpec], page_size: int = 4096,
                 jitter_sigma: float = 0.0, jitter_rng=None) -> None:
        if not 1 <= len(specs) <= 3:
            raise SimError(f"HSS supports 1-3 devices, got {len(specs)}")
        self.devices = [DeviceState(spec) for spec in specs]
        self.page_table = PageTable()
        self.page_size = page_size
        self.jitter_sigma = jitter_sigma
        self.jitter_rng = jitter_rng
        if jitter_sigma > 0 and jitter_rng is None:
            raise SimError("jitter enabled but no rng supplied")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def _jitter(self, latency: float) -> float:
        if self.jitter_sigma <= 0 or latency == 0:
            return latency
        factor = 1.0 + self.jitter_sigma * self.jitter_rng.gauss(0.0, 1.0)
        return latency * max(0.05, factor)

    def service(self, req: TraceRecord, target_device: int, req_index: int,
                victim_policy: Optional[VictimPolicy] = None) -> ServiceOutcome:
        outcome = apply_placement(
            self.page_table, self.devices, req, target_device,
            victim_policy or LruVictims(), req_index, self.page_size)
        if self.jitter_sigma > 0:
            outcome = ServiceOutcome(
                latency_us=self._jitter(outcome.latency_us),
                eviction_occurred=outcome.eviction_occurred,
                eviction_latency_us=self._jitter(outcome.eviction_latency_us),
                evicted_pages=outcome.evicted_pages,
                promoted=outcome.promoted,
            )
        return outcome

    def migrate(self, page_id: int, to_device: int) -> float:
        """Move one resident page (policy-driven, e.g. an epoch demotion).

        Returns the migration latency; does not touch access metadata.
        """
        meta = self.page_table.get(page_id)
        if meta is None:
            raise SimError(f"page {page_id} is not mapped")
        if not 0 <= to_device < len(self.devices):
            raise UnknownDevice(f"device index {to_device} out of range")
        if meta.device_index == to_device:
            return 0.0
        src = self.devices[meta.device_index]
        dst = self.devices[to_device]
        if dst.bounded and dst.free_pages == 0:
            raise NoCapacityAnywhere(f"device {dst.spec.name} is full")
        latency = device_service_us(src.spec, Op.READ, self.page_size)
        latency += device_service_us(dst.spec, Op.WRITE, self.page_size)
        src.remove(page_id)
        dst.touch(page_id)
        meta.device_index = to_device
        return self._jitter(latency)

    def check_residency(self) -> None:
        """Assert the residency-conservation invariants; used by tests."""
        seen: dict[int, int] = {}
        for idx, dev in enumerate(self.devices):
            if dev.bounded and dev.free_pages < 0:
                raise SimError(f"device {dev.spec.name} has negative free pages")
            for page in dev.resident:
                if page in seen:
                    raise SimError(f"page {page} resident on devices {seen[page]} and {idx}")
                seen[page] = idx
        if len(seen) != len(self.page_table):
            raise SimError("page table and device residency disagree")
        for page, meta in self.page_table.entries.items():
            if seen.get(page) != meta.device_index:
                raise SimError(f"page {page} mapped to {meta.device_index} but resident on {seen.get(page)}")
