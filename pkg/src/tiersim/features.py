"""Per-request observation vector: binning, normalization, metadata packing.

Six features describe a request and the system state it meets: request size
and type, the page's access interval and access count, the remaining fast
capacity, and the page's current placement. Each feature is quantized into a
small number of bins (8/2/64/64/8/2 by default); the network consumes the
bins normalized to [0, 1].

For a tri-device system the vector grows by one remaining-capacity feature
per additional bounded tier and the placement feature gains a third value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .devices import DeviceState, PageTable
from .trace import Op, TraceRecord


@dataclass(frozen=True)
class BinScheme:
    """A binning curve: 'linear' or 'log2', saturating at max_value."""

    kind: str
    max_value: int

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "log2"):
            raise ValueError(f"unknown binning kind {self.kind!r}")
        if self.max_value <= 0:
            raise ValueError(f"scheme max must be > 0, got {self.max_value}")


def bin_value(value: int, scheme: BinScheme, bins: int) -> int:
    """Monotone bin index of a non-negative value.

    linear: min(bins-1, value*bins // max)
    log2:   min(bins-1, floor(log2(value+1) * bins / log2(max+1)))
    Values at or above max land in the top bin.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if value < 0:
        raise ValueError(f"value must be >= 0, got {value}")
    if scheme.kind == "linear":
        idx = value * bins // scheme.max_value
    else:
        idx = math.floor(math.log2(value + 1) * bins / math.log2(scheme.max_value + 1))
    return min(bins - 1, idx)


def capacity_bin(free_pages: Optional[int], capacity_pages: Optional[int], bins: int) -> int:
    """Bin the free fraction of a device onto 0..bins-1.

    The fraction scales by bins-1 so that a full device maps to 0, an empty
    one to the top bin, and exactly-half-free to floor((bins-1)/2). Unbounded
    devices always report the top bin.
    """
    if capacity_pages is None or free_pages is None:
        return bins - 1
    free = max(0, min(free_pages, capacity_pages))
    return min(bins - 1, free * (bins - 1) // capacity_pages)


@dataclass(frozen=True)
class BinningConfig:
    size_scheme: BinScheme = BinScheme("linear", 64)
    intr_scheme: BinScheme = BinScheme("log2", 1 << 20)
    cnt_scheme: BinScheme = BinScheme("log2", 1 << 16)
    size_bins: int = 8
    type_bins: int = 2
    intr_bins: int = 64
    cnt_bins: int = 64
    cap_bins: int = 8


@dataclass(frozen=True)
class ObservationVector:
    """Binned state features for one request.

    caps holds one remaining-capacity bin per bounded tier, fastest first; a
    two-device system has exactly one entry, exposed as cap_t.
    """

    size_t: int
    type_t: int
    intr_t: int
    cnt_t: int
    caps: tuple[int, ...]
    curr_t: int

    @property
    def cap_t(self) -> int:
        return self.caps[0]

    def normalized(self, cfg: BinningConfig, n_devices: int) -> np.ndarray:
        curr_span = max(1, n_devices - 1)
        parts = [
            self.size_t / (cfg.size_bins - 1),
            self.type_t / (cfg.type_bins - 1),
            self.intr_t / (cfg.intr_bins - 1),
            self.cnt_t / (cfg.cnt_bins - 1),
            *(c / (cfg.cap_bins - 1) for c in self.caps),
            self.curr_t / curr_span,
        ]
        return np.asarray(parts, dtype=np.float64)


def observation_dim(n_devices: int) -> int:
    """Input width of the placement network for an n-device system."""
    return 4 + (n_devices - 1) + 1


def extract(req: TraceRecord, pt: PageTable, fast: DeviceState | Sequence[DeviceState],
            cfg: BinningConfig, req_index: int,
            curr_default: Optional[int] = None) -> ObservationVector:
    """Build the observation for a request given state up to req_index - 1.

    The access interval counts the requests strictly between this one and the
    page's previous access, so a back-to-back re-reference bins to 0. First
    touches take the top interval bin, a zero count, and default to the
    slowest placement.
    """
    fast_devs = [fast] if isinstance(fast, DeviceState) else list(fast)
    n_devices = len(fast_devs) + 1
    if curr_default is None:
        curr_default = n_devices - 1

    meta = pt.get(req.page_id)
    if meta is None:
        intr_t = cfg.intr_bins - 1
        cnt_t = bin_value(0, cfg.cnt_scheme, cfg.cnt_bins)
        curr_t = curr_default
    else:
        gap = req_index - meta.last_access_req_index - 1
        intr_t = bin_value(max(0, gap), cfg.intr_scheme, cfg.intr_bins)
        cnt_t = bin_value(meta.access_count, cfg.cnt_scheme, cfg.cnt_bins)
        curr_t = meta.device_index

    caps = tuple(
        capacity_bin(dev.free_pages, dev.spec.capacity_pages, cfg.cap_bins)
        for dev in fast_devs
    )
    return ObservationVector(
        size_t=bin_value(req.size_pages, cfg.size_scheme, cfg.size_bins),
        type_t=0 if req.op is Op.READ else 1,
        intr_t=intr_t,
        cnt_t=cnt_t,
        caps=caps,
        curr_t=curr_t,
    )


# Serialization widths (bits) for the metadata table: the five per-page
# features pack into 32 bits and each capacity counter adds 8 more, so a
# two-device observation is exactly 40 bits.
_SIZE_BITS = 8
_TYPE_BITS = 4
_INTR_BITS = 8
_CNT_BITS = 8
_CAP_BITS = 8
_CURR_BITS = 4


def observation_bits(n_caps: int = 1) -> int:
    return _SIZE_BITS + _TYPE_BITS + _INTR_BITS + _CNT_BITS + n_caps * _CAP_BITS + _CURR_BITS


def pack_observation(obs: ObservationVector) -> int:
    """Pack an observation into its fixed-width integer representation."""
    fields = [
        (obs.size_t, _SIZE_BITS),
        (obs.type_t, _TYPE_BITS),
        (obs.intr_t, _INTR_BITS),
        (obs.cnt_t, _CNT_BITS),
        *((c, _CAP_BITS) for c in obs.caps),
        (obs.curr_t, _CURR_BITS),
    ]
    packed = 0
    for value, width in fields:
        if not 0 <= value < (1 << width):
            raise ValueError(f"field value {value} does not fit in {width} bits")
        packed = (packed << width) | value
    return packed


def unpack_observation(packed: int, n_caps: int = 1) -> ObservationVector:
    widths = [_SIZE_BITS, _TYPE_BITS, _INTR_BITS, _CNT_BITS] + [_CAP_BITS] * n_caps + [_CURR_BITS]
    values = []
    for width in reversed(widths):
        values.append(packed & ((1 << width) - 1))
        packed >>= width
    values.reverse()
    size_t, type_t, intr_t, cnt_t = values[:4]
    caps = tuple(values[4:4 + n_caps])
    return ObservationVector(size_t, type_t, intr_t, cnt_t, caps, values[-1])
