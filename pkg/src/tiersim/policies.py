"""Placement policies: the two extremes, future-knowledge oracle, heuristics,
and the wrapper that drives the learning agent.

All policies share one interface: decide() names the target device for a
request, observe() sees the service outcome, and background() performs any
post-request maintenance (epoch demotions) and returns its latency cost.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

from .agent import SibylAgent
from .devices import (BeladyVictims, Hss, LruVictims, NoCapacityAnywhere,
                      ServiceOutcome, VictimPolicy, device_service_us)
from .trace import Op, TraceRecord, Workload


@dataclass(frozen=True)
class PolicyDecision:
    target_device: int
    rationale_tag: str


@dataclass(frozen=True)
class MigrationEvent:
    page_id: int
    from_device: int
    to_device: int


@dataclass(frozen=True)
class HpsConfig:
    epoch_requests: int = 1000
    hot_threshold: int = 2

    def __post_init__(self) -> None:
        if self.epoch_requests < 1:
            raise ValueError("epoch_requests must be >= 1")


@dataclass(frozen=True)
class CdeConfig:
    random_size_threshold_pages: int = 8
    hot_threshold: int = 2

    def __post_init__(self) -> None:
        if self.random_size_threshold_pages < 1 or self.hot_threshold < 1:
            raise ValueError("CDE thresholds must be >= 1")


@dataclass(frozen=True)
class TriConfig:
    hot_threshold_hi: int = 4
    hot_threshold_lo: int = 2


class Policy:
    """Base: a constant decision and no maintenance."""

    name = "policy"

    def victim_policy(self) -> VictimPolicy:
        return LruVictims()

    def decide(self, req: TraceRecord, req_index: int, hss: Hss) -> PolicyDecision:
        raise NotImplementedError

    def observe(self, req: TraceRecord, req_index: int, outcome: ServiceOutcome,
                hss: Hss) -> None:
        pass

    def background(self, req_index: int, hss: Hss) -> float:
        return 0.0

    def finalize(self) -> None:
        pass


class FastOnly(Policy):
    """Everything on the fast device; run it with unbounded fast capacity."""

    name = "fast_only"

    def decide(self, req, req_index, hss):
        return PolicyDecision(0, "fast_only")


class SlowOnly(Policy):
    """Everything on the slowest device."""

    name = "slow_only"

    def decide(self, req, req_index, hss):
        return PolicyDecision(hss.n_devices - 1, "slow_only")


class AlwaysDevice(Policy):
    """Constant target on a capacity-constrained system; mainly a test probe."""

    name = "always_device"

    def __init__(self, device_index: int) -> None:
        self.device_index = device_index

    def decide(self, req, req_index, hss):
        return PolicyDecision(self.device_index, f"always_{self.device_index}")


class Cde(Policy):
    """Hot or random (small) writes go fast; cold sequential writes go slow.

    Reads never migrate: they are served from wherever the page lives.
    """

    name = "cde"

    def __init__(self, cfg: Optional[CdeConfig] = None) -> None:
        self.cfg = cfg or CdeConfig()

    def decide(self, req, req_index, hss):
        meta = hss.page_table.get(req.page_id)
        if req.op is Op.READ:
            current = meta.device_index if meta else hss.n_devices - 1
            return PolicyDecision(current, "cde_read_stay")
        count = meta.access_count if meta else 0
        if count >= self.cfg.hot_threshold:
            return PolicyDecision(0, "cde_hot_write")
        if req.size_pages <= self.cfg.random_size_threshold_pages:
            return PolicyDecision(0, "cde_random_write")
        return PolicyDecision(hss.n_devices - 1, "cde_cold_seq_write")


class Hps(Policy):
    """Admit new pages to fast; demote epoch-cold fast pages periodically.

    Known pages stay where they are on access (no promotions), so the only
    movement HPS ever causes is the end-of-epoch demotion sweep.
    """

    name = "hps"

    def __init__(self, cfg: Optional[HpsConfig] = None) -> None:
        self.cfg = cfg or HpsConfig()
        self.epoch_counts: dict[int, int] = {}
        self.migrations: list[MigrationEvent] = []

    def decide(self, req, req_index, hss):
        meta = hss.page_table.get(req.page_id)
        for page in req.pages():
            self.epoch_counts[page] = self.epoch_counts.get(page, 0) + 1
        if meta is None:
            return PolicyDecision(0, "hps_new_to_fast")
        return PolicyDecision(meta.device_index, "hps_stay")

    def epoch_migrate(self, hss: Hss) -> tuple[list[MigrationEvent], float]:
        """Demote fast pages whose epoch access count is below the threshold."""
        fast = hss.devices[0]
        slow_index = min(1, hss.n_devices - 1)
        victims = [page for page in fast.resident
                   if self.epoch_counts.get(page, 0) < self.cfg.hot_threshold]
        events = []
        cost = 0.0
        for page in victims:
            dst = hss.devices[slow_index]
            if dst.bounded and dst.free_pages == 0:
                break
            cost += hss.migrate(page, slow_index)
            events.append(MigrationEvent(page, 0, slow_index))
        self.epoch_counts = {}
        self.migrations.extend(events)
        return events, cost

    def background(self, req_index, hss):
        if (req_index + 1) % self.cfg.epoch_requests == 0:
            _, cost = self.epoch_migrate(hss)
            return cost
        return 0.0


class TriHeuristic(Policy):
    """Three-way split by access count: hot to H, warm to M, the rest to L."""

    name = "tri_heuristic"

    def __init__(self, cfg: Optional[TriConfig] = None) -> None:
        self.cfg = cfg or TriConfig()

    def decide(self, req, req_index, hss):
        meta = hss.page_table.get(req.page_id)
        count = meta.access_count if meta else 0
        if count >= self.cfg.hot_threshold_hi:
            return PolicyDecision(0, "tri_hot")
        if count >= self.cfg.hot_threshold_lo:
            return PolicyDecision(min(1, hss.n_devices - 1), "tri_warm")
        return PolicyDecision(hss.n_devices - 1, "tri_cold")


class OraclePolicy(Policy):
    """Placement with complete knowledge of the remaining trace.

    Fast-resident pages are served in place (moving them out is never free).
    A page not on fast is admitted when it will be re-used, its future fast
    hits pay for the migration/eviction work its admission triggers, and,
    under capacity pressure, it comes back sooner than the Belady victim it
    would displace (fewer than a fast-capacity's worth of resident pages
    intervene before its reuse). An explicit horizon adds the stricter gate
    that at most `horizon` distinct pages of any kind may intervene.
    Evictions always pick the furthest-future resident.
    """

    name = "oracle"

    def __init__(self, workload: Workload,
                 horizon: Optional[int] = None) -> None:
        self.workload = workload
        self.horizon = horizon
        self.positions: dict[int, list[int]] = {}
        for i, rec in enumerate(workload):
            for page in rec.pages():
                self.positions.setdefault(page, []).append(i)
        self._belady = BeladyVictims(self.positions)
        self._plan: Optional[list[int]] = None
        self._plan_built = False

    def victim_policy(self) -> VictimPolicy:
        return self._belady

    def _build_plan(self, hss: Hss) -> Optional[list[int]]:
        """Exact placement plan for the single-slot dual-device case.

        With one fast page the optimal schedule is a shortest path over
        (request, fast resident) states, so "complete knowledge" can be
        honored exactly instead of greedily. Costs mirror the placement
        engine: promotions, evictions, and serving in place.
        """
        if (self.horizon is not None or hss.n_devices != 2
                or hss.devices[0].spec.capacity_pages != 1
                or hss.devices[0].resident or hss.page_table.entries
                or any(r.size_pages > 1 for r in self.workload)):
            return None
        fast, slow = hss.devices[0].spec, hss.devices[1].spec
        ps = hss.page_size
        promo = (device_service_us(slow, Op.READ, ps)
                 + device_service_us(fast, Op.WRITE, ps))
        evict = (device_service_us(fast, Op.READ, ps)
                 + device_service_us(slow, Op.WRITE, ps))

        NONE = -1
        states: dict[int, tuple[float, tuple]] = {NONE: (0.0, ())}
        seen: set[int] = set()
        for req in self.workload:
            page = req.page_id
            fast_serve = device_service_us(fast, req.op, req.size)
            slow_serve = device_service_us(slow, req.op, req.size)
            nxt: dict[int, tuple[float, tuple]] = {}

            def relax(state: int, cost: float, path: tuple, decision: int) -> None:
                cur = nxt.get(state)
                if cur is None or cost < cur[0]:
                    nxt[state] = (cost, path + (decision,))

            for resident, (cost, path) in states.items():
                # fast placement: serve there, promote if known elsewhere,
                # evict any different resident
                c = cost + fast_serve
                if page in seen and resident != page:
                    c += promo
                if resident not in (NONE, page):
                    c += evict
                relax(page, c, path, 0)
                # slow placement: a fast-resident page migrates out
                c = cost + slow_serve
                new_res = resident
                if resident == page:
                    c += evict
                    new_res = NONE
                relax(new_res, c, path, 1)
            states = nxt
            seen.add(page)
        _, best_path = min(states.values(), key=lambda entry: entry[0])
        return list(best_path)

    def _within_horizon(self, page: int, req_index: int, next_use: int) -> bool:
        distinct: set[int] = set()
        for j in range(req_index + 1, next_use):
            for p in self.workload[j].pages():
                if p != page:
                    distinct.add(p)
            if len(distinct) >= self.horizon:
                return False
        return True

    def decide(self, req, req_index, hss):
        if not self._plan_built:
            self._plan = self._build_plan(hss)
            self._plan_built = True
        if self._plan is not None:
            return PolicyDecision(self._plan[req_index], "oracle_plan")
        page = req.page_id
        slow = hss.n_devices - 1
        fast = hss.devices[0]
        meta = hss.page_table.get(page)
        if meta is not None and meta.device_index == 0:
            return PolicyDecision(0, "oracle_stay_fast")
        pos = self.positions.get(page, [])
        cut = bisect.bisect_right(pos, req_index)
        future_uses = len(pos) - cut
        if future_uses == 0:
            return PolicyDecision(slow, "oracle_no_reuse")
        next_use = pos[cut]
        if self.horizon is not None and not self._within_horizon(page, req_index, next_use):
            return PolicyDecision(slow, "oracle_reuse_beyond_horizon")

        # Admission economics: the upfront promotion and eviction transfers
        # must be repaid by the future fast hits.
        page_size = hss.page_size
        fast_spec = fast.spec
        slow_spec = hss.devices[slow].spec
        full = fast.free_pages is not None and fast.free_pages < req.size_pages
        upfront = 0.0
        if meta is not None:
            src = hss.devices[meta.device_index].spec
            upfront += req.size_pages * (device_service_us(src, Op.READ, page_size)
                                         + device_service_us(fast_spec, Op.WRITE, page_size))
        if full:
            upfront += req.size_pages * (device_service_us(fast_spec, Op.READ, page_size)
                                         + device_service_us(slow_spec, Op.WRITE, page_size))
        saving = (device_service_us(slow_spec, Op.READ, req.size)
                  - device_service_us(fast_spec, Op.READ, req.size))
        if saving <= 0 or future_uses * saving < upfront:
            return PolicyDecision(slow, "oracle_not_worth_moving")

        if not full:
            return PolicyDecision(0, "oracle_reuse_free_slot")
        try:
            victim = self._belady.select(fast, hss.page_table,
                                         set(req.pages()), req_index)
        except NoCapacityAnywhere:
            return PolicyDecision(slow, "oracle_no_victim")
        if next_use < self._belady._next_use(victim, req_index):
            return PolicyDecision(0, "oracle_beats_victim")
        return PolicyDecision(slow, "oracle_victim_stays")


class SibylPolicy(Policy):
    """Drives the learning agent through the shared policy interface."""

    name = "sibyl"

    def __init__(self, agent: SibylAgent) -> None:
        self.agent = agent

    def decide(self, req, req_index, hss):
        action = self.agent.decide(req, req_index, hss)
        return PolicyDecision(action, "sibyl")

    def observe(self, req, req_index, outcome, hss):
        self.agent.observe(outcome)

    def finalize(self):
        self.agent.finalize()


POLICY_NAMES = ("sibyl", "fast_only", "slow_only", "oracle", "cde", "hps",
                "tri_heuristic", "always_fast")
