import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiersim.devices import Hss, PRESETS
from tiersim.features import (BinScheme, BinningConfig, ObservationVector,
                              bin_value, capacity_bin, extract,
                              observation_bits, observation_dim,
                              pack_observation, unpack_observation)
from tiersim.trace import Op, TraceRecord


def brute_force_bin(value, scheme, bins):
    """Independent oracle: find the bin by scanning the edge sequence.

    Edges for bin i are the smallest transformed values mapping to i under
    the stated rule; equivalent to evaluating the rule directly on a
    transformed scale and scanning instead of flooring.
    """
    if scheme.kind == "linear":
        t, t_max = value, scheme.max_value
    else:
        t, t_max = math.log2(value + 1), math.log2(scheme.max_value + 1)
    idx = 0
    while idx < bins - 1 and t >= (idx + 1) * t_max / bins:
        idx += 1
    return idx


def make_req(i, op, page, pages=1):
    return TraceRecord.make(i, op, page * 4096, pages * 4096)


def dual(fast_cap=8):
    return Hss([PRESETS["H"].with_capacity(fast_cap), PRESETS["M"]])


class TestBinValue:
    def test_zero(self):
        assert bin_value(0, BinScheme("linear", 100), 8) == 0

    @pytest.mark.parametrize("scheme", [BinScheme("linear", 100), BinScheme("log2", 100)])
    def test_clamp_at_max(self, scheme):
        assert bin_value(100, scheme, 8) == 7
        assert bin_value(5000, scheme, 8) == 7

    def test_log2_example(self):
        assert bin_value(7, BinScheme("log2", 63), 64) == 32

    def test_log2_full_enumeration_against_oracle(self):
        scheme = BinScheme("log2", 63)
        for v in range(0, 64):
            assert bin_value(v, scheme, 64) == brute_force_bin(v, scheme, 64)

    @given(st.integers(0, 10_000), st.integers(0, 10_000),
           st.sampled_from(["linear", "log2"]),
           st.integers(1, 5000), st.integers(2, 64))
    @settings(max_examples=150, deadline=None)
    def test_monotone(self, v1, v2, kind, max_value, bins):
        scheme = BinScheme(kind, max_value)
        lo, hi = sorted((v1, v2))
        assert bin_value(lo, scheme, bins) <= bin_value(hi, scheme, bins)

    @given(st.integers(0, 2000), st.sampled_from(["linear", "log2"]),
           st.integers(1, 1000), st.integers(2, 32))
    @settings(max_examples=150, deadline=None)
    def test_matches_edge_oracle(self, value, kind, max_value, bins):
        scheme = BinScheme(kind, max_value)
        assert bin_value(value, scheme, bins) == brute_force_bin(value, scheme, bins)


class TestCapacityBin:
    def test_empty_device_top_bin(self):
        assert capacity_bin(100, 100, 8) == 7

    def test_full_device_bottom_bin(self):
        assert capacity_bin(0, 100, 8) == 0

    @pytest.mark.parametrize("capacity", [2, 4, 10, 100, 626])
    def test_exactly_half_free(self, capacity):
        assert capacity_bin(capacity // 2, capacity, 8) == 3

    def test_unbounded_reports_top(self):
        assert capacity_bin(None, None, 8) == 7

    def test_half_free_edge_oracle(self):
        # scan the fraction edges i/(bins-1): free/capacity in [i/7, (i+1)/7) -> i
        capacity, bins = 1000, 8
        for free in range(capacity + 1):
            idx = 0
            while idx < bins - 1 and free * (bins - 1) >= (idx + 1) * capacity:
                idx += 1
            assert capacity_bin(free, capacity, bins) == idx

    @given(st.integers(1, 500), st.integers(0, 500))
    @settings(max_examples=100, deadline=None)
    def test_range(self, capacity, free):
        idx = capacity_bin(min(free, capacity), capacity, 8)
        assert 0 <= idx <= 7


class TestExtract:
    def test_first_touch_defaults(self):
        hss = dual(fast_cap=8)
        obs = extract(make_req(0, Op.READ, 5), hss.page_table, hss.devices[0],
                      BinningConfig(), 0)
        assert obs.size_t == 0
        assert obs.type_t == 0
        assert obs.intr_t == 63
        assert obs.cnt_t == 0
        assert obs.cap_t == 7
        assert obs.curr_t == 1

    def test_back_to_back_reuse(self):
        hss = dual(fast_cap=8)
        cfg = BinningConfig()
        hss.service(make_req(0, Op.READ, 5), 0, 0)
        obs = extract(make_req(1, Op.WRITE, 5), hss.page_table, hss.devices[0], cfg, 1)
        assert obs.type_t == 1
        assert obs.intr_t == 0
        assert obs.curr_t == 0
        assert obs.cnt_t == bin_value(1, cfg.cnt_scheme, cfg.cnt_bins)

    def test_half_free_cap_bin(self):
        hss = dual(fast_cap=8)
        for i in range(4):
            hss.service(make_req(i, Op.WRITE, i), 0, i)
        obs = extract(make_req(4, Op.READ, 99), hss.page_table, hss.devices[0],
                      BinningConfig(), 4)
        assert obs.cap_t == 3

    def test_interval_counts_requests_between(self):
        hss = dual(fast_cap=8)
        cfg = BinningConfig()
        hss.service(make_req(0, Op.READ, 5), 0, 0)
        hss.service(make_req(1, Op.READ, 6), 0, 1)
        hss.service(make_req(2, Op.READ, 7), 0, 2)
        obs = extract(make_req(3, Op.READ, 5), hss.page_table, hss.devices[0], cfg, 3)
        assert obs.intr_t == bin_value(2, cfg.intr_scheme, cfg.intr_bins)

    def test_normalized_in_unit_interval(self):
        hss = dual(fast_cap=8)
        cfg = BinningConfig()
        for i in range(20):
            req = make_req(i, Op.WRITE if i % 2 else Op.READ, (i * 3) % 7, 1 + i % 5)
            obs = extract(req, hss.page_table, hss.devices[0], cfg, i)
            vec = obs.normalized(cfg, 2)
            assert vec.shape == (6,)
            assert (vec >= 0).all() and (vec <= 1).all()
            hss.service(req, i % 2, i)

    def test_causality_no_future_dependence(self):
        # identical prefixes + different suffixes give identical observations
        def observations(suffix_page):
            hss = dual(fast_cap=8)
            cfg = BinningConfig()
            seen = []
            pages = [1, 2, 1, 3, suffix_page]
            for i, page in enumerate(pages):
                req = make_req(i, Op.READ, page)
                seen.append(extract(req, hss.page_table, hss.devices[0], cfg, i))
                hss.service(req, 0, i)
            return seen

        a = observations(50)
        b = observations(60)
        assert a[:4] == b[:4]

    def test_tri_device_observation(self):
        hss = Hss([PRESETS["H"].with_capacity(4), PRESETS["M"].with_capacity(8),
                   PRESETS["L"]])
        cfg = BinningConfig()
        obs = extract(make_req(0, Op.READ, 5), hss.page_table, hss.devices[:-1], cfg, 0)
        assert len(obs.caps) == 2
        assert obs.curr_t == 2
        assert observation_dim(3) == 7
        assert obs.normalized(cfg, 3).shape == (7,)


class TestPacking:
    def test_dual_observation_is_40_bits(self):
        assert observation_bits(1) == 40

    def test_round_trip(self):
        obs = ObservationVector(5, 1, 63, 17, (3,), 1)
        assert unpack_observation(pack_observation(obs), 1) == obs

    def test_tri_round_trip(self):
        obs = ObservationVector(7, 0, 12, 63, (3, 5), 2)
        assert unpack_observation(pack_observation(obs), 2) == obs

    def test_packed_fits_width(self):
        obs = ObservationVector(7, 1, 63, 63, (7,), 1)
        assert pack_observation(obs).bit_length() <= 40

    @given(st.integers(0, 7), st.integers(0, 1), st.integers(0, 63),
           st.integers(0, 63), st.integers(0, 7), st.integers(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_round_trip_property(self, s, t, i, c, cap, curr):
        obs = ObservationVector(s, t, i, c, (cap,), curr)
        assert unpack_observation(pack_observation(obs), 1) == obs
