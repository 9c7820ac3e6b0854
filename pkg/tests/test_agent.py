import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiersim.agent import (ACTION_BITS, AgentConfig, AtomSupport, BufferNotFull,
                           Experience, ExperienceBuffer, NonPositiveLatency,
                           REWARD_BITS, SibylAgent, default_support,
                           experience_bits, pack_experience,
                           project_distribution, reward_value, select_action,
                           train_step, unpack_experience)
from tiersim.devices import Hss, PRESETS, ServiceOutcome
from tiersim.features import BinningConfig, ObservationVector
from tiersim.nn import DenseLayer, Network
from tiersim.trace import Op, SynthKind, TraceRecord, synth_trace


def brute_force_project(probs, r, gamma, support):
    """Independent per-atom oracle: each target atom collects hat-function mass."""
    z = support.atoms
    dz = support.delta_z
    out = np.zeros(support.n_atoms)
    for j in range(support.n_atoms):
        tz = min(max(r + gamma * z[j], support.v_min), support.v_max)
        for m in range(support.n_atoms):
            w = max(0.0, 1.0 - abs(tz - z[m]) / dz)
            out[m] += probs[j] * w
    return out


def outcome(latency_us, evict_us=0.0, pages=0):
    return ServiceOutcome(latency_us, pages > 0, evict_us, pages, False)


def logits_net(logits):
    """Constant network: zero weights, biases = the requested logits."""
    n = len(logits)
    return Network([DenseLayer(np.zeros((n, 6)), np.asarray(logits, dtype=float), "identity")])


def obs_of(seed=0):
    rng = np.random.default_rng(seed)
    return ObservationVector(int(rng.integers(8)), int(rng.integers(2)),
                             int(rng.integers(64)), int(rng.integers(64)),
                             (int(rng.integers(8)),), int(rng.integers(2)))


class TestReward:
    def test_no_eviction(self):
        assert reward_value(outcome(2000.0)) == pytest.approx(0.5)

    def test_eviction_clamps_to_zero(self):
        assert reward_value(outcome(2000.0, evict_us=600_000.0, pages=3)) == 0.0

    def test_eviction_penalty(self):
        assert reward_value(outcome(2000.0, evict_us=100_000.0, pages=1)) == pytest.approx(0.4)

    def test_penalty_coefficient(self):
        r = reward_value(outcome(1000.0, evict_us=250_000.0, pages=1), r_p_coeff=0.002)
        assert r == pytest.approx(1.0 - 0.002 * 250.0)

    def test_nonpositive_latency(self):
        with pytest.raises(NonPositiveLatency):
            reward_value(outcome(0.0))

    @given(st.floats(1.0, 1e7), st.floats(0.0, 1e7))
    @settings(max_examples=100, deadline=None)
    def test_never_negative(self, lat, evict):
        assert reward_value(outcome(lat, evict, pages=1 if evict > 0 else 0)) >= 0.0


class TestAtomSupport:
    def test_atoms_evenly_spaced(self):
        sup = AtomSupport(0.0, 10.0, 51)
        assert sup.delta_z == pytest.approx(0.2)
        assert np.allclose(np.diff(sup.atoms), 0.2)
        assert sup.atoms[0] == 0.0 and sup.atoms[-1] == 10.0

    def test_validation(self):
        with pytest.raises(ValueError):
            AtomSupport(1.0, 1.0, 51)
        with pytest.raises(ValueError):
            AtomSupport(0.0, 1.0, 1)

    def test_default_support_from_fastest_device(self):
        # per-step reward cap is 1000 / (10 + 4096/2400) ~= 85.4
        sup = default_support([PRESETS["H"], PRESETS["M"]], gamma=0.0)
        assert sup.v_min == 0.0
        assert sup.v_max == 86.0

    def test_default_support_covers_discounted_returns(self):
        sup = default_support([PRESETS["H"], PRESETS["M"]], gamma=0.9)
        assert sup.v_max == pytest.approx(855.0)  # ceil(85.42 / 0.1)


class TestProjection:
    def test_delta_on_exact_atom(self):
        sup = AtomSupport(0.0, 10.0, 51)
        probs = np.full(51, 1 / 51)
        out = project_distribution(probs, rewards=4.0, gamma=0.0, support=sup)
        assert out[20] == pytest.approx(1.0)
        assert out.sum() == pytest.approx(1.0)

    def test_midpoint_splits_evenly(self):
        sup = AtomSupport(0.0, 10.0, 51)
        probs = np.full(51, 1 / 51)
        out = project_distribution(probs, rewards=4.1, gamma=0.0, support=sup)
        assert out[20] == pytest.approx(0.5)
        assert out[21] == pytest.approx(0.5)

    def test_clamp_at_vmax(self):
        sup = AtomSupport(0.0, 10.0, 51)
        probs = np.zeros(51)
        probs[-1] = 1.0
        out = project_distribution(probs, rewards=100.0, gamma=1.0, support=sup)
        assert out[-1] == pytest.approx(1.0)

    def test_against_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        sup = AtomSupport(0.0, 10.0, 51)
        for _ in range(100):
            probs = rng.dirichlet(np.ones(51))
            r = float(rng.uniform(-2, 12))
            gamma = float(rng.uniform(0, 1))
            fast = project_distribution(probs, r, gamma, sup)
            slow = brute_force_project(probs, r, gamma, sup)
            assert np.abs(fast - slow).max() < 1e-12
            assert abs(fast.sum() - 1.0) < 1e-12

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(7)
        sup = AtomSupport(-1.0, 5.0, 31)
        probs = rng.dirichlet(np.ones(31), size=8)
        rewards = rng.uniform(-2, 7, size=8)
        batch = project_distribution(probs, rewards, 0.9, sup)
        for i in range(8):
            single = project_distribution(probs[i], rewards[i], 0.9, sup)
            assert np.allclose(batch[i], single, atol=1e-15)

    @given(st.floats(-20, 20), st.floats(0, 1), st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_mass_conservation_property(self, r, gamma, seed):
        sup = AtomSupport(0.0, 10.0, 51)
        probs = np.random.default_rng(seed).dirichlet(np.ones(51))
        out = project_distribution(probs, r, gamma, sup)
        assert abs(out.sum() - 1.0) < 1e-12
        assert (out >= -1e-15).all()


class TestSelectAction:
    def test_full_exploration_uniform(self):
        sup = AtomSupport(0.0, 10.0, 11)
        net = logits_net(np.zeros(22))
        rng = np.random.default_rng(0)
        draws = 10_000
        counts = np.zeros(2)
        x = np.zeros(6)
        for _ in range(draws):
            counts[select_action(net, x, 1.0, rng, sup, 2)] += 1
        sigma = np.sqrt(draws * 0.5 * 0.5)
        assert abs(counts[0] - draws / 2) <= 3 * sigma

    def test_greedy_argmax_by_construction(self):
        sup = AtomSupport(0.0, 10.0, 11)
        logits = np.concatenate([
            np.r_[np.full(10, -20.0), 20.0],   # action 0 mass at v_max
            np.r_[20.0, np.full(10, -20.0)],   # action 1 mass at v_min
        ])
        net = logits_net(logits)
        action = select_action(net, np.zeros(6), 0.0, np.random.default_rng(0), sup, 2)
        assert action == 0

    def test_tie_breaks_low(self):
        sup = AtomSupport(0.0, 10.0, 11)
        net = logits_net(np.zeros(22))
        action = select_action(net, np.zeros(6), 0.0, np.random.default_rng(0), sup, 2)
        assert action == 0

    def test_shift_invariance(self):
        sup = AtomSupport(0.0, 10.0, 11)
        rng = np.random.default_rng(3)
        logits = rng.normal(size=22)
        a = select_action(logits_net(logits), np.zeros(6), 0.0,
                          np.random.default_rng(0), sup, 2)
        b = select_action(logits_net(logits + 57.0), np.zeros(6), 0.0,
                          np.random.default_rng(0), sup, 2)
        assert a == b

    def test_distributions_are_normalized(self):
        from tiersim.agent import _action_distributions

        rng = np.random.default_rng(5)
        logits = rng.normal(scale=30, size=(4, 102))
        probs = _action_distributions(logits, 2, 51)
        assert probs.shape == (4, 2, 51)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert (probs >= 0).all()


class TestExperiencePacking:
    def test_total_bits(self):
        assert experience_bits(1) == 100
        assert ACTION_BITS + REWARD_BITS == 20

    def test_packed_fits_100_bits(self):
        exp = Experience(obs_of(1), 1, 0.375, obs_of(2))
        assert pack_experience(exp).bit_length() <= 100

    def test_round_trip(self):
        exp = Experience(obs_of(3), 2, 0.25, obs_of(4))  # 0.25 is f16-exact
        again = unpack_experience(pack_experience(exp), 1)
        assert again == exp

    def test_reward_rounds_to_half_precision(self):
        exp = Experience(obs_of(5), 0, 0.1, obs_of(6))
        again = unpack_experience(pack_experience(exp), 1)
        assert again.reward == pytest.approx(0.1, abs=1e-3)
        assert again.reward == float(np.float16(0.1))


class TestExperienceBuffer:
    def test_ring_overwrites_oldest(self):
        buf = ExperienceBuffer(3)
        exps = [Experience(obs_of(i), 0, float(i), obs_of(i + 1)) for i in range(5)]
        for e in exps:
            buf.append(e)
        assert len(buf) == 3
        assert buf.filled
        rewards = sorted(e.reward for e in buf.entries)
        assert rewards == [2.0, 3.0, 4.0]

    def test_sample_reproducible(self):
        buf = ExperienceBuffer(8)
        for i in range(8):
            buf.append(Experience(obs_of(i), 0, float(i), obs_of(i)))
        a = [e.reward for e in buf.sample(16, np.random.default_rng(9))]
        b = [e.reward for e in buf.sample(16, np.random.default_rng(9))]
        assert a == b


def _filled_buffer(experiences):
    buf = ExperienceBuffer(len(experiences))
    for e in experiences:
        buf.append(e)
    return buf


def _train_cfg(**kw):
    defaults = dict(gamma=0.0, alpha=0.05, epsilon=0.0, batch_size=16,
                    batches_per_step=1, buffer_capacity=16, sync_period=16,
                    action_count=2, n_atoms=51, seed=0)
    defaults.update(kw)
    return AgentConfig(**defaults)


class TestTrainStep:
    def test_buffer_not_full(self):
        cfg = _train_cfg()
        sup = AtomSupport(0.0, 10.0, 51)
        net = Network.create((6, 20, 30, 102), np.random.default_rng(0))
        buf = ExperienceBuffer(16)
        buf.append(Experience(obs_of(0), 0, 1.0, obs_of(1)))
        with pytest.raises(BufferNotFull):
            train_step(net, net, buf, cfg, sup, np.random.default_rng(0),
                       BinningConfig(), 2)

    def test_identical_experiences_loss_decreases_to_floor(self):
        cfg = _train_cfg()
        sup = AtomSupport(0.0, 10.0, 51)
        obs = obs_of(1)
        buf = _filled_buffer([Experience(obs, 0, 4.0, obs)] * 16)
        rng = np.random.default_rng(0)
        train = Network.create((6, 20, 30, 102), np.random.default_rng(1))
        infer = Network.create((6, 20, 30, 102), np.random.default_rng(2))
        losses = [train_step(train, infer, buf, cfg, sup, rng, BinningConfig(), 2)
                  for _ in range(50)]
        diffs = np.diff(losses)
        assert (diffs <= 1e-9).all()
        assert losses[-1] < 0.5 * losses[0]
        # prediction concentrates on the target atom (4.0 -> atom 20)
        from tiersim.agent import _action_distributions

        probs = _action_distributions(train.forward(obs.normalized(BinningConfig(), 2)), 2, 51)
        assert probs[0].argmax() == 20

    def test_seeded_reproducibility(self):
        def run():
            cfg = _train_cfg(batches_per_step=4)
            sup = AtomSupport(0.0, 10.0, 51)
            rng = np.random.default_rng(11)
            exps = [Experience(obs_of(i), i % 2, float(i % 5), obs_of(i + 1))
                    for i in range(16)]
            buf = _filled_buffer(exps)
            train = Network.create((6, 20, 30, 102), np.random.default_rng(1))
            infer = Network.create((6, 20, 30, 102), np.random.default_rng(2))
            return [train_step(train, infer, buf, cfg, sup, rng, BinningConfig(), 2)
                    for _ in range(10)]

        assert run() == run()

    def test_zero_reward_gamma_zero_q_converges_to_zero(self):
        cfg = _train_cfg(alpha=0.1)
        sup = AtomSupport(0.0, 10.0, 51)
        exps = [Experience(obs_of(i), i % 2, 0.0, obs_of(i + 1)) for i in range(16)]
        buf = _filled_buffer(exps)
        rng = np.random.default_rng(3)
        train = Network.create((6, 20, 30, 102), np.random.default_rng(4))
        infer = Network.create((6, 20, 30, 102), np.random.default_rng(5))
        for _ in range(300):
            train_step(train, infer, buf, cfg, sup, rng, BinningConfig(), 2)
        from tiersim.agent import _action_distributions

        for e in exps[:4]:
            probs = _action_distributions(
                train.forward(e.obs.normalized(BinningConfig(), 2)), 2, 51)
            q = probs @ sup.atoms
            assert q[e.action] <= sup.delta_z


def _agent(n=2, **kw):
    cfg_kw = dict(buffer_capacity=10, sync_period=10, batch_size=4,
                  batches_per_step=1, epsilon=0.0, seed=5, alpha=1e-3)
    cfg_kw.update(kw)
    cfg = AgentConfig(**cfg_kw)
    sup = AtomSupport(0.0, 90.0, cfg.n_atoms)
    return SibylAgent(cfg, sup, BinningConfig(), n_devices=n)


def _mini_hss():
    return Hss([PRESETS["H"].with_capacity(16), PRESETS["M"]])


def _replay(agent, workload, hss):
    for i, req in enumerate(workload):
        agent.step(req, hss, i)


class TestAgentScheduling:
    def test_no_training_before_fill(self):
        agent = _agent()
        hss = _mini_hss()
        w = synth_trace(SynthKind.HOT_RANDOM, 10, 8, seed=1)
        _replay(agent, w, hss)
        assert agent.train_events == []

    def test_first_event_at_capacity_milestone(self):
        agent = _agent()
        hss = _mini_hss()
        w = synth_trace(SynthKind.HOT_RANDOM, 11, 8, seed=1)
        _replay(agent, w, hss)
        assert agent.train_events == [10]

    def test_every_sync_period_after_fill(self):
        agent = _agent()
        hss = _mini_hss()
        w = synth_trace(SynthKind.HOT_RANDOM, 35, 8, seed=1)
        _replay(agent, w, hss)
        assert agent.train_events == [10, 20, 30]
        assert len(agent.losses) == 3

    def test_learn_flag_disables_training(self):
        agent = _agent(learn=False)
        hss = _mini_hss()
        w = synth_trace(SynthKind.HOT_RANDOM, 40, 8, seed=1)
        _replay(agent, w, hss)
        assert agent.train_events == []

    def test_experience_uses_next_request_observation(self):
        agent = _agent(buffer_capacity=50, sync_period=50, learn=False)
        hss = _mini_hss()
        w = synth_trace(SynthKind.HOT_RANDOM, 20, 8, seed=2)
        from tiersim.features import extract

        observed = []
        for i, req in enumerate(w):
            observed.append(extract(req, hss.page_table, hss.devices[:-1],
                                    agent.feature_cfg, i))
            agent.step(req, hss, i)
        entries = agent.buffer.entries
        assert len(entries) == 19  # the final request's transition never completes
        for i, exp in enumerate(entries):
            assert exp.obs == observed[i]
            assert exp.next_obs == observed[i + 1]

    def test_frozen_agent_is_deterministic(self):
        def run():
            agent = _agent(learn=False, epsilon=0.0)
            hss = _mini_hss()
            w = synth_trace(SynthKind.MIXED, 60, 32, seed=9)
            actions = []
            for i, req in enumerate(w):
                a, _ = agent.step(req, hss, i)
                actions.append(a)
            return actions

        assert run() == run()


class TestAgentCheckpoint:
    def test_bit_exact_resume(self, tmp_path):
        w = synth_trace(SynthKind.HOT_RANDOM, 60, 8, seed=3)
        first, second = w.records[:30], w.records[30:]

        agent = _agent(epsilon=0.05)
        hss = _mini_hss()
        for i, req in enumerate(first):
            agent.step(req, hss, i)
        path = str(tmp_path / "agent.ckpt")
        agent.save(path)

        # continue the original
        import copy

        hss_a = copy.deepcopy(hss)
        actions_a = []
        for j, req in enumerate(second, start=30):
            a, _ = agent.step(req, hss_a, j)
            actions_a.append(a)

        # resume from the checkpoint
        resumed = SibylAgent.load(path)
        hss_b = copy.deepcopy(hss)
        actions_b = []
        for j, req in enumerate(second, start=30):
            a, _ = resumed.step(req, hss_b, j)
            actions_b.append(a)

        assert actions_a == actions_b
        assert agent.buffer.total_added == resumed.buffer.total_added
        x = np.linspace(0, 1, agent.inference_net.input_dim)
        assert np.array_equal(agent.inference_net.forward(x),
                              resumed.inference_net.forward(x))
