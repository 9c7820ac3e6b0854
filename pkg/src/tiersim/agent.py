"""Online distributional-RL placement agent.

Per request the agent observes the binned feature vector, epsilon-greedily
picks a target device from a categorical Q-network (51 atoms per action),
collects the inverse-latency reward with its eviction penalty, and stores the
transition in a 1000-entry replay ring. Every 1000 stored transitions (once
the ring has first filled) it runs 8 batches of SGD on the training network
and copies the weights to the inference network that serves decisions.
"""

from __future__ import annotations

import base64
import io
import json
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .devices import DeviceSpec, Hss, ServiceOutcome, device_service_us
from .features import (BinningConfig, ObservationVector, extract,
                       observation_bits, observation_dim, pack_observation,
                       unpack_observation)
from .nn import Network, copy_weights
from .trace import Op, TraceRecord


class NonPositiveLatency(ValueError):
    pass


class BufferNotFull(RuntimeError):
    pass


@dataclass(frozen=True)
class AtomSupport:
    """Fixed categorical support z_i = v_min + i * delta_z."""

    v_min: float
    v_max: float
    n_atoms: int = 51

    def __post_init__(self) -> None:
        if not self.v_min < self.v_max:
            raise ValueError(f"need v_min < v_max, got [{self.v_min}, {self.v_max}]")
        if self.n_atoms < 2:
            raise ValueError(f"need at least 2 atoms, got {self.n_atoms}")

    @property
    def delta_z(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + self.delta_z * np.arange(self.n_atoms)


def default_support(specs: Sequence[DeviceSpec], page_size: int = 4096,
                    n_atoms: int = 51, gamma: float = 0.9) -> AtomSupport:
    """Support [0, ceil(max discounted return)].

    The fastest one-page request bounds the per-step reward at 1/L; the
    distributional network estimates returns, so the top atom must cover
    r_max/(1-gamma) or every action's mass clips to v_max and the greedy
    ordering degenerates.
    """
    fastest = specs[0]
    best_us = min(device_service_us(fastest, Op.READ, page_size),
                  device_service_us(fastest, Op.WRITE, page_size))
    r_max = 1000.0 / best_us
    v_max = float(math.ceil(r_max / max(0.01, 1.0 - gamma)))
    return AtomSupport(0.0, v_max, n_atoms)


def reward_value(outcome: ServiceOutcome, r_p_coeff: float = 0.001) -> float:
    """Inverse request latency (1/ms), minus the eviction penalty when one occurred.

    The penalty is r_p_coeff times the eviction time in ms and the result is
    clamped at zero.
    """
    if outcome.latency_us <= 0:
        raise NonPositiveLatency(f"latency must be > 0, got {outcome.latency_us}")
    r = 1000.0 / outcome.latency_us
    if outcome.eviction_occurred:
        r = max(0.0, r - r_p_coeff * (outcome.eviction_latency_us / 1000.0))
    return r


@dataclass(frozen=True)
class Experience:
    obs: ObservationVector
    action: int
    reward: float
    next_obs: ObservationVector


ACTION_BITS = 4
REWARD_BITS = 16


def experience_bits(n_caps: int = 1) -> int:
    return 2 * observation_bits(n_caps) + ACTION_BITS + REWARD_BITS


def pack_experience(exp: Experience) -> int:
    """Pack to the compact wire layout: obs | action | half-float reward | next obs."""
    if not 0 <= exp.action < (1 << ACTION_BITS):
        raise ValueError(f"action {exp.action} does not fit in {ACTION_BITS} bits")
    r16 = int(np.float16(exp.reward).view(np.uint16))
    n_caps = len(exp.obs.caps)
    packed = pack_observation(exp.obs)
    packed = (packed << ACTION_BITS) | exp.action
    packed = (packed << REWARD_BITS) | r16
    packed = (packed << observation_bits(n_caps)) | pack_observation(exp.next_obs)
    return packed


def unpack_experience(packed: int, n_caps: int = 1) -> Experience:
    obs_bits = observation_bits(n_caps)
    next_obs = unpack_observation(packed & ((1 << obs_bits) - 1), n_caps)
    packed >>= obs_bits
    reward = float(np.uint16(packed & 0xFFFF).view(np.float16))
    packed >>= REWARD_BITS
    action = packed & ((1 << ACTION_BITS) - 1)
    packed >>= ACTION_BITS
    obs = unpack_observation(packed, n_caps)
    return Experience(obs, action, reward, next_obs)


class ExperienceBuffer:
    """Fixed-capacity ring; overwrites the oldest entry once full."""

    def __init__(self, capacity: int = 1000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[Experience] = []
        self.cursor = 0
        self.total_added = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def filled(self) -> bool:
        return len(self.entries) == self.capacity

    def append(self, exp: Experience) -> None:
        if len(self.entries) < self.capacity:
            self.entries.append(exp)
        else:
            self.entries[self.cursor] = exp
            self.cursor = (self.cursor + 1) % self.capacity
        self.total_added += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Experience]:
        idx = rng.integers(0, len(self.entries), size=n)
        return [self.entries[i] for i in idx]


@dataclass
class AgentConfig:
    gamma: float = 0.9
    alpha: float = 1e-4
    epsilon: float = 0.001
    batch_size: int = 128
    batches_per_step: int = 8
    buffer_capacity: int = 1000
    sync_period: int = 1000
    r_p_coeff: float = 0.001
    action_count: int = 2
    n_atoms: int = 51
    hidden_dims: tuple[int, ...] = (20, 30)
    seed: int = 0
    learn: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed the buffer capacity")
        if self.action_count < 2:
            raise ValueError("need at least two placement actions")
        self.hidden_dims = tuple(self.hidden_dims)


def _action_distributions(logits: np.ndarray, action_count: int, n_atoms: int) -> np.ndarray:
    """Per-action softmax over atoms; logits (..., action_count * n_atoms)."""
    shaped = logits.reshape(*logits.shape[:-1], action_count, n_atoms)
    shifted = shaped - shaped.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def select_action(net: Network, obs_vec: np.ndarray, epsilon: float,
                  rng: np.random.Generator, support: AtomSupport,
                  action_count: int) -> int:
    """Epsilon-greedy argmax of the expected Q per action; ties go low."""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(action_count))
    logits = net.forward(obs_vec)
    probs = _action_distributions(logits, action_count, support.n_atoms)
    q = probs @ support.atoms
    return int(np.argmax(q))


def project_distribution(probs: np.ndarray, rewards: np.ndarray | float,
                         gamma: float, support: AtomSupport) -> np.ndarray:
    """Project r + gamma*z shifted atom masses back onto the fixed support.

    Each source atom's mass lands at clamp(r + gamma*z_j) and is split
    linearly between the two neighboring atoms. Accepts a single distribution
    or a batch (rows).
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    if single:
        probs = probs[None, :]
    rewards = np.atleast_1d(np.asarray(rewards, dtype=np.float64))
    k = support.n_atoms
    dz = support.delta_z
    tz = np.clip(rewards[:, None] + gamma * support.atoms[None, :],
                 support.v_min, support.v_max)
    b = (tz - support.v_min) / dz
    lo = np.minimum(np.floor(b).astype(np.int64), k - 1)
    hi = np.minimum(lo + 1, k - 1)
    w_hi = b - lo
    w_lo = 1.0 - w_hi
    out = np.zeros_like(probs)
    rows = np.broadcast_to(np.arange(probs.shape[0])[:, None], lo.shape)
    np.add.at(out, (rows, lo), probs * w_lo)
    np.add.at(out, (rows, hi), probs * w_hi)
    return out[0] if single else out


def train_step(training_net: Network, inference_net: Network,
               buffer: ExperienceBuffer, cfg: AgentConfig, support: AtomSupport,
               rng: np.random.Generator, feature_cfg: BinningConfig,
               n_devices: int) -> float:
    """One training event: batches_per_step SGD batches of replayed experiences.

    Targets are the projected r + gamma*Z of the inference network's greedy
    next action; the loss is the cross-entropy between target and the
    training network's predicted distribution for the taken action. Returns
    the final batch's mean loss.
    """
    if not buffer.filled:
        raise BufferNotFull(f"buffer holds {len(buffer)}/{buffer.capacity} experiences")
    a_count, k = cfg.action_count, support.n_atoms
    loss = 0.0
    for _ in range(cfg.batches_per_step):
        batch = buffer.sample(cfg.batch_size, rng)
        xs = np.stack([e.obs.normalized(feature_cfg, n_devices) for e in batch])
        next_xs = np.stack([e.next_obs.normalized(feature_cfg, n_devices) for e in batch])
        rewards = np.array([e.reward for e in batch])
        actions = np.array([e.action for e in batch])

        next_probs = _action_distributions(inference_net.forward_batch(next_xs), a_count, k)
        next_q = next_probs @ support.atoms
        greedy = next_q.argmax(axis=1)
        next_dist = next_probs[np.arange(len(batch)), greedy]
        target = project_distribution(next_dist, rewards, cfg.gamma, support)

        logits = training_net.forward_batch(xs)
        shaped = logits.reshape(len(batch), a_count, k)
        taken = shaped[np.arange(len(batch)), actions]
        shifted = taken - taken.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = float(-(target * log_p).sum(axis=1).mean())

        grad = np.zeros_like(shaped)
        grad[np.arange(len(batch)), actions] = (np.exp(log_p) - target) / len(batch)
        grads = training_net.backward_batch(xs, grad.reshape(len(batch), a_count * k))
        training_net.sgd_step(grads, cfg.alpha)
    return loss


class SibylAgent:
    """Decision + learning state for one replay (Algorithm-1 lifecycle).

    The transition for request t completes when request t+1 arrives and its
    observation becomes the stored next state; training fires at multiples of
    sync_period stored transitions, then the training weights are copied to
    the inference network. decide()/observe() split one request's work so a
    driver can interleave the actual device placement between them; step()
    runs the whole cycle.
    """

    def __init__(self, cfg: AgentConfig, support: AtomSupport,
                 feature_cfg: Optional[BinningConfig] = None, n_devices: int = 2,
                 concurrent: bool = False) -> None:
        self.cfg = cfg
        self.support = support
        self.feature_cfg = feature_cfg or BinningConfig()
        self.n_devices = n_devices
        dims = (observation_dim(n_devices), *cfg.hidden_dims, cfg.action_count * cfg.n_atoms)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.training_net = Network.create(dims, np.random.default_rng(seeds[0]))
        self.inference_net = Network.create(dims, np.random.default_rng(seeds[1]))
        self.rng = np.random.default_rng(seeds[2])
        self.buffer = ExperienceBuffer(cfg.buffer_capacity)
        self._pending: Optional[tuple[ObservationVector, int]] = None
        self._pending_reward: float = 0.0
        self.train_events: list[int] = []
        self.losses: list[float] = []
        self._executor = ThreadPoolExecutor(max_workers=1) if concurrent else None
        self._train_future: Optional[Future] = None

    # -- per-request driver -------------------------------------------------

    def decide(self, req: TraceRecord, req_index: int, hss: Hss) -> int:
        if self._train_future is not None and self._train_future.done():
            self._sync_after(self._train_future)
            self._train_future = None
        obs = extract(req, hss.page_table, hss.devices[:-1], self.feature_cfg, req_index)
        self._ingest(obs)
        action = select_action(
            self.inference_net, obs.normalized(self.feature_cfg, self.n_devices),
            self.cfg.epsilon, self.rng, self.support, self.cfg.action_count)
        self._pending = (obs, action)
        return action

    def observe(self, outcome: ServiceOutcome) -> None:
        self._pending_reward = reward_value(outcome, self.cfg.r_p_coeff)

    def step(self, req: TraceRecord, hss: Hss, req_index: int) -> tuple[int, ServiceOutcome]:
        action = self.decide(req, req_index, hss)
        outcome = hss.service(req, action, req_index)
        self.observe(outcome)
        return action, outcome

    def finalize(self) -> None:
        """Join any in-flight background training."""
        if self._train_future is not None:
            self._sync_after(self._train_future)
            self._train_future = None
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    # -- internals ----------------------------------------------------------

    def _ingest(self, next_obs: ObservationVector) -> None:
        if self._pending is None:
            return
        obs, action = self._pending
        self.buffer.append(Experience(obs, action, self._pending_reward, next_obs))
        self._pending = None
        if not self.cfg.learn:
            return
        total = self.buffer.total_added
        if total >= self.cfg.buffer_capacity and total % self.cfg.sync_period == 0:
            self._launch_training(total)

    def _run_train(self) -> float:
        return train_step(self.training_net, self.inference_net, self.buffer,
                          self.cfg, self.support, self.rng,
                          self.feature_cfg, self.n_devices)

    def _sync_after(self, future: Future) -> None:
        self.losses.append(future.result())
        copy_weights(self.training_net, self.inference_net)

    def _launch_training(self, milestone: int) -> None:
        self.train_events.append(milestone)
        if self._executor is None:
            self.losses.append(self._run_train())
            copy_weights(self.training_net, self.inference_net)
        else:
            if self._train_future is not None:
                self._sync_after(self._train_future)
                self._train_future = None
            self._train_future = self._executor.submit(self._run_train)

    # -- checkpointing ------------------------------------------------------

    def save(self, dest: str) -> None:
        """Bit-exact snapshot: both networks, the buffer, rng state, counters."""
        from .nn import save_checkpoint

        def enc_obs(o: ObservationVector) -> list:
            return [o.size_t, o.type_t, o.intr_t, o.cnt_t, list(o.caps), o.curr_t]

        def enc_exp(e: Experience) -> list:
            return [enc_obs(e.obs), e.action, e.reward.hex(), enc_obs(e.next_obs)]

        header = {
            "cfg": {**self.cfg.__dict__, "hidden_dims": list(self.cfg.hidden_dims)},
            "support": [self.support.v_min, self.support.v_max, self.support.n_atoms],
            "n_devices": self.n_devices,
            "rng_state": _jsonable(self.rng.bit_generator.state),
            "buffer": {
                "capacity": self.buffer.capacity,
                "cursor": self.buffer.cursor,
                "total_added": self.buffer.total_added,
                "entries": [enc_exp(e) for e in self.buffer.entries],
            },
            "pending": None if self._pending is None else
                [enc_obs(self._pending[0]), self._pending[1]],
            "pending_reward": self._pending_reward.hex(),
            "train_events": self.train_events,
            "losses": [l.hex() for l in self.losses],
        }
        nets = io.BytesIO()
        save_checkpoint(self.training_net, nets)
        save_checkpoint(self.inference_net, nets)
        header["networks"] = base64.b64encode(nets.getvalue()).decode("ascii")
        with open(dest, "w", encoding="utf-8") as fh:
            json.dump(header, fh)

    @classmethod
    def load(cls, source: str) -> "SibylAgent":
        from .nn import load_checkpoint

        with open(source, "r", encoding="utf-8") as fh:
            header = json.load(fh)

        def dec_obs(fields: list) -> ObservationVector:
            return ObservationVector(fields[0], fields[1], fields[2], fields[3],
                                     tuple(fields[4]), fields[5])

        cfg_d = dict(header["cfg"])
        cfg_d["hidden_dims"] = tuple(cfg_d["hidden_dims"])
        cfg = AgentConfig(**cfg_d)
        support = AtomSupport(*header["support"])
        agent = cls(cfg, support, n_devices=header["n_devices"])
        nets = io.BytesIO(base64.b64decode(header["networks"]))
        agent.training_net = load_checkpoint(nets)
        agent.inference_net = load_checkpoint(nets)
        agent.rng.bit_generator.state = header["rng_state"]
        buf = header["buffer"]
        agent.buffer = ExperienceBuffer(buf["capacity"])
        agent.buffer.cursor = buf["cursor"]
        agent.buffer.total_added = buf["total_added"]
        agent.buffer.entries = [
            Experience(dec_obs(o), a, float.fromhex(r), dec_obs(n))
            for o, a, r, n in buf["entries"]
        ]
        if header["pending"] is not None:
            agent._pending = (dec_obs(header["pending"][0]), header["pending"][1])
        agent._pending_reward = float.fromhex(header["pending_reward"])
        agent.train_events = list(header["train_events"])
        agent.losses = [float.fromhex(l) for l in header["losses"]]
        return agent


def _jsonable(state: dict) -> dict:
    out = {}
    for key, value in state.items():
        out[key] = _jsonable(value) if isinstance(value, dict) else value
    return out
