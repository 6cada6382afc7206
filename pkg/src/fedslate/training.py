"""Episode loop wiring the environment to the agents for every experiment mode."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import astuple, dataclass
from typing import List, Optional

import numpy as np

from . import archive, config as config_mod
from .agents import AgentAlpha, AgentBeta, FedServer, LearnerSettings, SlateQAgent
from .config import ExperimentConfig
from .env import Corpus, DualPlatformEnv, EngagementParams, UserParams
from .errors import CheckpointError, ConfigError
from .nn import Activation, DenseNetSpec, net_from_arrays, net_to_arrays
from .protocol import InProcessChannel, MessageLog

log = logging.getLogger(__name__)

METRICS_HEADER = ["episode", "return_a", "return_b", "epsilon", "loss_alpha", "loss_beta", "wall_ms"]


@dataclass
class MetricsRecord:
    episode: int
    return_a: float
    return_b: float
    epsilon: float
    loss_alpha: float
    loss_beta: float
    wall_ms: float

    def csv_row(self):
        return ",".join([str(self.episode)] + [repr(float(v)) for v in astuple(self)[1:]])


def _rng(seq: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seq))


def episode_seed(env_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([env_seed, 1, episode]).generate_state(1)[0])


def user_params(cfg: ExperimentConfig) -> UserParams:
    e = cfg.env
    return UserParams(
        tau=e.tau, mem_discount=e.mem_discount, noise_std=e.nke_noise_std,
        obs_noise_std=e.obs_noise_std, nke_init=e.nke_init,
        engagement=EngagementParams(e.mu_kale, e.sigma_kale, e.mu_choc, e.sigma_choc),
        budget=e.budget, budget_consumption=e.budget_consumption, step_cost=e.step_cost,
        satisfaction_scales_engagement=e.satisfaction_scales_engagement)


def build_env(cfg: ExperimentConfig, single_platform=False) -> DualPlatformEnv:
    e = cfg.env
    size = e.corpus_size or e.num_candidates
    root = [cfg.seeds.env, 0] if e.corpus_seed is None else [e.corpus_seed, 2]
    seq_a, seq_b = np.random.SeedSequence(root).spawn(2)
    corpus_a = Corpus.generate("A", size, e.num_candidates, _rng(seq_a))
    corpus_b = None if single_platform else Corpus.generate("B", size, e.num_candidates, _rng(seq_b))
    return DualPlatformEnv(corpus_a, corpus_b, user_params(cfg), mode=e.mode,
                           null_score=e.null_score, order=e.order,
                           log_trajectory=cfg.trajectory_log)


def learner_settings(cfg: ExperimentConfig) -> LearnerSettings:
    o = cfg.optimizer
    return LearnerSettings(gamma=cfg.gamma, huber_delta=o.huber_delta,
                           null_score=cfg.env.null_score, strategy=cfg.slate_strategy,
                           target_sync=cfg.target_sync, step_size=o.step_size, beta1=o.beta1,
                           beta2=o.beta2, eps=o.eps, adaptive=o.kind == "adam",
                           local_step_size=o.local_step_size,
                           local_adaptive=o.local_kind == "adam")


def global_spec(cfg: ExperimentConfig) -> DenseNetSpec:
    N = cfg.env.num_candidates
    if cfg.mode == "fedslate-ablated":
        return DenseNetSpec(2 * N, tuple(cfg.nets.ablated_hidden), N, Activation.IDENTITY)
    return DenseNetSpec(2 * N, tuple(cfg.nets.global_hidden), N, Activation.MISH)


class Trainer:
    """Runs one experiment; all state needed to resume lives on this object."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        N, n = cfg.env.num_candidates, cfg.env.slate_size
        self.env = build_env(cfg, single_platform=cfg.mode == "slateq-standalone")
        init = [_rng(s) for s in np.random.SeedSequence(cfg.seeds.nets).spawn(4)]
        samp = [_rng(s) for s in np.random.SeedSequence(cfg.seeds.sampling).spawn(4)]
        self.sample_rng = samp[0]
        self.random_rng = samp[3]
        settings = learner_settings(cfg)
        self.log = MessageLog(keep=cfg.message_log)
        self.alpha = self.beta = self.fed = self.solo = None
        hidden = cfg.nets.local_hidden
        cap = cfg.buffer_capacity
        if cfg.federated:
            self.alpha = AgentAlpha(N, n, hidden, settings, init[0], samp[1], cap,
                                    share_target=not cfg.extended)
            self.beta = AgentBeta(N, n, hidden, settings, init[1], samp[2], cap,
                                  extended=cfg.extended)
            self.fed = FedServer(N, global_spec(cfg), settings, init[2], samp[0],
                                 InProcessChannel(self.alpha, "alpha", self.log),
                                 InProcessChannel(self.beta, "beta", self.log),
                                 batch_size=cfg.batch_size, learn_every=cfg.learn_every,
                                 is_learn=cfg.is_learn, extended=cfg.extended, capacity=cap)
            if cfg.extended and "reward" not in self.beta.buffer.columns:
                raise ConfigError("fedslate-extended: platform B buffer must carry rewards")
        elif cfg.mode == "slateq-standalone":
            self.solo = SlateQAgent(N, n, hidden, settings, init[3], samp[1], cap)
        self.episode = 0
        self.history: List[MetricsRecord] = []
        self.global_step = 0

    # ------------------------------------------------------------------ loop
    def epsilon_for(self, episode: int) -> float:
        x = self.cfg.exploration
        span = x.anneal_fraction * self.cfg.episodes
        if span <= 0:
            return x.end
        return x.start + (x.end - x.start) * min(1.0, episode / span)

    def run(self, stop_at: Optional[int] = None, on_episode=None) -> List[MetricsRecord]:
        stop = self.cfg.episodes if stop_at is None else min(stop_at, self.cfg.episodes)
        while self.episode < stop:
            record = self.run_episode()
            if on_episode is not None:
                on_episode(self, record)
        return self.history

    def run_episode(self) -> MetricsRecord:
        e = self.episode
        t0 = time.perf_counter()
        eps = self.epsilon_for(e)
        obs = self.env.reset(episode_seed(self.cfg.seeds.env, e), episode=e)
        if self.cfg.federated:
            ret_a, ret_b, la, lb = self._federated_episode(obs, eps)
        elif self.solo is not None:
            ret_a, ret_b, la, lb = self._standalone_episode(obs, eps)
        else:
            ret_a, ret_b, la, lb = self._random_episode()
            eps = 1.0
        wall = (time.perf_counter() - t0) * 1000.0 if self.cfg.record_wall_time else 0.0
        record = MetricsRecord(e, ret_a, ret_b, eps, la, lb, wall)
        self.history.append(record)
        self.episode += 1
        if e % 100 == 0:
            log.info("episode %d return_a %.2f return_b %.2f eps %.3f", e, ret_a, ret_b, eps)
        return record

    def acting_round(self):
        """One federated acting step; returns the environment step result."""
        self.fed.acting_round()
        res = self.env.step(self.alpha.pending_slate, self.beta.pending_slate)
        self.alpha.feedback(res.response_a, res.obs_a, res.terminal)
        if self.cfg.extended:
            self.beta.feedback(res.response_b, res.obs_b, res.terminal)
        else:
            self.beta.observe(res.obs_b)
        # both sides append only once the whole step has succeeded
        self.alpha.commit()
        self.beta.commit()
        self.fed.record_transition()
        return res

    def learning_round(self) -> bool:
        if self.cfg.extended:
            return self.fed.extended_learning_round()
        return self.fed.learning_round()

    def _federated_episode(self, obs, eps):
        self.alpha.begin_episode(obs[0])
        self.beta.begin_episode(obs[1])
        self.alpha.epsilon = self.beta.epsilon = eps
        self.alpha.losses.clear()
        self.beta.losses.clear()
        ret_a = ret_b = 0.0
        step = 0
        while True:
            self.log.round = self.global_step
            res = self.acting_round()
            ret_a += res.reward_a
            ret_b += res.reward_b
            if self.fed.should_learn(step):
                self.learning_round()
            self.global_step += 1
            if res.terminal:
                break
            step += 1
        return ret_a, ret_b, _mean(self.alpha.losses), _mean(self.beta.losses)

    def _standalone_episode(self, obs, eps):
        agent = self.solo
        agent.begin_episode(obs[0])
        agent.epsilon = eps
        agent.losses.clear()
        ret = 0.0
        step = 0
        while True:
            agent.act()
            res = self.env.step(agent.pending_slate)
            agent.feedback(res.response_a, res.obs_a, res.terminal)
            agent.commit()
            ret += res.reward_a
            if self.cfg.is_learn and step % self.cfg.learn_every == 0 \
                    and len(agent.buffer) >= self.cfg.batch_size:
                ids = self.sample_rng.choice(len(agent.buffer), self.cfg.batch_size, replace=False)
                agent.learn(ids)
            self.global_step += 1
            if res.terminal:
                break
            step += 1
        return ret, 0.0, _mean(agent.losses), float("nan")

    def random_slate(self):
        e = self.cfg.env
        return self.random_rng.choice(e.num_candidates, size=e.slate_size, replace=False)

    def _random_episode(self):
        ret_a = ret_b = 0.0
        while True:
            res = self.env.step(self.random_slate(), self.random_slate())
            ret_a += res.reward_a
            ret_b += res.reward_b
            self.global_step += 1
            if res.terminal:
                return ret_a, ret_b, float("nan"), float("nan")

    # ------------------------------------------------------------ checkpoint
    def _nets(self):
        out = {}
        for name, agent in (("alpha", self.alpha), ("beta", self.beta), ("fed", self.fed),
                            ("solo", self.solo)):
            if agent is None:
                continue
            out[f"{name}.net"] = agent.net
            if agent.target is not None:
                out[f"{name}.target"] = agent.target
        return out

    def _optimizers(self):
        return {name: agent.opt for name, agent in (("alpha", self.alpha), ("beta", self.beta),
                                                    ("fed", self.fed), ("solo", self.solo))
                if agent is not None}

    def _agents(self):
        return {name: a for name, a in (("alpha", self.alpha), ("beta", self.beta),
                                        ("solo", self.solo)) if a is not None}

    def _rngs(self):
        rngs = {"sample": self.sample_rng, "random": self.random_rng}
        for name, agent in self._agents().items():
            rngs[f"{name}.explore"] = agent.rng
        return rngs

    def state_dict(self):
        meta = {"kind": "run", "config": self.cfg.to_dict(), "episode": self.episode,
                "global_step": self.global_step, "nets": {}, "optimizers": {},
                "buffers": {}, "counters": {},
                "rng": {k: r.bit_generator.state for k, r in self._rngs().items()},
                "message_counts": {str(k): v for k, v in sorted(self.log.counts.items())}}
        arrays = {}
        for name, net in self._nets().items():
            spec, arr = net_to_arrays(net, prefix=f"{name}.")
            meta["nets"][name] = spec
            arrays.update(arr)
        for name, opt in self._optimizers().items():
            st = opt.state
            meta["optimizers"][name] = {"steps": st.steps, "moments": len(st.m)}
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                arrays[f"{name}.opt.m{i}"] = m
                arrays[f"{name}.opt.v{i}"] = v
        for name, agent in self._agents().items():
            bmeta, barr = agent.buffer.state(f"{name}.buffer")
            meta["buffers"][name] = bmeta
            arrays.update(barr)
            meta["counters"][name] = agent.updates
        if self.fed is not None:
            meta["counters"]["fed.rounds"] = self.fed.rounds
            meta["counters"]["fed.transitions"] = self.fed.transitions
        hist = np.array([astuple(r) for r in self.history], dtype=np.float64).reshape(-1, 7)
        arrays["history"] = hist
        return meta, arrays

    def load_state_dict(self, meta, arrays):
        self.episode = meta["episode"]
        self.global_step = meta["global_step"]
        nets = self._nets()
        if set(nets) != set(meta["nets"]):
            raise CheckpointError("checkpoint networks do not match the experiment mode")
        for name, net in nets.items():
            loaded = net_from_arrays(meta["nets"][name], arrays, prefix=f"{name}.")
            if loaded.spec != net.spec:
                raise CheckpointError(f"network {name} has a different architecture")
            net.load_params(loaded)
        for name, opt in self._optimizers().items():
            st = opt.state
            st.steps = meta["optimizers"][name]["steps"]
            for i in range(len(st.m)):
                np.copyto(st.m[i], arrays[f"{name}.opt.m{i}"])
                np.copyto(st.v[i], arrays[f"{name}.opt.v{i}"])
        for name, agent in self._agents().items():
            agent.buffer.load_state(meta["buffers"][name], arrays, f"{name}.buffer")
            agent.updates = meta["counters"][name]
        if self.fed is not None:
            self.fed.rounds = meta["counters"]["fed.rounds"]
            self.fed.transitions = meta["counters"]["fed.transitions"]
        for name, rng in self._rngs().items():
            rng.bit_generator.state = meta["rng"][name]
        self.log.counts.clear()
        self.log.counts.update({int(k): v for k, v in meta["message_counts"].items()})
        self.history = [MetricsRecord(int(row[0]), *map(float, row[1:])) for row in arrays["history"]]


def _mean(values):
    return float(np.mean(values)) if values else float("nan")


def save_checkpoint(trainer: Trainer, path):
    meta, arrays = trainer.state_dict()
    archive.write(path, meta, arrays)


def load_checkpoint(path, overrides: Optional[dict] = None) -> Trainer:
    """Rebuild a trainer from ``path``; nothing is mutated if the file is bad."""
    meta, arrays = archive.read(path)
    if meta.get("kind") != "run":
        raise CheckpointError(f"{path} is not a run checkpoint")
    try:
        cfg = config_mod.from_dict(meta["config"])
        if overrides:
            cfg = cfg.replace(**overrides)
        trainer = Trainer(cfg)
        trainer.load_state_dict(meta, arrays)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc}") from None
    return trainer


def hash_params(trainer: Trainer) -> str:
    h = hashlib.sha256()
    for name, net in sorted(trainer._nets().items()):
        h.update(name.encode())
        h.update(net.flat_params().tobytes())
    return h.hexdigest()
