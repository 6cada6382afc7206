"""Platform agents, the federated server, and the standalone SlateQ learner.

Platform agents only ever talk to the server through a ``Channel``; every
learning signal that crosses it is a Q-space vector. When platform A finishes
its TD loss it replies with a *target* for the federated output, ``T = Qf - g``
(``g`` the loss gradient w.r.t. the federated output), and the server answers
with a target for the local output, ``Qa - g_in``. Fitting those targets with
a squared error reproduces the exact split-network gradients, so no gradient
or parameter message type is needed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import slateq
from .env import Observation, Response
from .errors import ConfigError, ContractViolation, TrainingAborted
from .nn import DenseNet, DenseNetSpec, Optimizer, huber, huber_grad
from .protocol import (BatchIDs, Channel, FedQVector, QueryQ, QVector, SharedTarget)

HISTORY_LENGTH = 5


class ReplayBuffer:
    """Fixed-capacity ring buffer of column arrays."""

    def __init__(self, capacity: int, columns: Dict[str, tuple]):
        self.capacity = int(capacity)
        self.columns = dict(columns)
        self.data = {name: np.zeros((self.capacity, *shape), dtype=dtype)
                     for name, (shape, dtype) in self.columns.items()}
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def append(self, row: dict):
        if set(row) != set(self.columns):
            raise ContractViolation(f"transition fields {sorted(row)} != {sorted(self.columns)}")
        for name, value in row.items():
            self.data[name][self.pos] = value
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def batch(self, ids) -> dict:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise ContractViolation("batch ids outside the filled part of the buffer")
        return {name: arr[ids] for name, arr in self.data.items()}

    def state(self, prefix):
        arrays = {f"{prefix}.{k}": v[: self.size] if self.size < self.capacity else v
                  for k, v in self.data.items()}
        return {"size": self.size, "pos": self.pos}, arrays

    def load_state(self, meta, arrays, prefix):
        self.size, self.pos = meta["size"], meta["pos"]
        for k in self.data:
            src = arrays[f"{prefix}.{k}"]
            self.data[k][: src.shape[0]] = src


@dataclass
class TransitionAlpha:
    state: np.ndarray
    slate: np.ndarray
    chosen: int  # -1 for no click
    reward: float
    next_state: np.ndarray
    terminal: bool

    def row(self):
        return {"state": self.state, "slate": self.slate, "chosen": self.chosen,
                "reward": self.reward, "next_state": self.next_state,
                "terminal": self.terminal}


@dataclass
class TransitionBeta:
    state: np.ndarray
    slate: np.ndarray

    def row(self):
        return {"state": self.state, "slate": self.slate}


def alpha_columns(state_width, n):
    return {"state": ((state_width,), np.float64), "slate": ((n,), np.int64),
            "chosen": ((), np.int64), "reward": ((), np.float64),
            "next_state": ((state_width,), np.float64), "terminal": ((), np.bool_)}


def beta_columns(state_width, n):
    return {"state": ((state_width,), np.float64), "slate": ((n,), np.int64)}


class AlphaStateEncoder:
    """[noisy_sat, last 5 per-slot engagement vectors (newest first), candidates]."""

    def __init__(self, n_candidates, slate_size, history=HISTORY_LENGTH):
        self.n_candidates = n_candidates
        self.slate_size = slate_size
        self.history = np.zeros((history, slate_size))

    @property
    def width(self):
        return 1 + self.history.size + self.n_candidates

    def reset(self):
        self.history[:] = 0.0

    def push(self, response: Response):
        row = np.zeros(self.slate_size)
        if response.chosen_slot is not None:
            row[response.chosen_slot] = response.engagement
        self.history[1:] = self.history[:-1].copy()
        self.history[0] = row

    def encode(self, obs: Observation) -> np.ndarray:
        return np.concatenate(([obs.noisy_sat], self.history.ravel(), obs.candidates))


def beta_encode(obs: Observation) -> np.ndarray:
    return np.concatenate(([obs.noisy_sat], obs.candidates))


@dataclass
class LearnerSettings:
    gamma: float = 0.9
    huber_delta: float = 1.0
    null_score: float = 1.0
    strategy: str = "greedy"
    target_sync: int = 25
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    adaptive: bool = True
    # platform nets learn only through the federated net's input gradient
    local_step_size: Optional[float] = None
    local_adaptive: Optional[bool] = None

    def optimizer(self, net):
        return Optimizer(net, self.step_size, self.beta1, self.beta2, self.eps, self.adaptive)

    def local_optimizer(self, net):
        step = self.step_size if self.local_step_size is None else self.local_step_size
        adaptive = self.adaptive if self.local_adaptive is None else self.local_adaptive
        return Optimizer(net, step, self.beta1, self.beta2, self.eps, adaptive)


def td_loss_target(qf, Y, W, delta):
    """Huber TD loss on ``sum(W * qf)`` and the Q-space target ``qf - dL/dqf``."""
    online = (W * qf).sum(axis=1)
    resid = Y - online
    loss = float(huber(resid, delta).mean())
    if not np.isfinite(loss):
        raise TrainingAborted(f"non-finite TD loss (max |residual| {np.max(np.abs(resid))})")
    grad = -(huber_grad(resid, delta) / Y.size)[:, None] * W
    return loss, qf - grad


class _PlatformAgent:
    """Shared acting machinery: local Q net, exploration, staged transitions."""

    def __init__(self, n_candidates, slate_size, state_width, hidden, settings: LearnerSettings,
                 init_rng: np.random.Generator, explore_rng: np.random.Generator,
                 capacity: int, columns, with_target: bool):
        self.N = n_candidates
        self.n = slate_size
        self.settings = settings
        spec = DenseNetSpec(state_width, tuple(hidden), n_candidates)
        self.net = DenseNet.initialize(spec, init_rng)
        self.target = self.net.copy() if with_target else None
        self.opt = settings.local_optimizer(self.net)
        self.rng = explore_rng
        self.buffer = ReplayBuffer(capacity, columns)
        self.epsilon = 0.0
        self.state: Optional[np.ndarray] = None
        self.pending_slate: Optional[np.ndarray] = None
        self._staged = None
        self.updates = 0
        self.losses: List[float] = []
        self._stage = None
        self._batch = None

    def candidates(self, state=None):
        return (self.state if state is None else state)[-self.N:]

    def choose_slate(self, item_q) -> np.ndarray:
        if self.rng.random() < self.epsilon:
            return self.rng.choice(self.N, size=self.n, replace=False).astype(np.int64)
        scores = slateq.choice_scores(self.candidates(), self.settings.null_score)
        return slateq.build_slate(item_q, scores, self.n, self.settings.strategy)

    def commit(self):
        if self._staged is None:
            raise ContractViolation("no staged transition to commit")
        self.buffer.append(self._staged.row())
        self._staged = None

    def _after_update(self):
        self.updates += 1
        if self.target is not None and self.updates % self.settings.target_sync == 0:
            self.target.load_params(self.net)

    def _fit_local(self, states, q_sent, q_target):
        grads, _ = self.net.backward(states, q_sent - q_target)
        self.opt.step(grads)
        self._after_update()

    def _unexpected(self, msgs):
        names = [type(m).__name__ for m in msgs]
        raise ContractViolation(f"{type(self).__name__} cannot handle {names} in stage {self._stage}")


class AgentAlpha(_PlatformAgent):
    """Platform A: observes rewards, computes TD targets, shares them as SharedTarget."""

    def __init__(self, n_candidates, slate_size, hidden, settings, init_rng, explore_rng,
                 capacity=10000, share_target=True):
        self.encoder = AlphaStateEncoder(n_candidates, slate_size)
        width = self.encoder.width
        super().__init__(n_candidates, slate_size, width, hidden, settings, init_rng,
                         explore_rng, capacity, alpha_columns(width, slate_size), True)
        self.share_target = share_target

    def begin_episode(self, obs: Observation):
        self.encoder.reset()
        self.state = self.encoder.encode(obs)

    def feedback(self, response: Response, obs_next: Observation, terminal: bool):
        self.encoder.push(response)
        nxt = self.encoder.encode(obs_next)
        chosen = -1 if response.chosen_slot is None else response.chosen_slot
        self._staged = TransitionAlpha(self.state, self.pending_slate, chosen,
                                       response.engagement, nxt, terminal)
        self.state = nxt

    def handle(self, msgs):
        first = msgs[0]
        if self._stage is None:
            if isinstance(first, QueryQ):
                return [QVector(self.net(self.state))]
            if isinstance(first, FedQVector) and len(msgs) == 1:
                self.pending_slate = self.choose_slate(first.values)
                return []
            if isinstance(first, BatchIDs):
                b = self.buffer.batch(first.ids)
                self._batch = b
                self._batch["ids"] = first.ids
                b["q"] = self.net(b["state"])
                q_next = self.target(b["next_state"])
                self._stage = "sent_q"
                return [QVector(b["q"].ravel()), QVector(q_next.ravel())]
        elif self._stage == "sent_q" and len(msgs) == 2 and all(isinstance(m, FedQVector) for m in msgs):
            b = self._batch
            B = b["reward"].size
            qf = msgs[0].values.reshape(B, self.N)
            qf_next = msgs[1].values.reshape(B, self.N)
            s = self.settings
            Y = slateq.batch_td_targets(b["reward"], b["terminal"], qf_next,
                                        b["next_state"][:, -self.N:], s.gamma, self.n,
                                        s.null_score, s.strategy)
            W = slateq.online_weights(b["slate"], b["chosen"], b["state"][:, -self.N:],
                                      s.null_score, clicked_item=True)
            loss, target = td_loss_target(qf, Y, W, s.huber_delta)
            self.losses.append(loss)
            b["Y"] = Y
            self._stage = "sent_target"
            out = [QVector(target.ravel())]
            if self.share_target:
                out.append(SharedTarget(Y))
            return out
        elif self._stage == "sent_target" and len(msgs) == 1 and isinstance(first, FedQVector):
            b = self._batch
            self._fit_local(b["state"], b["q"], first.values.reshape(b["q"].shape))
            self._stage = "updated"
            return []
        elif self._stage == "updated" and isinstance(first, BatchIDs):
            b = self._batch
            if not np.array_equal(first.ids, b["ids"]):
                raise ContractViolation("refresh ids differ from the round's batch")
            fresh = self.net(b["state"])
            self._stage, self._batch = None, None
            return [QVector(fresh.ravel())]
        self._unexpected(msgs)


class AgentBeta(_PlatformAgent):
    """Platform B. In base mode it stores only (state, slate) and learns from
    the targets platform A shares; ``extended`` gives it its own rewards."""

    def __init__(self, n_candidates, slate_size, hidden, settings, init_rng, explore_rng,
                 capacity=10000, extended=False):
        width = 1 + n_candidates
        columns = alpha_columns(width, slate_size) if extended else beta_columns(width, slate_size)
        super().__init__(n_candidates, slate_size, width, hidden, settings, init_rng,
                         explore_rng, capacity, columns, with_target=extended)
        self.extended = extended

    def begin_episode(self, obs: Observation):
        self.state = beta_encode(obs)

    def observe(self, obs_next: Observation):
        if self.extended:
            raise ConfigError("extended platform B must be given its feedback")
        self._staged = TransitionBeta(self.state, self.pending_slate)
        self.state = beta_encode(obs_next)

    def feedback(self, response: Response, obs_next: Observation, terminal: bool):
        if not self.extended:
            raise ConfigError("platform B receives no feedback outside extended mode")
        nxt = beta_encode(obs_next)
        chosen = -1 if response.chosen_slot is None else response.chosen_slot
        self._staged = TransitionAlpha(self.state, self.pending_slate, chosen,
                                       response.engagement, nxt, terminal)
        self.state = nxt

    def handle(self, msgs):
        first = msgs[0]
        s = self.settings
        if self._stage is None:
            if isinstance(first, QueryQ):
                return [QVector(self.net(self.state))]
            if isinstance(first, FedQVector) and len(msgs) == 1:
                self.pending_slate = self.choose_slate(first.values)
                return []
            if isinstance(first, BatchIDs):
                b = self.buffer.batch(first.ids)
                self._batch = b
                b["q"] = self.net(b["state"])
                self._stage = "sent_q"
                out = [QVector(b["q"].ravel())]
                if self.extended:
                    out.append(QVector(self.target(b["next_state"]).ravel()))
                return out
        elif self._stage == "sent_q" and len(msgs) == 2 and isinstance(first, FedQVector):
            b = self._batch
            B = b["q"].shape[0]
            qf = first.values.reshape(B, self.N)
            if isinstance(msgs[1], SharedTarget) and not self.extended:
                Y = msgs[1].values
                if Y.size != B:
                    raise ContractViolation("shared targets are not aligned with the batch")
                W = slateq.online_weights(b["slate"], None, b["state"][:, -self.N:],
                                          s.null_score, clicked_item=False)
            elif isinstance(msgs[1], FedQVector):
                if not self.extended:
                    raise ConfigError("extended learning round on a base-mode platform B")
                qf_next = msgs[1].values.reshape(B, self.N)
                Y = slateq.batch_td_targets(b["reward"], b["terminal"], qf_next,
                                            b["next_state"][:, -self.N:], s.gamma, self.n,
                                            s.null_score, s.strategy)
                W = slateq.online_weights(b["slate"], b["chosen"], b["state"][:, -self.N:],
                                          s.null_score, clicked_item=True)
            else:
                self._unexpected(msgs)
            loss, target = td_loss_target(qf, Y, W, s.huber_delta)
            self.losses.append(loss)
            self._stage = "sent_target"
            return [QVector(target.ravel())]
        elif self._stage == "sent_target" and len(msgs) == 1 and isinstance(first, FedQVector):
            b = self._batch
            self._fit_local(b["state"], b["q"], first.values.reshape(b["q"].shape))
            self._stage, self._batch = None, None
            return []
        self._unexpected(msgs)


class FedServer:
    """Owns the federated Q network; sees only Q vectors, ids and shared targets."""

    def __init__(self, n_candidates, spec: DenseNetSpec, settings: LearnerSettings,
                 init_rng, sample_rng, alpha: Channel, beta: Channel, batch_size=64,
                 learn_every=4, is_learn=True, extended=False, capacity=10000):
        if spec.input_width != 2 * n_candidates or spec.output_width != n_candidates:
            raise ContractViolation("federated net must map 2N inputs to N outputs")
        self.N = n_candidates
        self.net = DenseNet.initialize(spec, init_rng)
        self.target = self.net.copy()
        self.settings = settings
        self.opt = settings.optimizer(self.net)
        self.rng = sample_rng
        self.alpha = alpha
        self.beta = beta
        self.batch_size = batch_size
        self.learn_every = learn_every
        self.is_learn = is_learn
        self.extended = extended
        self.capacity = capacity
        self.transitions = 0
        self.rounds = 0
        self.hooks: List[Callable[[str], None]] = []

    def _emit(self, event):
        for hook in self.hooks:
            hook(event)

    def fed_forward_alpha(self, q_alpha, q_beta_const, net=None):
        return self._forward(q_alpha, q_beta_const, net)

    def fed_forward_beta(self, q_beta, q_alpha_const, net=None):
        return self._forward(q_beta, q_alpha_const, net)

    def _forward(self, own, other, net):
        own, other = np.asarray(own, dtype=np.float64), np.asarray(other, dtype=np.float64)
        if own.shape != other.shape or own.shape[-1] != self.N:
            raise ContractViolation("Q vectors must both have length N")
        return (net or self.net)(np.concatenate([own, other], axis=-1))

    def acting_round(self):
        (qa,) = self.alpha.request([QueryQ()])
        (qb,) = self.beta.request([QueryQ()])
        qfa = self.fed_forward_alpha(qa.values, qb.values)
        qfb = self.fed_forward_beta(qb.values, qa.values)
        self.alpha.request([FedQVector(qfa)])
        self.beta.request([FedQVector(qfb)])

    def record_transition(self):
        self.transitions = min(self.transitions + 1, self.capacity)

    def should_learn(self, step):
        return self.is_learn and step % self.learn_every == 0

    def sample_ids(self):
        return self.rng.choice(self.transitions, size=self.batch_size, replace=False)

    def _fit_fed(self, own, other, qf_sent, qf_target):
        x = np.concatenate([own, other], axis=1)
        grads, g_in = self.net.backward(x, qf_sent - qf_target)
        self.opt.step(grads)
        # only the first half (the platform's own Q values) is trainable
        return own - g_in[:, : self.N]

    def learning_round(self) -> bool:
        if self.extended:
            raise ConfigError("extended server must run extended_learning_round")
        return self._round(extended=False)

    def extended_learning_round(self) -> bool:
        return self._round(extended=True)

    def _round(self, extended):
        if self.transitions < self.batch_size:
            return False
        B, N = self.batch_size, self.N
        ids = self.sample_ids()
        self._emit("round_start")
        qa, qa_next = (m.values.reshape(B, N) for m in self.alpha.request([BatchIDs(ids)]))
        reply_b = self.beta.request([BatchIDs(ids)])
        qb = reply_b[0].values.reshape(B, N)
        if extended and len(reply_b) != 2:
            raise ConfigError("extended round needs next-state Q values from platform B")
        qf_a = self.fed_forward_alpha(qa, qb)
        qf_a_next = self.fed_forward_alpha(qa_next, qb, net=self.target)
        reply_a = self.alpha.request([FedQVector(qf_a), FedQVector(qf_a_next)])
        shared = reply_a[1] if len(reply_a) > 1 else None
        if extended and shared is not None:
            raise ContractViolation("extended round must not share platform A targets")
        local_target = self._fit_fed(qa, qb, qf_a, reply_a[0].values.reshape(B, N))
        self.alpha.request([FedQVector(local_target)])
        self._emit("after_alpha_update")
        (fresh,) = self.alpha.request([BatchIDs(ids)])
        qa_fresh = fresh.values.reshape(B, N)
        qf_b = self.fed_forward_beta(qb, qa_fresh)
        if extended:
            qb_next = reply_b[1].values.reshape(B, N)
            qf_b_next = self.fed_forward_beta(qb_next, qa_fresh, net=self.target)
            (tb,) = self.beta.request([FedQVector(qf_b), FedQVector(qf_b_next)])
        else:
            if shared is None:
                raise ContractViolation("platform A did not share its targets")
            (tb,) = self.beta.request([FedQVector(qf_b), shared])
        local_target = self._fit_fed(qb, qa_fresh, qf_b, tb.values.reshape(B, N))
        self.beta.request([FedQVector(local_target)])
        self._emit("after_beta_update")
        self.rounds += 1
        if self.rounds % self.settings.target_sync == 0:
            self.target.load_params(self.net)
        return True


class SlateQAgent(AgentAlpha):
    """Single-platform SlateQ: same state encoding as platform A, no federation."""

    def __init__(self, *args, **kwargs):
        kwargs["share_target"] = False
        super().__init__(*args, **kwargs)
        # trained directly on its own TD loss, so it uses the main optimizer
        self.opt = self.settings.optimizer(self.net)

    def act(self):
        self.pending_slate = self.choose_slate(self.net(self.state))
        return self.pending_slate

    def learn(self, ids):
        b = self.buffer.batch(ids)
        s = self.settings
        q = self.net(b["state"])
        q_next = self.target(b["next_state"])
        Y = slateq.batch_td_targets(b["reward"], b["terminal"], q_next,
                                    b["next_state"][:, -self.N:], s.gamma, self.n,
                                    s.null_score, s.strategy)
        W = slateq.online_weights(b["slate"], b["chosen"], b["state"][:, -self.N:],
                                  s.null_score, clicked_item=True)
        loss, target = td_loss_target(q, Y, W, s.huber_delta)
        self.losses.append(loss)
        self._fit_local(b["state"], q, target)
        return loss
