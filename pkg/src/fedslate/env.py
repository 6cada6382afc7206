"""Two-platform choc-vs-kale user simulator.

One simulated user browses platform A and platform B in lock-step. Each step
the user answers A's slate first and then B's slate. In ``coupled`` mode both
answers read and write the same latent state, so what one platform shows moves
the satisfaction the other platform sees. In ``sparse`` mode each platform has
its own, independently seeded user.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ContractViolation

PLATFORMS = ("A", "B")
TRAJECTORY_HEADER = ["episode", "step", "platform", "slate_ids", "chosen_slot",
                     "engagement", "sat", "nke", "budget"]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class EngagementParams:
    mu_kale: float = 2.5
    sigma_kale: float = 0.1
    mu_choc: float = 3.0
    sigma_choc: float = 0.2


@dataclass(frozen=True)
class UserParams:
    tau: float = 1.0
    mem_discount: float = 0.7
    noise_std: float = 0.1
    obs_noise_std: float = 0.05
    nke_init: float = 0.0
    engagement: EngagementParams = EngagementParams()
    budget: float = 20.0
    # "step": every step costs step_cost; "engagement": a click costs its
    # engagement and a no-click costs step_cost
    budget_consumption: str = "step"
    step_cost: float = 1.0
    satisfaction_scales_engagement: bool = True

    def __post_init__(self):
        if not 0 <= self.mem_discount < 1:
            raise ContractViolation("mem_discount must lie in [0, 1)")
        if self.tau <= 0 or self.noise_std < 0 or self.obs_noise_std < 0:
            raise ContractViolation("tau must be positive and noise levels nonnegative")
        if self.budget_consumption not in ("step", "engagement"):
            raise ContractViolation("budget_consumption must be 'step' or 'engagement'")
        if self.step_cost <= 0:
            raise ContractViolation("step_cost must be positive")


@dataclass(frozen=True)
class UserLatentState:
    nke: float
    sat: float
    budget: float
    params: UserParams = field(default_factory=UserParams, compare=False)

    @classmethod
    def fresh(cls, params: UserParams):
        return cls(params.nke_init, float(sigmoid(params.tau * params.nke_init)),
                   params.budget, params)


@dataclass(frozen=True)
class Document:
    id: int
    kaleness: float


class Corpus:
    """Documents with dense ids; candidates are served N at a time in id order."""

    def __init__(self, platform: str, kaleness, n_candidates: int):
        k = np.asarray(kaleness, dtype=np.float64)
        if np.any(k < 0) or np.any(k > 1):
            raise ContractViolation("kaleness must lie in [0, 1]")
        if not 1 <= n_candidates <= k.size:
            raise ContractViolation("candidate count must be in [1, corpus size]")
        self.platform = platform
        self.kaleness = k
        self.n_candidates = int(n_candidates)
        self.offset = 0

    @classmethod
    def generate(cls, platform, size, n_candidates, rng: np.random.Generator):
        return cls(platform, rng.uniform(0.0, 1.0, size=size), n_candidates)

    def __len__(self):
        return self.kaleness.size

    @property
    def documents(self) -> List[Document]:
        return [Document(i, float(k)) for i, k in enumerate(self.kaleness)]

    def candidate_ids(self) -> np.ndarray:
        return (self.offset + np.arange(self.n_candidates)) % len(self)

    def candidate_features(self) -> np.ndarray:
        return self.kaleness[self.candidate_ids()]

    def advance(self):
        self.offset = (self.offset + self.n_candidates) % len(self)


@dataclass
class Observation:
    noisy_sat: float
    candidates: np.ndarray


@dataclass
class Response:
    chosen_slot: Optional[int]
    engagement: float


@dataclass
class StepResult:
    obs_a: Observation
    obs_b: Optional[Observation]
    reward_a: float
    # evaluation-only: never handed to a learner in base mode
    reward_b: float
    response_a: Response
    response_b: Optional[Response]
    terminal: bool


def user_choice(slate_kaleness, rng: np.random.Generator, null_score: float = 1.0):
    """Sample the consumed slot (None for no click); draws exactly one uniform."""
    k = np.asarray(slate_kaleness, dtype=np.float64)
    if k.size < 1:
        raise ContractViolation("slate must hold at least one document")
    weights = np.append(np.exp(1.0 - k), null_score)
    cdf = np.cumsum(weights)
    u = rng.random() * cdf[-1]
    slot = int(np.searchsorted(cdf, u, side="right"))
    slot = min(slot, k.size)
    return None if slot == k.size else slot


def engagement_sample(kaleness: float, params: EngagementParams, rng: np.random.Generator,
                      satisfaction: Optional[float] = None) -> float:
    """Log-normal engagement interpolated between the kale and choc responses.

    ``satisfaction`` (if given) scales the log-location, so a satisfied user
    engages longer with everything.
    """
    k = float(kaleness)
    mu = k * params.mu_kale + (1.0 - k) * params.mu_choc
    sigma = k * params.sigma_kale + (1.0 - k) * params.sigma_choc
    if satisfaction is not None:
        mu *= satisfaction
    return float(np.exp(mu + sigma * rng.standard_normal()))


def apply_transition(state: UserLatentState, kaleness: float,
                     rng: np.random.Generator) -> UserLatentState:
    """Update net kale exposure after a consumed item; satisfaction follows."""
    p = state.params
    nke = p.mem_discount * state.nke + 2.0 * (kaleness - 0.5) + p.noise_std * rng.standard_normal()
    return dataclasses.replace(state, nke=nke, sat=float(sigmoid(p.tau * nke)))


class DualPlatformEnv:
    """Environment for platform A and (optionally) platform B.

    ``corpus_b=None`` gives the single-platform setting used by the standalone
    baseline.
    """

    def __init__(self, corpus_a: Corpus, corpus_b: Optional[Corpus], user: UserParams,
                 mode: str = "coupled", null_score: float = 1.0, order: str = "alternate",
                 log_trajectory: bool = False):
        if mode not in ("coupled", "sparse"):
            raise ContractViolation("mode must be 'coupled' or 'sparse'")
        if order not in ("alternate", "random"):
            raise ContractViolation("order must be 'alternate' or 'random'")
        if corpus_b is not None and corpus_b.n_candidates != corpus_a.n_candidates:
            raise ContractViolation("both platforms must serve the same candidate count")
        self.corpora = {"A": corpus_a}
        if corpus_b is not None:
            self.corpora["B"] = corpus_b
        self.user_params = user
        self.mode = mode
        self.null_score = float(null_score)
        self.order = order
        self.log_trajectory = log_trajectory
        self.trajectory: List[list] = []
        self.episode = -1
        self.steps = 0
        self.users = {}
        self._rng_user = {}
        self._rng_obs = {}
        self._rng_order = None

    @property
    def platforms(self):
        return tuple(self.corpora)

    @property
    def n_candidates(self):
        return self.corpora["A"].n_candidates

    def user_state(self, platform: str = "A") -> UserLatentState:
        return self.users[platform if self.mode == "sparse" else "A"]

    def _set_user(self, platform, state):
        self.users[platform if self.mode == "sparse" else "A"] = state

    @property
    def latent_state_count(self):
        return len({id(u) for u in self.users.values()})

    def reset(self, seed: int, episode: Optional[int] = None):
        ss = np.random.SeedSequence(int(seed))
        obs_seq, user_seq, order_seq = ss.spawn(3)
        self._rng_obs = dict(zip(PLATFORMS, (np.random.Generator(np.random.PCG64(s))
                                             for s in obs_seq.spawn(2))))
        fresh = UserLatentState.fresh(self.user_params)
        if self.mode == "coupled":
            self.users = {"A": fresh}
            shared = np.random.Generator(np.random.PCG64(user_seq))
            self._rng_user = {p: shared for p in PLATFORMS}
        else:
            self.users = {p: dataclasses.replace(fresh) for p in self.platforms}
            self._rng_user = dict(zip(PLATFORMS, (np.random.Generator(np.random.PCG64(s))
                                                  for s in user_seq.spawn(2))))
        self._rng_order = np.random.Generator(np.random.PCG64(order_seq))
        for c in self.corpora.values():
            c.offset = 0
        self.episode = self.episode + 1 if episode is None else episode
        self.steps = 0
        return tuple(self.observe(p) for p in self.platforms)

    def candidate_features(self, platform: str) -> np.ndarray:
        return self.corpora[platform].candidate_features()

    def observe(self, platform: str) -> Observation:
        sat = self.user_state(platform).sat
        noisy = sat + self.user_params.obs_noise_std * self._rng_obs[platform].standard_normal()
        return Observation(float(np.clip(noisy, 0.0, 1.0)), self.candidate_features(platform))

    def _respond(self, platform: str, slate) -> Response:
        corpus = self.corpora[platform]
        slate = np.asarray(slate, dtype=np.int64)
        n = corpus.n_candidates
        if slate.ndim != 1 or slate.size == 0 or slate.min() < 0 or slate.max() >= n \
                or np.unique(slate).size != slate.size:
            raise ContractViolation(f"invalid slate {slate.tolist()} for {n} candidates")
        rng = self._rng_user[platform]
        state = self.user_state(platform)
        p = self.user_params
        if state.budget <= 0:
            return Response(None, 0.0)
        k = corpus.candidate_features()[slate]
        slot = user_choice(k, rng, self.null_score)
        if slot is None:
            rng.standard_normal(2)  # keep stream alignment with the click branch
            engagement = 0.0
            cost = p.step_cost
        else:
            sat = state.sat if p.satisfaction_scales_engagement else None
            engagement = engagement_sample(k[slot], p.engagement, rng, sat)
            state = apply_transition(state, k[slot], rng)
            cost = engagement
        if p.budget_consumption == "engagement":
            state = dataclasses.replace(state, budget=state.budget - cost)
        self._set_user(platform, state)
        if self.log_trajectory:
            ids = corpus.candidate_ids()[slate]
            self.trajectory.append([
                self.episode, self.steps, platform, " ".join(map(str, ids)),
                "" if slot is None else slot, engagement, state.sat, state.nke, state.budget])
        return Response(slot, engagement)

    def step(self, slate_a, slate_b=None) -> StepResult:
        two = "B" in self.corpora
        if two and slate_b is None:
            raise ContractViolation("platform B slate missing")
        order = ["A", "B"] if two else ["A"]
        if two and self.order == "random" and self._rng_order.random() < 0.5:
            order.reverse()
        responses = {}
        for platform in order:
            responses[platform] = self._respond(platform, slate_a if platform == "A" else slate_b)
        if self.user_params.budget_consumption == "step":
            for key, state in list(self.users.items()):
                self.users[key] = dataclasses.replace(
                    state, budget=state.budget - self.user_params.step_cost)
        for c in self.corpora.values():
            c.advance()
        self.steps += 1
        terminal = self.user_state("A").budget <= 0
        ra = responses["A"]
        rb = responses.get("B")
        return StepResult(self.observe("A"), self.observe("B") if two else None,
                          ra.engagement, rb.engagement if rb else 0.0, ra, rb, terminal)

    def get_state(self) -> dict:
        return {
            "users": {k: [u.nke, u.sat, u.budget] for k, u in self.users.items()},
            "offsets": {k: c.offset for k, c in self.corpora.items()},
            "episode": self.episode,
            "steps": self.steps,
        }

    def write_trajectory(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_HEADER)
            w.writerows(self.trajectory)
