"""Comparison policies: the hand-set rule-based template instantiation and
epsilon-greedy Q-learning with linear function approximation."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .core import (ACTIONS, DEFAULT_MAX_TURNS, FEATURE_SCHEMA_VERSION,
                   DialogState, RewardConfig, featurize, resolve_action)
from .dsl import ArityMismatch, TemplateAst
from .simulator import (DEFAULT_NOISE_SCHEDULE, DEFAULT_PATIENCE, NoiseConfig,
                        Ontology, Policy, SimulatedDialogEnv, template_policy)

# Reasonable but untuned thresholds; the foil the optimized policies beat.
HEURISTIC_PARAMS = (0.3, 0.8, 0.5, 0.5)


class DivergenceDetected(Exception):
    pass


def rule_based_policy(ast: TemplateAst,
                      heuristic_params: Sequence[float] | None = None) -> Policy:
    """The template bound to fixed hand-set parameters.

    Decision-for-decision identical to evaluating the same template with the
    same parameter vector.
    """
    params = np.asarray(HEURISTIC_PARAMS if heuristic_params is None
                        else heuristic_params, dtype=np.float64)
    if len(params) != ast.param_count:
        raise ArityMismatch(
            f"template takes {ast.param_count} parameters, got {len(params)}")
    return template_policy(ast, params)


@dataclass(frozen=True)
class LinearQConfig:
    learning_rate: float = 0.05
    epsilon: float = 0.3
    episodes: int = 10000
    gamma: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class QLearningEnv(Protocol):
    """Episodic environment over feature vectors and discrete actions."""

    n_actions: int

    def reset(self, rng: random.Random) -> np.ndarray:
        ...

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        ...


class DialogQEnv:
    """Feature-level adapter of the simulated dialog environment.

    Actions are the bare labels; Request/ExplicitConf targets and Offer
    content are resolved from the tracked state with a fixed 0.5 score
    filter.
    """

    def __init__(self, ontology: Ontology, rewards: RewardConfig,
                 schedule: Sequence[float] = DEFAULT_NOISE_SCHEDULE,
                 nbest_size: int = 3, max_turns: int = DEFAULT_MAX_TURNS,
                 patience: int = DEFAULT_PATIENCE,
                 offer_threshold: float = 0.5,
                 action_set: tuple[str, ...] = ACTIONS):
        self.env = SimulatedDialogEnv(ontology, NoiseConfig(0.0, nbest_size),
                                      rewards, max_turns, patience)
        self.schedule = tuple(schedule)
        self.offer_threshold = offer_threshold
        self.action_set = action_set
        self.n_actions = len(action_set)
        self.max_turns = max_turns
        self._state: DialogState | None = None

    def _features(self, state: DialogState) -> np.ndarray:
        return featurize(state, self.env.ontology.slots, self.max_turns)

    def reset(self, rng: random.Random) -> np.ndarray:
        rate = rng.choice(self.schedule)
        self._state = self.env.reset(rng, error_rate=rate)
        return self._features(self._state)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        decision = resolve_action(self.action_set[action], self._state,
                                  offer_threshold=self.offer_threshold)
        self._state, reward, done, _ = self.env.step(decision)
        return self._features(self._state), reward, done


@dataclass
class LinearQPolicy:
    """Per-action linear value model; greedy over the learned weights."""

    weights: np.ndarray  # (actions, features)
    action_set: tuple[str, ...]
    schema_version: str = FEATURE_SCHEMA_VERSION

    def save(self, path: str) -> None:
        from .batch_rl import _save_model
        _save_model(path, "linear_q", self.weights,
                    tuple(str(i) for i in range(self.weights.shape[1])),
                    self.action_set, self.schema_version)

    @classmethod
    def load(cls, path: str) -> "LinearQPolicy":
        from .batch_rl import _load_model
        blob = _load_model(path, "linear_q")
        return cls(blob["payload"], blob["action_set"], blob["schema_version"])

    def q_values(self, features: np.ndarray) -> np.ndarray:
        return self.weights @ features

    def action_index(self, features: np.ndarray) -> int:
        return int(np.argmax(self.q_values(features)))

    def as_dialog_policy(self, offer_threshold: float = 0.5,
                         max_turns: int = DEFAULT_MAX_TURNS) -> Policy:
        def policy(state: DialogState):
            features = featurize(state, state.slots, max_turns)
            label = self.action_set[self.action_index(features)]
            return resolve_action(label, state, offer_threshold=offer_threshold)

        return policy


def train_linear_q(env: QLearningEnv, cfg: LinearQConfig, seed: int,
                   n_features: int | None = None) -> LinearQPolicy:
    """Online epsilon-greedy Q-learning; returns the greedy policy.

    The step size decays as learning_rate / sqrt(episode).  Non-finite
    weights abort with DivergenceDetected.
    """
    master = np.random.default_rng(np.random.SeedSequence([seed]))
    weights: np.ndarray | None = None
    if n_features is not None:
        weights = np.zeros((env.n_actions, n_features))
    action_set = getattr(env, "action_set",
                         tuple(str(i) for i in range(env.n_actions)))
    for episode in range(cfg.episodes):
        alpha = cfg.learning_rate / math.sqrt(episode + 1)
        ep_rng = random.Random(int(master.integers(0, 2 ** 62)))
        obs = env.reset(ep_rng)
        if weights is None:
            weights = np.zeros((env.n_actions, len(obs)))
        done = False
        while not done:
            if master.random() < cfg.epsilon:
                action = int(master.integers(0, env.n_actions))
            else:
                action = int(np.argmax(weights @ obs))
            obs_next, reward, done = env.step(action)
            target = reward if done else reward + cfg.gamma * float(
                np.max(weights @ obs_next))
            weights[action] += alpha * (target - float(weights[action] @ obs)) * obs
            obs = obs_next
        if not np.isfinite(weights).all():
            raise DivergenceDetected(
                f"non-finite weights after episode {episode}; lower the "
                f"learning rate")
    return LinearQPolicy(weights, action_set)
