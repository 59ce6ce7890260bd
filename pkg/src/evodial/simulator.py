"""Agenda-based user simulation for a slot-filling restaurant domain.

The environment couples three pieces: a goal-driven user that informs, denies
and confirms slot values; an act-level SLU noise channel that replaces or
deletes values and fabricates N-best confusions with randomly generated
confidences; and a max-score belief tracker that turns N-best lists into
DialogStates for the policy.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from functools import partial
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from .core import (ACTIONS, DEFAULT_MAX_TURNS, FEATURE_SCHEMA_VERSION,
                   OFFER_CORRECT, OFFER_DUPLICATE, OFFER_WRONG,
                   ActionDecision, DialogAct, DialogState, NBestList,
                   RewardConfig, Transition, discounted_return,
                   feature_names, featurize, resolve_action)
from .dsl import TemplateAst, evaluate_policy

DEFAULT_NOISE_SCHEDULE = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
DEFAULT_PATIENCE = 3

Policy = Callable[[DialogState], ActionDecision]


class PolicyError(Exception):
    def __init__(self, turn: int, cause: BaseException):
        super().__init__(f"policy failed at turn {turn}: {cause!r}")
        self.turn = turn
        self.__cause__ = cause


@dataclass(frozen=True)
class Ontology:
    slots: tuple[str, ...]
    values: dict[str, tuple[str, ...]]


def load_ontology(path: str) -> Ontology:
    with open(path, encoding="utf-8") as fp:
        data = json.load(fp)
    slots = tuple(data["slots"])
    return Ontology(slots, {s: tuple(data["slots"][s]) for s in slots})


def default_ontology() -> Ontology:
    text = resources.files("evodial.data").joinpath("restaurant_ontology.json").read_text()
    data = json.loads(text)
    slots = tuple(data["slots"])
    return Ontology(slots, {s: tuple(data["slots"][s]) for s in slots})


def default_template_text() -> str:
    return resources.files("evodial.data").joinpath("restaurant.policy").read_text()


@dataclass(frozen=True)
class NoiseConfig:
    """SLU channel parameters.

    ``error_rate`` is the probability that the top hypothesis misrepresents
    the true act (split evenly between value replacement and deletion, where
    deletion empties the SLU output for the turn).  Confidences are drawn
    from Beta distributions, one for semantically correct hypotheses and a
    lower one for confusions.
    """

    error_rate: float
    nbest_size: int = 3
    correct_conf: tuple[float, float] = (5.0, 2.0)
    incorrect_conf: tuple[float, float] = (2.0, 5.0)
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("error_rate must lie in [0, 1]")
        if self.nbest_size < 1:
            raise ValueError("nbest_size must be >= 1")


class SluChannel:
    """Applies value replacement/deletion noise and builds N-best lists."""

    def __init__(self, ontology: Ontology, cfg: NoiseConfig):
        self.ontology = ontology
        self.cfg = cfg

    def _confidence(self, correct: bool, rng: random.Random) -> float:
        a, b = self.cfg.correct_conf if correct else self.cfg.incorrect_conf
        return rng.betavariate(a, b)

    def _replace_value(self, act: DialogAct, rng: random.Random) -> DialogAct | None:
        if not act.slot_values:
            return None
        i = rng.randrange(len(act.slot_values))
        slot, value = act.slot_values[i]
        pool = [v for v in self.ontology.values.get(slot, ()) if v != value]
        if not pool:
            return None
        swapped = list(act.slot_values)
        swapped[i] = (slot, rng.choice(pool))
        return DialogAct(act.act, tuple(swapped))

    def corrupt(self, act: DialogAct, rng: random.Random) -> NBestList:
        """Corrupt a true user act into an N-best list.

        With probability ``error_rate`` the top hypothesis is wrong: either
        one value is replaced by a confusable one, or the act is deleted
        outright and the turn yields no SLU result at all.
        """
        if rng.random() < self.cfg.error_rate:
            top = None
            if act.slot_values and rng.random() < 0.5:
                top = self._replace_value(act, rng)
            if top is None:
                return NBestList(())
        else:
            top = act
        top_conf = self._confidence(top.same_semantics(act), rng)
        hyps = [DialogAct(top.act, top.slot_values, top_conf)]
        seen = {(top.act, top.slot_values)}
        attempts = 0
        while len(hyps) < self.cfg.nbest_size and attempts < 4 * self.cfg.nbest_size:
            attempts += 1
            cand = act if rng.random() < 0.4 else self._replace_value(act, rng)
            if cand is None or (cand.act, cand.slot_values) in seen:
                continue
            seen.add((cand.act, cand.slot_values))
            conf = self._confidence(cand.same_semantics(act), rng) * top_conf
            hyps.append(DialogAct(cand.act, cand.slot_values, conf))
        tail = sorted(hyps[1:], key=lambda h: -h.confidence)
        return NBestList(tuple([hyps[0]] + tail))


@dataclass
class UserGoal:
    constraints: dict[str, str]
    satisfied: bool = False


def sample_goal(ontology: Ontology, rng: random.Random) -> UserGoal:
    return UserGoal({s: rng.choice(ontology.values[s]) for s in ontology.slots})


class AgendaUser:
    """Minimal agenda-based user: a stack of pending informs, with responses
    to system acts pushed ahead of them."""

    def __init__(self, goal: UserGoal, rng: random.Random):
        self.goal = goal
        self.rng = rng
        slots = list(goal.constraints)
        rng.shuffle(slots)
        # last item pops first
        self.agenda: list[DialogAct] = [
            DialogAct("inform", ((s, goal.constraints[s]),)) for s in slots]
        self.last_act: DialogAct | None = None

    def _drop_pending(self, slot: str) -> None:
        self.agenda = [a for a in self.agenda
                       if not any(s == slot for s, _ in a.slot_values)]

    def _pop_or_negate(self) -> DialogAct:
        if self.agenda:
            return self.agenda.pop()
        return DialogAct("negate")

    def respond(self, decision: ActionDecision) -> DialogAct:
        act = self._respond(decision)
        self.last_act = act
        return act

    def _respond(self, decision: ActionDecision) -> DialogAct:
        goal = self.goal.constraints
        if decision.act == "Repeat" and self.last_act is not None:
            return self.last_act
        if decision.act == "Request" and decision.slot in goal:
            self._drop_pending(decision.slot)
            return DialogAct("inform", ((decision.slot, goal[decision.slot]),))
        if decision.act == "ExplicitConf" and decision.slot in goal:
            truth = goal[decision.slot]
            if decision.value == truth:
                self._drop_pending(decision.slot)
                return DialogAct("affirm", ((decision.slot, truth),))
            return DialogAct("deny", ((decision.slot, decision.value or ""),))
        if decision.act == "Offer":
            offered = dict(decision.offer_pairs or ())
            if offered == goal:
                self.goal.satisfied = True
                return DialogAct("bye")
            wrong = [s for s in goal if offered.get(s) != goal[s]]
            pending = {s for a in self.agenda for s, _ in a.slot_values}
            for s in wrong:
                if s not in pending:
                    self.agenda.append(DialogAct("inform", ((s, goal[s]),)))
            return self._pop_or_negate()
        return self._pop_or_negate()


class BeliefTracker:
    """Max-score tracker: keeps the best confidence seen per slot value.

    A denial resets the denied slot, an accepted explicit confirmation pins
    the confirmed value to 1.0.
    """

    def __init__(self, ontology: Ontology):
        self.ontology = ontology

    def initial_state(self) -> DialogState:
        return DialogState(slot_beliefs={s: {} for s in self.ontology.slots})

    def update(self, state: DialogState, decision: ActionDecision,
               nbest: NBestList, offer_outcome: str | None = None,
               offered_id: tuple | None = None) -> DialogState:
        beliefs = {s: dict(v) for s, v in state.slot_beliefs.items()}
        denied = None
        top = nbest.top
        if decision.act == "ExplicitConf" and decision.slot is not None and top is not None:
            if top.act == "affirm" and decision.value is not None:
                beliefs[decision.slot][decision.value] = 1.0
            elif top.act == "deny":
                beliefs[decision.slot] = {}
                denied = decision.slot
        for hyp in nbest.hypotheses:
            if hyp.act != "inform":
                continue
            for slot, value in hyp.slot_values:
                if slot in beliefs and hyp.confidence > beliefs[slot].get(value, 0.0):
                    beliefs[slot][value] = hyp.confidence
        offered = state.offered_results
        if offered_id is not None:
            offered = offered | {offered_id}
        return DialogState(
            slot_beliefs=beliefs,
            top_slu_score=top.confidence if top is not None else 0.0,
            slu_empty=nbest.is_empty,
            last_denied_slot=denied,
            require_more_issued=state.require_more_issued or decision.act == "RequireMore",
            offered_results=offered,
            last_offer_outcome=offer_outcome,
            turn_index=state.turn_index + 1,
        )


@dataclass(frozen=True)
class TurnRecord:
    state: DialogState
    decision: ActionDecision
    user_act: DialogAct | None
    nbest: NBestList
    reward: float


@dataclass
class EpisodeLog:
    turns: list[TurnRecord]
    outcome: str  # success | failure | timeout
    discounted_reward: float
    final_state: DialogState
    error_rate: float

    def rewards(self) -> list[float]:
        return [t.reward for t in self.turns]


class SimulatedDialogEnv:
    """Turn-level environment: system decision in, tracked state out."""

    def __init__(self, ontology: Ontology, noise: NoiseConfig,
                 rewards: RewardConfig, max_turns: int = DEFAULT_MAX_TURNS,
                 patience: int | None = DEFAULT_PATIENCE):
        self.ontology = ontology
        self.noise = noise
        self.rewards = rewards
        self.max_turns = max_turns
        self.patience = patience
        self.tracker = BeliefTracker(ontology)
        self.state: DialogState | None = None

    def reset(self, rng: random.Random,
              error_rate: float | None = None) -> DialogState:
        cfg = self.noise if error_rate is None else replace(self.noise,
                                                            error_rate=error_rate)
        self.channel = SluChannel(self.ontology, cfg)
        self.goal = sample_goal(self.ontology, rng)
        self.user = AgendaUser(self.goal, rng)
        self.rng = rng
        self.state = self.tracker.initial_state()
        self._repeats = 0
        return self.state

    def _classify_offer(self, decision: ActionDecision) -> tuple[str, tuple]:
        pairs = tuple(sorted(decision.offer_pairs or ()))
        if dict(pairs) == self.goal.constraints:
            return OFFER_CORRECT, pairs
        if pairs in self.state.offered_results:
            return OFFER_DUPLICATE, pairs
        return OFFER_WRONG, pairs

    def step(self, decision: ActionDecision):
        """Apply a system decision; returns (state, reward, done, info)."""
        reward = self.rewards.per_turn
        outcome = None
        offered_id = None
        if decision.act == "Offer":
            outcome, offered_id = self._classify_offer(decision)
            reward += {OFFER_CORRECT: self.rewards.correct_offer,
                       OFFER_DUPLICATE: self.rewards.duplicate_offer,
                       OFFER_WRONG: self.rewards.wrong_offer}[outcome]
        self._repeats = self._repeats + 1 if decision.act == "Repeat" else 0
        user_act = self.user.respond(decision)
        if outcome == OFFER_CORRECT:
            nbest = NBestList(())  # user hangs up; nothing reaches the SLU
        else:
            nbest = self.channel.corrupt(user_act, self.rng)
        self.state = self.tracker.update(self.state, decision, nbest,
                                         offer_outcome=outcome,
                                         offered_id=offered_id)
        done = False
        episode_outcome = None
        if outcome == OFFER_CORRECT:
            done, episode_outcome = True, "success"
        elif self.patience is not None and self._repeats >= self.patience:
            done, episode_outcome = True, "failure"
        elif self.state.turn_index >= self.max_turns:
            done, episode_outcome = True, "timeout"
        info = {"user_act": user_act, "nbest": nbest, "outcome": episode_outcome}
        return self.state, reward, done, info


def run_episode(policy: Policy, env: SimulatedDialogEnv, rng: random.Random,
                error_rate: float | None = None) -> EpisodeLog:
    """Run one dialog between a policy and the simulated user."""
    state = env.reset(rng, error_rate)
    turns: list[TurnRecord] = []
    rewards: list[float] = []
    while True:
        try:
            decision = policy(state)
        except Exception as exc:
            raise PolicyError(state.turn_index, exc) from exc
        next_state, reward, done, info = env.step(decision)
        turns.append(TurnRecord(state, decision, info["user_act"],
                                info["nbest"], reward))
        rewards.append(reward)
        state = next_state
        if done:
            return EpisodeLog(turns, info["outcome"],
                              discounted_return(rewards, env.rewards.gamma),
                              state, env.channel.cfg.error_rate)


def episode_transitions(log: EpisodeLog, slots: Sequence[str], dialog_id: int,
                        max_turns: int = DEFAULT_MAX_TURNS) -> list[Transition]:
    """Featurize an episode into serialized corpus transitions."""
    out = []
    n = len(log.turns)
    for j, turn in enumerate(log.turns):
        s = featurize(turn.state, slots, max_turns)
        nxt = log.turns[j + 1].state if j + 1 < n else log.final_state
        out.append(Transition(dialog_id, j, s, turn.decision.act,
                              featurize(nxt, slots, max_turns), j == n - 1))
    return out


def template_policy(ast: TemplateAst, params: Sequence[float]) -> Policy:
    return partial(evaluate_policy, ast, np.asarray(params, dtype=np.float64))


def _episode_rng(master: np.random.Generator) -> random.Random:
    return random.Random(int(master.integers(0, 2 ** 62)))


@dataclass
class SimulationFitness:
    """Mean discounted episode return, the online fitness function.

    The noise level is re-sampled per episode from ``schedule``.  Evaluation
    consumes only the generator passed in, so fitness is reproducible per
    (seed, generation, individual) stream.
    """

    ast: TemplateAst
    ontology: Ontology
    rewards: RewardConfig
    n_episodes: int = 16
    schedule: tuple[float, ...] = DEFAULT_NOISE_SCHEDULE
    nbest_size: int = 3
    max_turns: int = DEFAULT_MAX_TURNS
    patience: int = DEFAULT_PATIENCE

    @property
    def n_params(self) -> int:
        return self.ast.param_count

    def evaluate(self, genome: np.ndarray, rng: np.random.Generator) -> float:
        env = SimulatedDialogEnv(
            self.ontology, NoiseConfig(0.0, nbest_size=self.nbest_size),
            self.rewards, self.max_turns, self.patience)
        policy = template_policy(self.ast, genome)
        levels = rng.integers(0, len(self.schedule), size=self.n_episodes)
        total = 0.0
        for i in range(self.n_episodes):
            log = run_episode(policy, env, _episode_rng(rng),
                              error_rate=self.schedule[int(levels[i])])
            total += log.discounted_reward
        return total / self.n_episodes


def fitness_simulation(ast: TemplateAst, params: Sequence[float],
                       n_episodes: int, noise_schedule: Sequence[float],
                       rewards: RewardConfig, seed: int,
                       ontology: Ontology | None = None, **env_kwargs) -> float:
    """One-shot simulation fitness for a bound template (Eq. 1 style mean)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    fitness = SimulationFitness(ast, ontology or default_ontology(), rewards,
                                n_episodes=n_episodes,
                                schedule=tuple(noise_schedule), **env_kwargs)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    return fitness.evaluate(np.asarray(params, dtype=np.float64), rng)


@dataclass
class EvalResult:
    rewards: np.ndarray
    lengths: np.ndarray
    successes: np.ndarray

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())

    @property
    def mean_length(self) -> float:
        return float(self.lengths.mean())

    @property
    def completion_rate(self) -> float:
        return float(self.successes.mean())


def exploring_policy(base: Policy, epsilon: float, rng: random.Random,
                     action_set: Sequence[str],
                     offer_threshold: float = 0.5) -> Policy:
    """Mix a base policy with uniform random actions (behavior-policy noise).

    Used when bootstrapping corpora: a strictly deterministic generator would
    leave the batch learners with no alternative actions to score.
    """

    def policy(state: DialogState) -> ActionDecision:
        if rng.random() < epsilon:
            return resolve_action(rng.choice(list(action_set)), state,
                                  offer_threshold=offer_threshold)
        return base(state)

    return policy


def make_synthetic_corpus(ast: TemplateAst, params: Sequence[float],
                          ontology: Ontology, n_episodes: int, seed: int,
                          rewards: RewardConfig,
                          schedule: Sequence[float] = DEFAULT_NOISE_SCHEDULE,
                          epsilon: float = 0.0, nbest_size: int = 3,
                          max_turns: int = DEFAULT_MAX_TURNS,
                          patience: int = DEFAULT_PATIENCE):
    """Generate a serialized corpus by running a templated behavior policy.

    Returns (header, transitions) ready for corpus_io.save_corpus.
    """
    from .corpus_io import CorpusHeader

    env = SimulatedDialogEnv(ontology, NoiseConfig(0.0, nbest_size=nbest_size),
                             rewards, max_turns, patience)
    base = template_policy(ast, params)
    master = np.random.default_rng(np.random.SeedSequence([seed]))
    levels = master.integers(0, len(schedule), size=n_episodes)
    explore_rng = random.Random(int(master.integers(0, 2 ** 62)))
    policy = exploring_policy(base, epsilon, explore_rng, ACTIONS) if epsilon > 0 \
        else base
    transitions: list[Transition] = []
    for i in range(n_episodes):
        log = run_episode(policy, env, _episode_rng(master),
                          error_rate=schedule[int(levels[i])])
        transitions.extend(episode_transitions(log, ontology.slots, i, max_turns))
    header = CorpusHeader(FEATURE_SCHEMA_VERSION,
                          feature_names(ontology.slots), ACTIONS, rewards)
    return header, transitions


def evaluate_policy_sim(policy: Policy, ontology: Ontology,
                        rewards: RewardConfig, n_episodes: int, seed: int,
                        error_rate: float | None = None,
                        schedule: Sequence[float] = DEFAULT_NOISE_SCHEDULE,
                        nbest_size: int = 3,
                        max_turns: int = DEFAULT_MAX_TURNS,
                        patience: int = DEFAULT_PATIENCE) -> EvalResult:
    """Test a policy over seeded episodes; fixed ``error_rate`` overrides the
    mixed-noise schedule.  Identical seeds yield identical episode streams,
    which pairs the comparison when two policies are tested with one seed."""
    env = SimulatedDialogEnv(ontology, NoiseConfig(0.0, nbest_size=nbest_size),
                             rewards, max_turns, patience)
    master = np.random.default_rng(np.random.SeedSequence([seed]))
    levels = master.integers(0, len(schedule), size=n_episodes)
    rews = np.zeros(n_episodes)
    lens = np.zeros(n_episodes, dtype=np.int64)
    succ = np.zeros(n_episodes, dtype=bool)
    for i in range(n_episodes):
        rate = error_rate if error_rate is not None else schedule[int(levels[i])]
        log = run_episode(policy, env, _episode_rng(master), error_rate=rate)
        rews[i] = log.discounted_reward
        lens[i] = len(log.turns)
        succ[i] = log.outcome == "success"
    return EvalResult(rews, lens, succ)
