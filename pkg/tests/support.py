"""Shared test machinery: grammar-level template generators, enumerable MDP
corpora with exact dynamic-programming oracles, and a robust peak estimator
for heavily skewed samples."""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from evodial.core import RewardConfig, Transition
from evodial.dsl import (ActionSpec, BoolVar, Clause, Comparison, LogicNode,
                         StateSchema, TemplateAst)

# ---------------------------------------------------------------------------
# Random templates over the policy grammar
# ---------------------------------------------------------------------------

@dataclass
class _ParamPool:
    count: int = 0

    def draw(self, rng: random.Random) -> int:
        # new indices are appended, so references always end up dense
        if self.count == 0 or rng.random() < 0.6:
            self.count += 1
            return self.count - 1
        return rng.randrange(self.count)


def random_schema(rng: random.Random) -> StateSchema:
    n_bool = rng.randint(1, 4)
    n_num = rng.randint(1, 4)
    n_act = rng.randint(1, 5)
    return StateSchema(
        tuple(f"flag_{i}" for i in range(n_bool)),
        tuple(f"score_{i}" for i in range(n_num)),
        tuple(f"Act{i}" for i in range(n_act)),
    )


def random_condition(rng: random.Random, schema: StateSchema,
                     pool: _ParamPool, depth: int = 0):
    if depth >= 3 or rng.random() < 0.45:
        if rng.random() < 0.5:
            return BoolVar(rng.choice(schema.bool_vars))
        return Comparison(rng.choice(schema.num_vars),
                          rng.choice(("<", ">", "==")), pool.draw(rng))
    return LogicNode(rng.choice(("and", "or")),
                     random_condition(rng, schema, pool, depth + 1),
                     random_condition(rng, schema, pool, depth + 1))


def random_action(rng: random.Random, schema: StateSchema, pool: _ParamPool,
                  structural: bool) -> ActionSpec:
    label = rng.choice(schema.actions)
    if structural and rng.random() < 0.2:
        return ActionSpec(label, (("filter", pool.draw(rng)),))
    return ActionSpec(label)


def random_template(rng: random.Random, structural: bool = True) -> TemplateAst:
    schema = random_schema(rng)
    pool = _ParamPool()
    clauses = [
        Clause(random_condition(rng, schema, pool),
               random_action(rng, schema, pool, structural))
        for _ in range(rng.randint(0, 5))
    ]
    clauses.append(Clause(None, random_action(rng, schema, pool, structural)))
    return TemplateAst(tuple(clauses), pool.count, schema)


def random_state_columns(rng: np.random.Generator, schema: StateSchema,
                         n: int) -> dict[str, np.ndarray]:
    cols: dict[str, np.ndarray] = {}
    for name in schema.bool_vars:
        cols[name] = rng.random(n) < 0.5
    for name in schema.num_vars:
        cols[name] = rng.random(n)
    return cols


# ---------------------------------------------------------------------------
# Deterministic chain MDP (3 states, 2 actions) with exact oracles
# ---------------------------------------------------------------------------

CHAIN_FEATURES = ("at_s0", "at_s1", "offer_correct", "offer_duplicate",
                  "offer_wrong")
CHAIN_ACTIONS = ("advance", "back")
CHAIN_REWARDS = RewardConfig(per_turn=0.0, correct_offer=10.0,
                             duplicate_offer=0.0, wrong_offer=0.0, gamma=0.9)

_S0 = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
_S1 = np.array([0.0, 1.0, 0.0, 0.0, 0.0])
_S2 = np.array([0.0, 0.0, 1.0, 0.0, 0.0])  # terminal; flag pays +10 on entry


def _chain_episode(dialog_id: int, moves: list[tuple[np.ndarray, str, np.ndarray]]
                   ) -> list[Transition]:
    out = []
    for t, (s, a, s_next) in enumerate(moves):
        out.append(Transition(dialog_id, t, s, a, s_next, t == len(moves) - 1))
    return out


EP_DIRECT = [(_S0, "advance", _S1), (_S1, "advance", _S2)]
EP_STALL0 = [(_S0, "back", _S0), (_S0, "advance", _S1), (_S1, "advance", _S2)]
EP_STALL1 = [(_S0, "advance", _S1), (_S1, "back", _S0), (_S0, "advance", _S1),
             (_S1, "advance", _S2)]


def chain_corpus(n_episodes: int = 200, mixed: bool = True) -> list[Transition]:
    """Episodes of the chain MDP; mixed corpora cover every (state, action)."""
    kinds = (EP_DIRECT, EP_STALL0, EP_STALL1) if mixed else (EP_DIRECT,)
    out: list[Transition] = []
    for i in range(n_episodes):
        out.extend(_chain_episode(i, kinds[i % len(kinds)]))
    return out


def chain_value_iteration(gamma: float = 0.9, iters: int = 200) -> dict:
    """Exact Q* of the chain MDP by dynamic programming (independent oracle)."""
    nxt = {("s0", "advance"): "s1", ("s0", "back"): "s0",
           ("s1", "advance"): "s2", ("s1", "back"): "s0"}
    rew = {("s1", "advance"): 10.0}
    q = {k: 0.0 for k in nxt}
    for _ in range(iters):
        new = {}
        for (s, a), s2 in nxt.items():
            future = 0.0
            if s2 != "s2":
                future = max(q[(s2, b)] for b in ("advance", "back"))
            new[(s, a)] = rew.get((s, a), 0.0) + gamma * future
        q = new
    return q


CHAIN_STATE_VECS = {"s0": _S0, "s1": _S1}


# ---------------------------------------------------------------------------
# Robust peak location for skewed unimodal samples
# ---------------------------------------------------------------------------

def fitted_peak(samples, grid_step: float = 0.005) -> float:
    """Peak of the best-fit two-piece half-normal density on [0, 1].

    The perturbation density is nearly flat on its wide side, so a histogram
    argmax cannot localize the peak at 1e5 samples; the join point of the
    two-branch fit is sharply identified by the steep side instead.  Scales
    and branch weight have closed-form conditional MLEs, leaving a 1-d grid
    search over the join point.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(s)
    cum = np.concatenate([[0.0], np.cumsum(s)])
    cum2 = np.concatenate([[0.0], np.cumsum(s ** 2)])
    best_ll, best_m = -np.inf, None
    for m in np.arange(grid_step, 1.0, grid_step):
        k = int(np.searchsorted(s, m))
        ll = 0.0
        if k > 0:
            a2 = (k * m * m - 2.0 * m * cum[k] + cum2[k]) / k
            if a2 <= 0:
                continue
            ll += k * (np.log(k / n) - 0.5 * np.log(a2))
        if k < n:
            b2 = ((cum2[n] - cum2[k]) - 2.0 * m * (cum[n] - cum[k])
                  + (n - k) * m * m) / (n - k)
            if b2 <= 0:
                continue
            ll += (n - k) * (np.log((n - k) / n) - 0.5 * np.log(b2))
        if ll > best_ll:
            best_ll, best_m = ll, float(m)
    return best_m


@dataclass
class SphereFitness:
    """-(distance to a hidden optimum)^2; exact optimum value is zero."""

    target: np.ndarray

    @property
    def n_params(self) -> int:
        return len(self.target)

    def evaluate(self, genome: np.ndarray, rng) -> float:
        return -float(np.sum((genome - self.target) ** 2))
