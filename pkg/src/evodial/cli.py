"""Command-line experiment runners.

Subcommands reproduce the standard protocols: online GA training against the
simulated user, corpus-side GA training with the batch-RL fitness signals,
policy evaluation (noise sweeps, population sweeps, off-policy corpus
scores), and synthetic corpus generation.  All outputs are CSV or JSON and
byte-stable for a fixed seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, batch_rl, corpus_io, dsl, evolution, simulator
from .core import CORPUS_REWARDS, SIM_REWARDS

EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

_PARSE_ERRORS = (dsl.TemplateError,)
_DATA_ERRORS = (corpus_io.CorpusParseError, corpus_io.SchemaMismatch,
                corpus_io.MissingTerminal, batch_rl.MalformedEpisode,
                batch_rl.ModelSchemaError)
_NUMERIC_ERRORS = (baselines.DivergenceDetected, evolution.FitnessEvaluationFailure)


def _workers() -> int:
    return max(1, int(os.environ.get("EVODIAL_WORKERS", "1")))


def _parse_levels(text: str) -> tuple[float, ...]:
    """Noise levels, either 'a,b,c' or 'lo:hi:step' (inclusive endpoints)."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ValueError("noise step must be positive")
        levels = []
        x = lo
        while x <= hi + 1e-9:
            levels.append(round(x, 10))
            x += step
        return tuple(levels)
    return tuple(float(x) for x in text.split(","))


def _parse_ablate(text: str) -> list[int]:
    ids = []
    for part in text.split(","):
        part = part.strip().lower().lstrip("c")
        ids.append(int(part))
    return ids


def _load_template(path: str, ablate_ids=None):
    source = Path(path).read_text(encoding="utf-8")
    ast = dsl.parse_template(source)
    if ablate_ids:
        ast = dsl.ablate(ast, ablate_ids)
    return ast


def _load_params(path: str) -> np.ndarray:
    with open(path, encoding="utf-8") as fp:
        obj = json.load(fp)
    values = obj["params"] if isinstance(obj, dict) else obj
    return np.asarray(values, dtype=np.float64)


def _load_ontology(args) -> simulator.Ontology:
    if getattr(args, "ontology", None):
        return simulator.load_ontology(args.ontology)
    return simulator.default_ontology()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, headers, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(headers)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _policy_artifact(ast, params, ablate_ids=None) -> str:
    lines = [dsl.pretty_print(ast).rstrip("\n"), "", "# bound parameter values:"]
    for i, value in enumerate(params):
        lines.append(f"# p{i} = {float(value)!r}")
    if ablate_ids:
        lines.append("# disabled clauses: " + ", ".join(f"c{i}" for i in sorted(ablate_ids)))
    return "\n".join(lines) + "\n"


def _ga_config(args) -> evolution.GaConfig:
    return evolution.GaConfig(
        n_pop=args.pop, n_mut=args.n_mut, t_max=args.generations, k=args.k,
        sigma=args.sigma, mu_mut=args.mu_mut, seed=args.seed,
        convergence_window=args.convergence_window)


def _add_ga_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pop", type=int, default=100, help="population size")
    parser.add_argument("--generations", type=int, default=30)
    parser.add_argument("--n-mut", type=int, default=5,
                        help="mutants of the fittest per generation")
    parser.add_argument("--k", type=int, default=3, help="tournament size")
    parser.add_argument("--sigma", type=float, default=2.0,
                        help="perturbation scale")
    parser.add_argument("--mu-mut", type=float, default=0.25,
                        help="per-gene mutation probability")
    parser.add_argument("--convergence-window", type=int, default=None,
                        help="stop after this many generations without "
                             "improvement (default: run all generations)")


def cmd_train_sim(args) -> int:
    ablate_ids = _parse_ablate(args.ablate) if args.ablate else None
    ast = _load_template(args.template, ablate_ids)
    ontology = _load_ontology(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fitness = simulator.SimulationFitness(
        ast, ontology, SIM_REWARDS, n_episodes=args.episodes,
        schedule=_parse_levels(args.noise))
    best, trace = evolution.run_ga(fitness, _ga_config(args), n_workers=_workers())
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fp:
        trace.write_csv(fp)
    _write_json(out / "best_params.json", {
        "params": [float(v) for v in best.genome],
        "fitness": best.fitness,
        "seed": args.seed,
        "ablate": sorted(ablate_ids) if ablate_ids else [],
    })
    (out / "policy.txt").write_text(_policy_artifact(ast, best.genome, ablate_ids),
                                    encoding="utf-8")
    print(f"best fitness {best.fitness:.4f} after {len(trace.rows) - 1} generations")
    return 0


def cmd_train_corpus(args) -> int:
    ast = _load_template(args.template)
    if ast.has_structural_params:
        raise dsl.StructuralParamForbidden(
            "corpus training needs a template without structural action "
            "parameters")
    header, transitions = corpus_io.load_corpus(args.corpus)
    n_dialogs, n_turns = corpus_io.corpus_counts(transitions)
    print(f"corpus: {n_dialogs} dialogs, {n_turns} transitions")
    plan = corpus_io.ResamplePlan(n_rounds=args.resamples, seed=args.seed)
    qv_cfg = batch_rl.QValConfig(delta=args.delta, r_punish=args.punish)
    fq_cfg = batch_rl.FittedQConfig(
        l_max=args.l_max, gamma=header.reward_config.gamma, trees=args.trees,
        n_min=args.n_min, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dm_names = ("GA-NPoints", "GA-QVal", "SL-Original", "SL-MaxQ", "ThresholdedQ")
    scores = {d: {"train": [], "test": []} for d in dm_names}
    chosen = "GA-QVal" if args.fitness == "qval" else "GA-NPoints"
    best_rounds = []
    for r, (train, test) in enumerate(corpus_io.resample_splits(transitions, plan)):
        q = batch_rl.fitted_q_iteration(train, header.feature_names,
                                        header.action_set,
                                        header.reward_config, fq_cfg)
        clf = batch_rl.fit_action_classifier(train, header.feature_names,
                                             header.action_set, fq_cfg)
        train_states = np.stack([t.s for t in train])
        policies = dict(batch_rl.build_comparison_dms(q, clf, qv_cfg))
        params_by_dm = {}
        for mode, name in (("npoints", "GA-NPoints"), ("qval", "GA-QVal")):
            fitness = batch_rl.CorpusFitness(ast, train_states,
                                             header.feature_names, mode, q,
                                             clf, qv_cfg)
            best, _ = evolution.run_ga(fitness, _ga_config(args),
                                       n_workers=_workers())
            policies[name] = batch_rl.template_corpus_policy(
                ast, best.genome, header.feature_names, header.action_set)
            params_by_dm[name] = [float(v) for v in best.genome]
        for name in dm_names:
            for split_name, split in (("train", train), ("test", test)):
                value = batch_rl.evaluate_policy_on_corpus(
                    policies[name], split, header.feature_names,
                    header.action_set, header.reward_config, fq_cfg)
                scores[name][split_name].append(value)
        best_rounds.append({"round": r, "params": params_by_dm[chosen],
                            "test_score": scores[chosen]["test"][-1]})
        print(f"round {r}: {chosen} test score "
              f"{scores[chosen]['test'][-1]:.2f}")
    rows = []
    for name in dm_names:
        tr = np.array(scores[name]["train"])
        te = np.array(scores[name]["test"])
        rows.append([name, float(tr.mean()), float(tr.std()),
                     float(te.mean()), float(te.std())])
    _write_csv(out / "results.csv",
               ["dm", "train_mean", "train_std", "test_mean", "test_std"], rows)
    top = max(best_rounds, key=lambda b: b["test_score"])
    _write_json(out / "best_params.json", {
        "params": top["params"], "fitness_mode": args.fitness,
        "round": top["round"], "test_score": top["test_score"],
        "seed": args.seed})
    (out / "policy.txt").write_text(_policy_artifact(ast, top["params"]),
                                    encoding="utf-8")
    return 0


def _noise_sweep(args, ast, params, ontology, out: Path) -> None:
    policy = simulator.template_policy(ast, params)
    rows = []
    for rate in _parse_levels(args.noise):
        res = simulator.evaluate_policy_sim(
            policy, ontology, SIM_REWARDS, args.episodes, args.seed,
            error_rate=rate)
        rows.append([rate, res.mean_reward, float(res.rewards.std()),
                     res.mean_length, float(res.lengths.std()),
                     res.completion_rate])
    _write_csv(out / "noise_sweep.csv",
               ["error_rate", "mean_reward", "std_reward", "mean_length",
                "std_length", "completion_rate"], rows)


def _pop_sweep(args, ast, ontology, out: Path) -> None:
    pops = [int(x) for x in args.pop_sweep.split(",")]
    rows = []
    for pop in pops:
        train_scores, test_scores = [], []
        for rep in range(args.repeats):
            cfg = evolution.GaConfig(
                n_pop=pop, n_mut=min(args.n_mut, max(0, pop - 1)),
                t_max=args.generations, k=min(args.k, pop), sigma=args.sigma,
                mu_mut=args.mu_mut, seed=args.seed + rep,
                convergence_window=args.convergence_window)
            fitness = simulator.SimulationFitness(
                ast, ontology, SIM_REWARDS, n_episodes=args.episodes,
                schedule=_parse_levels(args.noise))
            best, _ = evolution.run_ga(fitness, cfg, n_workers=_workers())
            policy = simulator.template_policy(ast, best.genome)
            res = simulator.evaluate_policy_sim(
                policy, ontology, SIM_REWARDS, args.test_episodes,
                args.seed + rep, schedule=_parse_levels(args.noise))
            train_scores.append(best.fitness)
            test_scores.append(res.mean_reward)
        tr, te = np.array(train_scores), np.array(test_scores)
        rows.append([pop, float(tr.mean()), float(tr.std()),
                     float(te.mean()), float(te.std())])
    _write_csv(out / "pop_sweep.csv",
               ["pop", "train_mean", "train_std", "test_mean", "test_std"], rows)


def cmd_evaluate(args) -> int:
    ast = _load_template(args.template,
                         _parse_ablate(args.ablate) if args.ablate else None)
    ontology = _load_ontology(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pop_sweep:
        _pop_sweep(args, ast, ontology, out)
        return 0
    if not args.params:
        raise ValueError("--params is required unless --pop-sweep is given")
    params = _load_params(args.params)
    if args.corpus:
        header, transitions = corpus_io.load_corpus(args.corpus)
        cfg = batch_rl.FittedQConfig(
            l_max=args.l_max, gamma=header.reward_config.gamma,
            trees=args.trees, n_min=args.n_min, seed=args.seed)
        policy = batch_rl.template_corpus_policy(
            ast, params, header.feature_names, header.action_set)
        score = batch_rl.evaluate_policy_on_corpus(
            policy, transitions, header.feature_names, header.action_set,
            header.reward_config, cfg)
        _write_csv(out / "corpus_eval.csv", ["policy", "score"],
                   [["template", score]])
        print(f"estimated starting-turn value: {score:.3f}")
        return 0
    _noise_sweep(args, ast, params, ontology, out)
    return 0


def cmd_make_corpus(args) -> int:
    ast = _load_template(args.template)
    params = _load_params(args.params) if args.params \
        else np.asarray(baselines.HEURISTIC_PARAMS)
    ontology = _load_ontology(args)
    rewards = CORPUS_REWARDS if args.rewards == "corpus" else SIM_REWARDS
    header, transitions = simulator.make_synthetic_corpus(
        ast, params, ontology, args.episodes, args.seed, rewards,
        schedule=_parse_levels(args.noise), epsilon=args.epsilon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus_io.save_corpus(str(out), header, transitions)
    n_dialogs, n_turns = corpus_io.corpus_counts(transitions)
    print(f"wrote {n_dialogs} dialogs / {n_turns} transitions to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evodial",
        description="Genetic optimization of templated dialog policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-sim", help="optimize a template against the "
                                         "simulated user")
    p.add_argument("--template", required=True)
    p.add_argument("--ontology")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--episodes", type=int, default=16,
                   help="episodes per fitness evaluation")
    p.add_argument("--noise", default="0.0:0.6:0.1",
                   help="noise schedule, 'a,b,c' or 'lo:hi:step'")
    p.add_argument("--ablate", help="disable clauses, e.g. 'c4' or 'c3,c4'")
    _add_ga_flags(p)
    p.set_defaults(func=cmd_train_sim)

    p = sub.add_parser("train-corpus", help="optimize a template against a "
                                            "dialog corpus")
    p.add_argument("--template", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fitness", choices=("npoints", "qval"), default="qval")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--punish", type=float, default=-100.0)
    p.add_argument("--resamples", type=int, default=12)
    p.add_argument("--l-max", type=int, default=20)
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--n-min", type=int, default=5)
    _add_ga_flags(p)
    p.set_defaults(func=cmd_train_corpus)

    p = sub.add_parser("evaluate", help="noise sweeps, population sweeps and "
                                        "off-policy corpus scores")
    p.add_argument("--template", required=True)
    p.add_argument("--params", help="JSON file with the bound parameters")
    p.add_argument("--ontology")
    p.add_argument("--corpus", help="score the policy on this corpus instead "
                                    "of running simulations")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--test-episodes", type=int, default=1000)
    p.add_argument("--noise", default="0.0:0.6:0.1")
    p.add_argument("--ablate")
    p.add_argument("--pop-sweep", help="comma list of population sizes to "
                                       "train and test")
    p.add_argument("--repeats", type=int, default=5,
                   help="seeded repetitions per sweep point")
    p.add_argument("--l-max", type=int, default=20)
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--n-min", type=int, default=5)
    _add_ga_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-corpus", help="bootstrap a synthetic corpus from "
                                           "a templated behavior policy")
    p.add_argument("--template", required=True)
    p.add_argument("--params")
    p.add_argument("--ontology")
    p.add_argument("--out", required=True, help="corpus file to write")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--noise", default="0.0:0.6:0.1")
    p.add_argument("--epsilon", type=float, default=0.25,
                   help="behavior-policy exploration rate")
    p.add_argument("--rewards", choices=("sim", "corpus"), default="corpus")
    p.set_defaults(func=cmd_make_corpus)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except dsl.StructuralParamForbidden as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (evolution.InvalidConfig, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
