"""evodial: genetic optimization of human-readable dialog policies.

Templates written in a small condition-action language carry free parameters
in [0, 1]; a real-vector genetic algorithm tunes them against either a
simulated noisy user (online) or a serialized dialog corpus through batch
reinforcement learning (offline), and any policy can be scored off-policy on
held-out dialogs.
"""
from .core import (ACTIONS, CORPUS_REWARDS, SIM_REWARDS, ActionDecision,
                   DialogAct, DialogState, NBestList, RewardConfig,
                   Transition, discounted_return, featurize, feature_names,
                   resolve_action, reward)
from .dsl import (ArityMismatch, DanglingElse, MissingStateVariable,
                  StructuralParamForbidden, TemplateAst, TemplateSyntaxError,
                  UnknownIdentifier, ablate, evaluate_policy,
                  evaluate_policy_batch, parse_template, pretty_print)
from .evolution import (FitnessEvaluationFailure, GaConfig, GenerationTrace,
                        Individual, InvalidConfig, crossover, mutate, perturb,
                        run_ga, tournament_select)
from .simulator import (NoiseConfig, Ontology, SimulatedDialogEnv,
                        SimulationFitness, SluChannel, default_ontology,
                        default_template_text, fitness_simulation,
                        load_ontology, make_synthetic_corpus, run_episode,
                        template_policy)
from .batch_rl import (ActionClassifier, CorpusFitness, FittedQConfig,
                       QModel, QValConfig, build_comparison_dms,
                       evaluate_policy_on_corpus, fit_action_classifier,
                       fitted_q_iteration, fitness_npoints, fitness_qval,
                       template_corpus_policy)
from .corpus_io import (CorpusHeader, ResamplePlan, load_corpus,
                        resample_splits, save_corpus)
from .baselines import (HEURISTIC_PARAMS, DialogQEnv, LinearQConfig,
                        LinearQPolicy, rule_based_policy, train_linear_q)

__version__ = "0.1.0"
