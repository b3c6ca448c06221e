"""``bcq-lab`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from bcq_lab import harness
from bcq_lab.batch import empirical_mdp, load_batch, save_batch
from bcq_lab.envs import make_env
from bcq_lab.extrapolation import extrapolation_report
from bcq_lab.harness import ConfigError, ExperimentConfig
from bcq_lab.kbrl import format_demo, two_state_demo
from bcq_lab.mdp import deterministic_policy, evaluate_policy_exact, uniform_policy, value_iteration
from bcq_lab.rng import stream
from bcq_lab.tabular import TabularTrainConfig, extract_bcq_policy, train_tabular


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = config.with_overrides(seeds=(args.seed,))
    return config


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(harness._json_safe(doc), indent=1, sort_keys=True) + "\n")


def cmd_generate_batch(args) -> int:
    config = _config(args)
    for seed in config.seeds:
        batch = harness.generate_scenario_batch(config, seed)
        path = harness.run_dir(args.out, config, seed) / "batch.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_batch(batch, path)
        stats = harness.batch_stats(batch)
        print(f"{path}: {stats['n_transitions']} transitions, policy {stats['policy_tag']}, "
              f"episode return {stats['episode_return_mean']:.3f}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    if args.expert:
        path = Path(config.expert_path) if config.expert_path else Path(args.out) / "expert.json"
        harness.train_expert(config, path)
        print(f"expert checkpoint written to {path}")
        return 0
    for path in harness.run_experiment(config, args.out, workers=args.workers):
        print(path)
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    doc = json.loads(Path(args.checkpoint).read_text())
    seed = config.seeds[0]
    if "format" in doc:
        agent = harness.load_agent(args.checkpoint)
        returns = harness.evaluate_continuous(agent, config.eval_episodes, stream(seed, "eval"))
        result = {"episodes": len(returns), "return_mean": float(returns.mean()), "return_std": float(returns.std()),
                  "returns": returns.tolist()}
    else:
        mdp = make_env(config.env, config.discount).mdp
        policy = deterministic_policy(doc["policy"], mdp.n_actions)
        q = evaluate_policy_exact(mdp, policy)
        result = {"policy": doc["policy"], "return_mean": float(mdp.initial_dist @ (q * policy).sum(axis=1)),
                  "q": q.tolist()}
    print(json.dumps({k: v for k, v in result.items() if k not in ("returns", "q")}, indent=1))
    if args.out:
        _write_json(Path(args.out) / "evaluation.json", result)
    return 0


def _analysis_policy(name: str, mdp, batch, config):
    if name == "optimal":
        return value_iteration(mdp).policy
    if name == "uniform":
        return uniform_policy(mdp)
    if name == "bcql":
        cfg = TabularTrainConfig(iterations=config.total_steps, rng_seed=config.seeds[0], q_init=config.q_init)
        q = train_tabular(batch, cfg, constrained=True, gamma=config.discount).q
        return extract_bcq_policy(q, batch).as_tabular(fill_action=0)
    raise ConfigError(f"unknown policy {name!r}")


def cmd_analyze_extrapolation(args) -> int:
    config = _config(args)
    if not config.tabular:
        raise ConfigError("extrapolation analysis needs a tabular environment")
    mdp = make_env(config.env, config.discount).mdp
    if config.batch_path:
        batch = load_batch(config.batch_path)
    else:
        batch = harness.generate_scenario_batch(config, config.seeds[0])
    policy = _analysis_policy(args.policy, mdp, batch, config)
    report = extrapolation_report(mdp, empirical_mdp(batch, mdp, config.q_init), policy)
    report["policy"] = np.asarray(policy).tolist()
    verdict = report["lemma1"]
    print(f"aggregate extrapolation error {report['aggregate']:.6g}")
    print(f"exact recovery holds: {str(verdict['holds']).lower()} (max divergence {verdict['max_divergence']:.3g}"
          f", worst pair {verdict['worst_pair']})")
    if args.out:
        _write_json(Path(args.out) / "extrapolation.json", report)
    return 0


def cmd_kbrl_demo(args) -> int:
    gamma = ExperimentConfig.load(args.config).discount if args.config else 0.99
    report = two_state_demo(gamma=gamma)
    print(format_demo(report))
    if args.out:
        _write_json(Path(args.out) / "kbrl_demo.json", report)
    return 0


def cmd_report(args) -> int:
    dirs = harness.merge_reports(args.out)
    if not dirs:
        print(f"no metrics found under {args.out}", file=sys.stderr)
        return 1
    for d in dirs:
        print(d / "report.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcq-lab", description="Batch-constrained RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value experiment config")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    add("generate-batch", cmd_generate_batch, "collect the scenario batch", out_required=True)
    p = add("train", cmd_train, "train agents and write metrics", out_required=True)
    p.add_argument("--expert", action="store_true", help="train the imitation expert instead")
    p.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    p = add("evaluate", cmd_evaluate, "evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = add("analyze-extrapolation", cmd_analyze_extrapolation, "extrapolation error of a tabular policy")
    p.add_argument("--policy", default="optimal", choices=("optimal", "uniform", "bcql"))
    add("kbrl-demo", cmd_kbrl_demo, "KBRL versus BCQL on the two-state toy")
    add("report", cmd_report, "merge per-seed metrics", out_required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"bcq-lab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
