"""``misgen`` command line: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 contract or I/O error, 2 gate failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from misgen._validation import ContractViolation, GateFailure

EXIT_OK, EXIT_ERROR, EXIT_GATE = 0, 1, 2


def _common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--out", type=Path, default=Path("."), help=out_help)
    p.add_argument("--manifest", type=Path, default=None,
                   help="run manifest to update (default: OUT/manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write one level in MGL1 format")
    _common(p, "output level file")
    p.add_argument("--mode", choices=("train", "test"), default="train")

    p = sub.add_parser("train", help="train the standard agent on coin-at-right levels")
    _common(p)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("explore", help="collect unlabeled transitions on randomised-coin levels")
    _common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("collect", help="collect labeled transitions with a trained policy")
    _common(p)
    p.add_argument("--policy", type=Path, default=None, help="policy checkpoint (default OUT/standard.json)")
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("extrapolate", help="train the two diversified reward heads")
    _common(p)

    p = sub.add_parser("disambiguate", help="render indicative frames and record the hypothesis bit")
    _common(p)
    p.add_argument("--pair", type=Path, default=None)
    p.add_argument("--unlabeled", type=Path, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--bit", type=int, choices=(0, 1), default=None,
                   help="skip the interactive prompt")

    p = sub.add_parser("finetune", help="fine-tune the standard agent with a learned reward")
    _common(p)
    p.add_argument("--prudent", action="store_true", help="use the average of both heads")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate one policy")
    _common(p, "output JSON file")
    p.add_argument("--policy", required=True,
                   help="checkpoint path, or one of baseline, baseline-cycle, coin-seeker, always-right")
    p.add_argument("--mode", choices=("train", "test"), default="test")
    p.add_argument("--n-levels", type=int, default=None)

    p = sub.add_parser("report", help="four-agent comparison on shared randomised-coin seeds")
    _common(p)
    p.add_argument("--n-levels", type=int, default=None)
    p.add_argument("--plot-data", type=Path, default=None)
    p.add_argument("--fixed-cycle", action="store_true", help="cyclic instead of random baseline")

    p = sub.add_parser("play", help="render an episode as numbered PGM frames plus an action log")
    _common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--level", type=Path, default=None, help="MGL1 file (default: generate from --seed)")
    p.add_argument("--mode", choices=("train", "test"), default="test")

    p = sub.add_parser("detect", help="misgeneralisation verdict for one policy")
    _common(p, "output JSON file")
    p.add_argument("--policy", required=True)
    p.add_argument("--n-levels", type=int, default=None)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)
    p.add_argument("--bit", type=int, choices=(0, 1), default=None)
    return parser


def _config(args):
    from misgen.pipeline import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _manifest(args, cfg):
    from misgen.pipeline import RunManifest
    path = args.manifest or (args.out / "manifest.json")
    if path.exists():
        m = RunManifest.load(path)
    else:
        m = RunManifest(cfg.snapshot(), cfg.seed)
    return m, path


def _policy(spec: str):
    from misgen.policies import AlwaysRightPolicy, BaselinePolicy, CoinSeekerPolicy
    from misgen.ppo import PPOAgent
    named = {"baseline": BaselinePolicy, "coin-seeker": CoinSeekerPolicy,
             "always-right": AlwaysRightPolicy,
             "baseline-cycle": lambda: BaselinePolicy(cycle=True)}
    if spec in named:
        return named[spec]()
    return PPOAgent.load(spec)


def _cmd_gen(args, cfg):
    from misgen.levels import Mode, generate_level
    mode = Mode.TRAIN_RIGHT if args.mode == "train" else Mode.TEST_RANDOM
    level = generate_level(cfg.levels.distribution(mode), cfg.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    level.save(args.out)
    print(args.out)


def _stage(args, cfg, name, run, inputs=(), outputs=()):
    from misgen.pipeline import ARTIFACTS
    args.out.mkdir(parents=True, exist_ok=True)
    result = run()
    manifest, path = _manifest(args, cfg)
    a = {k: args.out / v for k, v in ARTIFACTS.items()}
    manifest.record(name, inputs=[a[k] if k in a else k for k in inputs],
                    outputs=[a[k] if k in a else k for k in outputs])
    manifest.write(path)
    return result


def _cmd_train(args, cfg):
    from misgen.pipeline import stage_train
    if args.steps is not None:
        cfg.train.total_steps = args.steps
    _stage(args, cfg, "train", lambda: stage_train(cfg, args.out),
           outputs=["standard", args.out / "standard.bin", "train_log"])


def _cmd_explore(args, cfg):
    from misgen.pipeline import stage_explore
    if args.episodes is not None:
        cfg.explore.episodes = args.episodes
    if args.steps is not None:
        cfg.explore.steps = args.steps
    data = _stage(args, cfg, "explore", lambda: stage_explore(cfg, args.out), outputs=["unlabeled"])
    print(f"{len(data)} unlabeled transitions")


def _cmd_collect(args, cfg):
    from misgen.pipeline import stage_collect
    if args.episodes is not None:
        cfg.collect.episodes = args.episodes
    policy = _policy(str(args.policy)) if args.policy else None
    data = _stage(args, cfg, "collect", lambda: stage_collect(cfg, args.out, policy),
                  outputs=["labeled"])
    print(f"{data.n_positive} positives, {len(data) - data.n_positive} negatives")


def _cmd_extrapolate(args, cfg):
    from misgen.pipeline import stage_extrapolate
    pair = _stage(args, cfg, "extrapolate", lambda: stage_extrapolate(cfg, args.out),
                  inputs=["labeled", "unlabeled"], outputs=["pair", args.out / "pair.bin"])
    print(json.dumps({k: pair.metadata[k] for k in ("holdout_accuracy", "unlabeled_disagreement")}))


def _cmd_disambiguate(args, cfg):
    from misgen.disambiguate import indicative_frames, render_panel, select_hypothesis, write_manifest
    from misgen.extrapolate import HypothesisPair, read_dataset
    pair_path = args.pair or args.out / "pair.json"
    unl_path = args.unlabeled or args.out / "unlabeled.jsonl"
    k = args.k or cfg.disambiguate.k

    def run():
        pair = HypothesisPair.load(pair_path)
        unlabeled = read_dataset(unl_path)
        panel = render_panel(indicative_frames(pair, unlabeled, k), unlabeled, args.out / "panel")
        for h in (0, 1):
            print(f"head {h}: " + " ".join(panel.paths[h]))
        _, manifest = select_hypothesis(pair, panel, args.bit)
        write_manifest(args.out / "choice.json", manifest)
        return manifest

    manifest = _stage(args, cfg, "disambiguate", run, inputs=[pair_path, unl_path],
                      outputs=["choice"])
    run_manifest, path = _manifest(args, cfg)
    run_manifest.hypothesis_choice = {k: manifest[k] for k in ("bit", "source", "input", "timestamp")}
    run_manifest.write(path)
    print(f"selected {manifest['source']}")


def _cmd_finetune(args, cfg):
    from misgen.pipeline import stage_finetune
    if args.steps is not None:
        cfg.finetune.total_steps = args.steps
    name = "prudent" if args.prudent else "ace"
    _stage(args, cfg, f"finetune-{name}", lambda: stage_finetune(cfg, args.out, args.prudent),
           inputs=["standard", "pair"] + ([] if args.prudent else ["choice"]),
           outputs=[name, args.out / f"{name}.bin", f"{name}_log"])


def _cmd_eval(args, cfg):
    from misgen.harness import evaluate
    from misgen.levels import Mode
    mode = Mode.TRAIN_RIGHT if args.mode == "train" else Mode.TEST_RANDOM
    n = args.n_levels or (cfg.eval.n_levels if mode is Mode.TEST_RANDOM else cfg.eval.train_levels)
    report = evaluate(_policy(args.policy), cfg.levels.distribution(mode), n,
                      rng_seed=cfg.eval.rng_seed, policy_id=str(args.policy))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    _write_or_print(args.out, text)


def _write_or_print(out: Path, text: str):
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(out)
    else:
        sys.stdout.write(text)


def _cmd_report(args, cfg):
    from misgen.harness import four_agent_report
    from misgen.levels import Mode
    from misgen.pipeline import load_agents
    n = args.n_levels or cfg.eval.n_levels

    def run():
        report = four_agent_report(load_agents(args.out, args.fixed_cycle), n,
                                   cfg.levels.distribution(Mode.TEST_RANDOM),
                                   rng_seed=cfg.eval.rng_seed)
        report.write(args.out / "report", plot_data=args.plot_data)
        return report

    report = _stage(args, cfg, "report", run, inputs=["standard", "prudent", "ace"],
                    outputs=[args.out / "report" / "report.json", args.out / "report" / "report.csv"])
    sys.stdout.write(report.to_csv())


def _cmd_play(args, cfg):
    from misgen.env import Action, Level
    from misgen.levels import Mode, generate_level
    from misgen.obs import make_observation, observation_to_pgm, write_pgm
    from misgen.rollout import simulate_episode
    mode = Mode.TRAIN_RIGHT if args.mode == "train" else Mode.TEST_RANDOM
    level = Level.load(args.level) if args.level else generate_level(
        cfg.levels.distribution(mode), cfg.seed)
    traj = simulate_episode(_policy(args.policy), level, rng_seed=cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    lines = []
    prev = traj.records[0].frame
    prev_action = Action.NOOP
    for i, rec in enumerate(traj.records):
        write_pgm(args.out / f"frame_{i:04d}.pgm",
                  observation_to_pgm(make_observation(prev, rec.frame, prev_action)))
        lines.append(f"{i}\t{Action(rec.action).name}\t{rec.cause.name}")
        prev, prev_action = rec.frame, rec.action
    (args.out / "actions.tsv").write_text("t\taction\tcause\n" + "\n".join(lines) + "\n")
    print(f"{len(traj.records)} frames in {args.out}")


def _cmd_detect(args, cfg):
    from misgen.harness import detect_misgeneralisation
    n = args.n_levels or cfg.eval.train_levels
    verdict = detect_misgeneralisation(_policy(args.policy), n, cfg.levels.distribution(),
                                       rng_seed=cfg.eval.rng_seed)
    _write_or_print(args.out, json.dumps(verdict.to_dict(), indent=2, sort_keys=True) + "\n")


def _cmd_pipeline(args, cfg):
    from misgen.pipeline import run_pipeline
    manifest = run_pipeline(cfg, args.out, bit=args.bit)
    if args.manifest:
        manifest.write(args.manifest)
    sys.stdout.write((args.out / "report" / "report.csv").read_text())


COMMANDS = {
    "gen": _cmd_gen, "train": _cmd_train, "explore": _cmd_explore, "collect": _cmd_collect,
    "extrapolate": _cmd_extrapolate, "disambiguate": _cmd_disambiguate,
    "finetune": _cmd_finetune, "eval": _cmd_eval, "report": _cmd_report, "play": _cmd_play,
    "detect": _cmd_detect, "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (ContractViolation, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
