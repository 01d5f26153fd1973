"""Config file, pipeline stages and the run manifest.

Every stage reads and writes files in a work directory so the CLI can run
stages one at a time and ``run_pipeline`` can chain them.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from misgen import __version__
from misgen.disambiguate import indicative_frames, render_panel, select_hypothesis, write_manifest
from misgen.extrapolate import (HypothesisPair, collect_labeled, collect_unlabeled, read_dataset,
                                train_diverse_heads, write_dataset)
from misgen.harness import FourAgentReport, detect_misgeneralisation, four_agent_report
from misgen.levels import LevelDistribution, Mode
from misgen.policies import BaselinePolicy, CoinSeekerPolicy
from misgen.ppo import PPOAgent, RewardSource

log = logging.getLogger(__name__)


@dataclass
class LevelsConfig:
    width: int = 48
    height: int = 16
    obstacle_density: float = 0.08
    monster_min: int = 0
    monster_max: int = 1
    platform_density: float = 0.9

    def distribution(self, mode=Mode.TRAIN_RIGHT) -> LevelDistribution:
        return LevelDistribution(Mode(mode), self.width, self.height, self.obstacle_density,
                                 (self.monster_min, self.monster_max), self.platform_density)


@dataclass
class TrainConfig:
    total_steps: int = 1_500_000
    n_envs: int = 8
    horizon: int = 256
    lr: float = 3e-4
    epochs: int = 4
    minibatch: int = 256
    entropy_coef: float = 0.01
    probe_every: int = 5
    probe_levels: int = 128


@dataclass
class CollectConfig:
    episodes: int = 400
    neg_per_pos: int = 10


@dataclass
class ExploreConfig:
    episodes: int = 50
    steps: int = 50


@dataclass
class ExtrapolateConfig:
    lambda_mi: float = 10.0
    epochs: int = 50
    batch_size: int = 128
    unlabeled_batch_size: int = 128
    lr: float = 1e-3


@dataclass
class DisambiguateConfig:
    k: int = 4
    bit: int = 1


@dataclass
class FinetuneConfig:
    total_steps: int = 500_000
    lr: float = 3e-4
    entropy_coef: float = 0.01


@dataclass
class EvalConfig:
    n_levels: int = 5000
    train_levels: int = 1000
    rng_seed: int = 0


@dataclass
class PipelineConfig:
    seed: int = 0
    levels: LevelsConfig = field(default_factory=LevelsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    extrapolate: ExtrapolateConfig = field(default_factory=ExtrapolateConfig)
    disambiguate: DisambiguateConfig = field(default_factory=DisambiguateConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("levels", "train", "collect", "explore", "extrapolate", "disambiguate",
                "finetune", "eval")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            parser[name] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, dotted: str, value) -> None:
        """Set ``section.key`` (or ``seed``); string values are parsed like INI values."""
        section, _, key = dotted.partition(".")
        target, name = (self, section) if not key else (getattr(self, section), key)
        if not hasattr(target, name):
            raise ValueError(f"unknown config key {dotted!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(current, value) if isinstance(value, str) else type(current)(value))


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Parse an INI file; unknown sections or keys are errors."""
    cfg = PipelineConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    else:
        with open(path) as fh:
            parser.read_file(fh)
    for section in parser.sections():
        if section == "run":
            for key, value in parser[section].items():
                if key != "seed":
                    raise ValueError(f"unknown key [run] {key}")
                cfg.seed = int(value)
            continue
        if section not in PipelineConfig.SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(target)}
        for key, value in parser[section].items():
            if key not in names:
                raise ValueError(f"unknown key [{section}] {key}")
            setattr(target, key, _coerce(getattr(target, key), value))
    return cfg


def _coerce(current, text: str):
    text = text.strip()
    if isinstance(current, int):
        value = float(text)      # accepts 1e6 and 1_000_000
        if value != int(value):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(value)
    return type(current)(text)


# -- manifest -------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    version: str = __version__
    stages: list[dict] = field(default_factory=list)
    hypothesis_choice: dict | None = None

    def record(self, stage: str, inputs=(), outputs=(), **extra) -> dict:
        entry = {"stage": stage,
                 "inputs": {Path(p).name: sha256_file(p) for p in inputs},
                 "outputs": {Path(p).name: sha256_file(p) for p in outputs}}
        entry.update(extra)
        self.stages = [s for s in self.stages if s["stage"] != stage] + [entry]
        return entry

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# -- stages -----------------------------------------------------------------------


ARTIFACTS = {
    "standard": "standard.json", "train_log": "train_log.csv",
    "unlabeled": "unlabeled.jsonl", "labeled": "labeled.jsonl", "pair": "pair.json",
    "panel": "panel", "choice": "choice.json",
    "ace": "ace.json", "ace_log": "ace_log.csv", "prudent": "prudent.json",
    "prudent_log": "prudent_log.csv", "report": "report", "plot_data": "plot_data.csv",
    "verdicts": "verdicts.json", "manifest": "manifest.json",
}


def _agent_params(cfg: PipelineConfig, section) -> dict:
    t = cfg.train
    return dict(n_envs=t.n_envs, horizon=t.horizon, lr=section.lr, epochs=t.epochs,
                minibatch=t.minibatch, entropy_coef=section.entropy_coef,
                probe_every=t.probe_every, probe_levels=t.probe_levels, seed=cfg.seed)


def stage_train(cfg: PipelineConfig, work: Path) -> PPOAgent:
    agent = PPOAgent(total_steps=cfg.train.total_steps, **_agent_params(cfg, cfg.train))
    agent.fit(cfg.levels.distribution(Mode.TRAIN_RIGHT), RewardSource.env_true(),
              log_path=work / ARTIFACTS["train_log"])
    agent.save(work / ARTIFACTS["standard"])
    return agent


def stage_explore(cfg: PipelineConfig, work: Path):
    data = collect_unlabeled(cfg.levels.distribution(Mode.TEST_RANDOM), cfg.explore.episodes,
                             cfg.explore.steps, BaselinePolicy(), seed=cfg.seed)
    write_dataset(work / ARTIFACTS["unlabeled"], data)
    return data


def stage_collect(cfg: PipelineConfig, work: Path, policy=None):
    policy = policy or PPOAgent.load(work / ARTIFACTS["standard"])
    data = collect_labeled(policy, cfg.levels.distribution(Mode.TRAIN_RIGHT),
                           cfg.collect.episodes, cfg.collect.neg_per_pos, seed=cfg.seed)
    write_dataset(work / ARTIFACTS["labeled"], data)
    return data


def stage_extrapolate(cfg: PipelineConfig, work: Path) -> HypothesisPair:
    labeled = read_dataset(work / ARTIFACTS["labeled"])
    unlabeled = read_dataset(work / ARTIFACTS["unlabeled"])
    e = cfg.extrapolate
    pair = train_diverse_heads(labeled, unlabeled, e.lambda_mi, seed=cfg.seed,
                               hyper={"epochs": e.epochs, "batch_size": e.batch_size,
                                      "unlabeled_batch_size": e.unlabeled_batch_size, "lr": e.lr})
    pair.save(work / ARTIFACTS["pair"])
    return pair


def stage_disambiguate(cfg: PipelineConfig, work: Path, bit: int | None = None,
                       timestamp: str | None = None) -> dict:
    pair = HypothesisPair.load(work / ARTIFACTS["pair"])
    unlabeled = read_dataset(work / ARTIFACTS["unlabeled"])
    panel = render_panel(indicative_frames(pair, unlabeled, cfg.disambiguate.k), unlabeled,
                         work / ARTIFACTS["panel"])
    _, manifest = select_hypothesis(pair, panel, bit, timestamp=timestamp)
    write_manifest(work / ARTIFACTS["choice"], manifest)
    return manifest


def _reward_from_choice(work: Path, prudent: bool) -> RewardSource:
    pair = HypothesisPair.load(work / ARTIFACTS["pair"])
    if prudent:
        return RewardSource.prudent(pair)
    choice = json.loads((work / ARTIFACTS["choice"]).read_text())
    return RewardSource.model(pair, int(choice["bit"]))


def stage_finetune(cfg: PipelineConfig, work: Path, prudent: bool = False) -> PPOAgent:
    standard = PPOAgent.load(work / ARTIFACTS["standard"])
    source = _reward_from_choice(work, prudent)
    name = "prudent" if prudent else "ace"
    agent = PPOAgent(total_steps=cfg.finetune.total_steps, **_agent_params(cfg, cfg.finetune))
    agent.fit(cfg.levels.distribution(Mode.TEST_RANDOM), source, init=standard.net_,
              log_path=work / ARTIFACTS[f"{name}_log"])
    agent.save(work / ARTIFACTS[name])
    return agent


def load_agents(work: Path, fixed_cycle: bool = False) -> dict:
    return {"baseline": BaselinePolicy(cycle=fixed_cycle),
            "standard": PPOAgent.load(work / ARTIFACTS["standard"]),
            "prudent": PPOAgent.load(work / ARTIFACTS["prudent"]),
            "ace": PPOAgent.load(work / ARTIFACTS["ace"])}


def stage_eval(cfg: PipelineConfig, work: Path) -> FourAgentReport:
    report = four_agent_report(load_agents(work), cfg.eval.n_levels,
                               cfg.levels.distribution(Mode.TEST_RANDOM),
                               rng_seed=cfg.eval.rng_seed)
    report.write(work / ARTIFACTS["report"], plot_data=work / ARTIFACTS["plot_data"])
    return report


def stage_detect(cfg: PipelineConfig, work: Path) -> dict:
    dist = cfg.levels.distribution()
    agents = {"standard": PPOAgent.load(work / ARTIFACTS["standard"]),
              "ace": PPOAgent.load(work / ARTIFACTS["ace"]),
              "coin_seeker": CoinSeekerPolicy()}
    verdicts = {name: detect_misgeneralisation(p, cfg.eval.train_levels, dist,
                                               rng_seed=cfg.eval.rng_seed).to_dict()
                for name, p in agents.items()}
    (work / ARTIFACTS["verdicts"]).write_text(json.dumps(verdicts, indent=2, sort_keys=True) + "\n")
    return verdicts


def run_pipeline(cfg: PipelineConfig, workdir, bit: int | None = None,
                 timestamp: str | None = None, on_stage=None) -> RunManifest:
    """train, explore, collect, extrapolate, disambiguate, finetune, eval, detect.

    ``on_stage(name)`` is called after each stage finishes.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    a = {k: work / v for k, v in ARTIFACTS.items()}
    manifest = RunManifest(cfg.snapshot(), cfg.seed)
    bit = cfg.disambiguate.bit if bit is None else bit

    def run(name, fn, *args, inputs=(), outputs=(), **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        seconds = time.perf_counter() - t0
        log.info("stage %s done in %.1fs", name, seconds)
        manifest.record(name, inputs=inputs, outputs=outputs, seconds=round(seconds, 3))
        if on_stage is not None:
            on_stage(name)
        return out

    bin_of = lambda name: a[name].with_suffix(".bin")  # noqa: E731
    run("train", stage_train, cfg, work,
        outputs=[a["standard"], bin_of("standard"), a["train_log"]])
    run("explore", stage_explore, cfg, work, outputs=[a["unlabeled"]])
    run("collect", stage_collect, cfg, work, inputs=[a["standard"]], outputs=[a["labeled"]])
    run("extrapolate", stage_extrapolate, cfg, work, inputs=[a["labeled"], a["unlabeled"]],
        outputs=[a["pair"], bin_of("pair")])
    choice = run("disambiguate", stage_disambiguate, cfg, work, bit, timestamp,
                 inputs=[a["pair"], a["unlabeled"]], outputs=[a["choice"]])
    manifest.hypothesis_choice = {k: choice[k] for k in ("bit", "source", "input", "timestamp")}
    run("finetune", stage_finetune, cfg, work, inputs=[a["standard"], a["pair"], a["choice"]],
        outputs=[a["ace"], bin_of("ace"), a["ace_log"]])
    run("finetune-prudent", stage_finetune, cfg, work, prudent=True,
        inputs=[a["standard"], a["pair"]],
        outputs=[a["prudent"], bin_of("prudent"), a["prudent_log"]])
    run("eval", stage_eval, cfg, work, inputs=[a["standard"], a["prudent"], a["ace"]],
        outputs=[a["report"] / "report.json", a["report"] / "report.csv", a["plot_data"]])
    run("detect", stage_detect, cfg, work, inputs=[a["standard"], a["ace"]],
        outputs=[a["verdicts"]])
    manifest.write(a["manifest"])
    return manifest
