"""Goal misgeneralisation lab on a cell-grid CoinRun-like platformer."""

from misgen.env import (
    Action,
    CauseKind,
    CellClass,
    EnvState,
    Level,
    Monster,
    StepResult,
    initial_state,
    step,
)
from misgen.levels import LevelDistribution, Mode, generate_level, validate_level
from misgen.rollout import Policy, simulate_episode

__version__ = "0.1.0"

from misgen.extrapolate import (  # noqa: E402
    DiverseHeadsClassifier,
    HypothesisPair,
    mutual_information,
    train_diverse_heads,
)
from misgen.harness import EvalReport, detect_misgeneralisation, evaluate, four_agent_report  # noqa: E402
from misgen.ppo import PPOAgent, RewardSource, compute_gae  # noqa: E402

__all__ = [
    "Action",
    "CauseKind",
    "CellClass",
    "DiverseHeadsClassifier",
    "EnvState",
    "EvalReport",
    "HypothesisPair",
    "Level",
    "LevelDistribution",
    "Mode",
    "Monster",
    "PPOAgent",
    "Policy",
    "RewardSource",
    "StepResult",
    "compute_gae",
    "detect_misgeneralisation",
    "evaluate",
    "four_agent_report",
    "generate_level",
    "initial_state",
    "mutual_information",
    "simulate_episode",
    "step",
    "train_diverse_heads",
    "validate_level",
]
