"""Option-critic learners with multi-option updates, plus exact analysis oracles."""

__version__ = "0.1.0"

from .agents import ActorCriticAgent, OptionCriticAgent, make_agent
from .env import FourRoomsEnv, MountainCarEnv, TabularMdp, make_env
from .learning import LearnerConfig, RunMetrics
from .options import OptionSet, TransitionRecord, hallway_options

__all__ = ["__version__", "ActorCriticAgent", "OptionCriticAgent", "make_agent", "FourRoomsEnv",
           "MountainCarEnv", "TabularMdp", "make_env", "LearnerConfig", "RunMetrics", "OptionSet",
           "TransitionRecord", "hallway_options"]
