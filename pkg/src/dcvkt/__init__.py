"""Joint car choice and usage model: estimation, elasticities and feebate simulation."""

__version__ = "0.1.0"

from .choice import Theta, choice_probabilities, systematic_utility
from .data import DataError, MarketConfig, PreparedDataset, load_config, load_dataset
from .draws import DrawSet, make_drawset
from .estimation import EstimationConfig, EstimationResult, estimate
from .likelihood import wll
from .policy import FleetState, baseline_fleet_state, rebound

__all__ = [
    "DataError", "DrawSet", "EstimationConfig", "EstimationResult", "FleetState",
    "MarketConfig", "PreparedDataset", "Theta", "baseline_fleet_state",
    "choice_probabilities", "estimate", "load_config", "load_dataset", "make_drawset",
    "rebound", "systematic_utility", "wll",
]
