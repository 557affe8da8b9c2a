"""Debiased online trajectory anomaly detection on road networks."""

from .detector import CausalTAD, ModelBundle, ScoreSession, TrainConfig, score_full, train
from .experiments import ExperimentReport, SuiteConfig, run_suite
from .metrics import pr_auc, roc_auc
from .road_graph import RoadNetwork, grid_network, shortest_path
from .trajectory import Dataset, SdPair, Trajectory, jaccard, read_dataset, split_dataset, validate, write_dataset
from .world import WorldConfig, generate_world, make_detour, make_switch

__all__ = [
    "CausalTAD", "ModelBundle", "ScoreSession", "TrainConfig", "score_full", "train",
    "RoadNetwork", "grid_network", "shortest_path",
    "Dataset", "SdPair", "Trajectory", "jaccard", "read_dataset", "split_dataset", "validate",
    "write_dataset", "ExperimentReport", "SuiteConfig", "run_suite", "pr_auc", "roc_auc", "WorldConfig", "generate_world", "make_detour", "make_switch",
]
__version__ = "0.1.0"
