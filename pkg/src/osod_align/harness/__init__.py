from .dataset import DatasetSpec, SceneObject, Proposal, SyntheticDataset, SyntheticScene, generate_dataset
from .detector import ToyDetector, forward, forward_scene, init_detector, predict
from .training import TrainConfig, TrainingDivergedError, train, train_on
from .ablation import ABLATION_CASES, AblationRow, ablate, run_case

__all__ = [
    "DatasetSpec", "SceneObject", "Proposal", "SyntheticDataset", "SyntheticScene", "generate_dataset",
    "ToyDetector", "forward", "forward_scene", "init_detector", "predict",
    "TrainConfig", "TrainingDivergedError", "train", "train_on",
    "ABLATION_CASES", "AblationRow", "ablate", "run_case",
]
