"""Black-box universal domain adaptation at desk scale."""
from .blackbox import InProcessPredictor, PredictionCache, Predictor, RemotePredictor, serve
from .benchgen import BenchmarkSpec, LabelPartition, generate, train_source
from .evaluation import EvalReport, GroundTruth, evaluate, h_score, so_plus_plus
from .model import UNKNOWN, TargetModel, infer, init_model, load_model, save_model
from .trainer import AdaptConfig, adapt, predict

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "BenchmarkSpec", "EvalReport", "GroundTruth", "InProcessPredictor", "LabelPartition",
    "PredictionCache", "Predictor", "RemotePredictor", "TargetModel", "UNKNOWN", "adapt", "evaluate",
    "generate", "h_score", "infer", "init_model", "load_model", "predict", "save_model", "serve",
    "so_plus_plus", "train_source",
]
