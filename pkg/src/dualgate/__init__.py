"""Patch-transformer forecasting with text-routed and series-routed expert mixtures."""
from .analysis import TrendRegime, classify_regime, mk_test
from .data import SyntheticSpec, load_series_csv, make_synthetic, make_windows
from .model import ModelConfig, init_params, model_forward, param_count
from .train import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "TrendRegime", "classify_regime", "mk_test", "SyntheticSpec", "load_series_csv",
    "make_synthetic", "make_windows", "ModelConfig", "init_params", "model_forward",
    "param_count", "Checkpoint", "TrainConfig", "evaluate", "load_checkpoint",
    "save_checkpoint", "train_loop",
]
