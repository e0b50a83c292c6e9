"""Eye-region semantic segmentation with a compact dense encoder-decoder, written on NumPy."""
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from .kernels import BACKEND as KERNEL_BACKEND
from .losses import LossWeights, ScheduleConfig, schedule, total_loss
from .metrics import ScoreReport, overall_score, score_predictions
from .model import RITnet, build_model, count_parameters, forward
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "KERNEL_BACKEND",
    "LossWeights",
    "RITnet",
    "ScheduleConfig",
    "ScoreReport",
    "Tape",
    "Tensor",
    "build_model",
    "count_parameters",
    "forward",
    "load_checkpoint",
    "overall_score",
    "read_checkpoint",
    "save_checkpoint",
    "schedule",
    "score_predictions",
    "total_loss",
]
