"""HINT image restoration on a small numpy autodiff engine.

The top level re-exports the pieces most callers need; everything else
lives in the submodules.
"""

from .attention import HMHA, HeadPartition, hierarchical_partition, rerank_permutation
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DegradationSpec, degrade, load_image, make_pairs, save_image
from .errors import HintError
from .metrics import MetricReport, psnr, ssim
from .model import HINT, ModelConfig, build_model
from .tensor import Tensor
from .train import TrainConfig, evaluate, grad_check, infer, train

__version__ = "0.1.0"

__all__ = [
    "HINT", "HMHA", "DegradationSpec", "HeadPartition", "HintError", "MetricReport",
    "ModelConfig", "Tensor", "TrainConfig", "build_model", "degrade", "evaluate", "grad_check",
    "hierarchical_partition", "infer", "load_checkpoint", "load_image", "make_pairs", "psnr",
    "rerank_permutation", "save_checkpoint", "save_image", "ssim", "train",
]
