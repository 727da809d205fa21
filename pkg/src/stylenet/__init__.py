"""Style-based image classification toolkit.

Three architectures that read appearance rather than layout (truncated
residual net, Gram-matrix attention, multi-patch), plus the machinery to
study them: reverse-mode autodiff, receptive-field arithmetic, evolutionary
configuration search, a synthetic style-transform corpus, training and
evaluation, Grad-CAM, and exact t-SNE.
"""

from .autodiff import Tape, Tensor
from .dataset import Dataset, SynthConfig, generate, load_dataset
from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     StyleNetError, UsageError)
from .evo import Genome, SearchResult, evolve
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .interpret import Heatmap, Projection, grad_cam, tsne
from .models import ArchConfig, Model, build_model, default_config, gram
from .receptive import (LayerGeom, ReceptiveField, is_disjoint,
                        probe_footprint, receptive_field)
from .training import EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "DataError", "Dataset", "EvalReport",
    "Genome", "Heatmap", "LayerGeom", "Model", "NumericError", "Projection",
    "ReceptiveField", "SearchResult", "ShapeError", "StyleNetError",
    "SynthConfig", "Tape", "Tensor", "TrainConfig", "UsageError",
    "build_model", "default_config", "evaluate", "evolve", "generate",
    "grad_cam", "grad_check", "gram", "is_disjoint", "load_checkpoint",
    "load_dataset", "probe_footprint", "receptive_field", "save_checkpoint",
    "train", "tsne",
]
