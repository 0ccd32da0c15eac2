"""Joint training of big networks with tiny hash-projected students."""

__version__ = "0.1.0"

from .backend import BACKEND, USING_NUMBA
from .config import RunConfig, load_config, parse_config_text
from .data import (
    Dataset,
    FeaturizerConfig,
    featurize_text,
    load_mnist,
    load_mnist_dir,
    load_tsv_corpus,
    mnist_splits,
    synth_blobs,
)
from .errors import ProjnetError
from .model_format import (
    ExportedModel,
    export,
    infer,
    load_model,
    save_model,
)
from .models import (
    HeadConfig,
    JointModel,
    ProjectionHeadConfig,
    TrainerConfig,
    compression_ratio,
    parameter_count,
    projection_forward,
    trainer_forward,
)
from .projection import (
    BitVector,
    ProjectionConfig,
    SparseVector,
    angle_estimate,
    hamming_distance,
    hamming_similarity,
    project_bits,
)
from .training import (
    EvalReport,
    LossParts,
    LossSpec,
    TrainOptions,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_joint,
    train_many,
)

__all__ = [
    "BACKEND",
    "USING_NUMBA",
    "RunConfig",
    "load_config",
    "parse_config_text",
    "Dataset",
    "FeaturizerConfig",
    "featurize_text",
    "load_mnist",
    "load_mnist_dir",
    "load_tsv_corpus",
    "mnist_splits",
    "synth_blobs",
    "ProjnetError",
    "ExportedModel",
    "export",
    "infer",
    "load_model",
    "save_model",
    "HeadConfig",
    "JointModel",
    "ProjectionHeadConfig",
    "TrainerConfig",
    "compression_ratio",
    "parameter_count",
    "projection_forward",
    "trainer_forward",
    "BitVector",
    "ProjectionConfig",
    "SparseVector",
    "angle_estimate",
    "hamming_distance",
    "hamming_similarity",
    "project_bits",
    "EvalReport",
    "LossParts",
    "LossSpec",
    "TrainOptions",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "train_joint",
    "train_many",
    "__version__",
]
