"""Semi-supervised density-map counting with Gaussian-process pseudo-labels.

The package trains a small fully convolutional counter on synthetic dot
images.  Labeled images supervise it directly; unlabeled images are
supervised by the posterior of a Gaussian process over encoder latents,
whose mean acts as a pseudo density map and whose predictive variance both
weights the fit and is minimized to align the latent spaces.
"""

from .data import AnnotatedImage, DomainStyle, SplitConfig, generate_dataset, \
    load_dataset, save_dataset, split_dataset
from .density import DensityMap, PointAnnotation, count, synthesize_density
from .gp import GPConfig, GPPosterior, LatentBank, cosine_kernel, nearest, \
    posterior, rebuild_bank, variance_node
from .losses import LossValue, combined_loss, ranking_hinge_loss, \
    supervised_loss, unsupervised_loss
from .metrics import MetricsReport, PseudoErrorRecord, average_gain, evaluate, \
    mae_mse, pseudo_error_histogram, pseudo_error_records
from .model import ModelConfig, ModelParams, decode, encode, init_params, \
    load_checkpoint, save_checkpoint
from .training import Adam, TrainConfig, TrainState, apply_env_overrides, \
    labeled_stage, load_config_file, train, unlabeled_stage

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "DomainStyle", "SplitConfig", "generate_dataset",
    "load_dataset", "save_dataset", "split_dataset",
    "DensityMap", "PointAnnotation", "count", "synthesize_density",
    "GPConfig", "GPPosterior", "LatentBank", "cosine_kernel", "nearest",
    "posterior", "rebuild_bank", "variance_node",
    "LossValue", "combined_loss", "ranking_hinge_loss", "supervised_loss",
    "unsupervised_loss",
    "MetricsReport", "PseudoErrorRecord", "average_gain", "evaluate",
    "mae_mse", "pseudo_error_histogram", "pseudo_error_records",
    "ModelConfig", "ModelParams", "decode", "encode", "init_params",
    "load_checkpoint", "save_checkpoint",
    "Adam", "TrainConfig", "TrainState", "apply_env_overrides",
    "labeled_stage", "load_config_file", "train", "unlabeled_stage",
    "__version__",
]
