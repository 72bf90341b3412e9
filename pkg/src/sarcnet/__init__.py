"""Quantification of sarcomere structural organization in single-cell
cardiomyocyte images: classical features, a feature-fusion CNN regressor
trained from scratch on a minimal autodiff core, saliency explanations,
and a synthetic data generator for end-to-end verification."""

from .autodiff import Tensor, backward, batchnorm2d, conv2d, linear, \
    max_pool2d, global_avg_pool2d, mse_loss, pool2d, relu
from .data import CellRecord, SplitSpec, batches, load_manifest, split
from .errors import SarcnetError
from .explain import Heatmap, gradcam, overlay
from .features import CorrelationProfile, FeatureVector, ScalerParams, \
    alignment_metrics, apply_scaler, aspect_ratio, cell_area, class_fractions, \
    correlation_profile, extract_features, fit_scaler, glcm, glcm_correlation
from .imageops import CellMask, GrayImage, load_image, resize_bilinear, \
    to_model_input
from .metrics import mae, mse, r2, spearman
from .model import SarcNetConfig, SarcNetParams, backbone_forward, \
    feature_branch_forward, fuse_and_head, init_params, load_checkpoint, \
    sarcnet_forward, save_checkpoint, scaled_config
from .optim import AdamState, adam_init, adam_step
from .synth import SyntheticSpec, generate_synthetic
from .training import EvalReport, TrainConfig, evaluate, linear_baseline_fit, \
    linear_baseline_predict, train

__version__ = "0.1.0"
