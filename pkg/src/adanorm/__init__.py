"""Adaptive normalization fusion for cross-domain face anti-spoofing.

A self-contained NumPy implementation: a small reverse-mode autodiff
tensor core, batch/instance normalization with learned per-channel
fusion, centroid-based embedding alignment losses, an episodic
meta-learning trainer that simulates unseen domains, a procedural
multi-domain benchmark, and evaluation/reporting tools.
"""

from .checkpoint import load_checkpoint, restore_bank, restore_model, \
    save_checkpoint
from .data import (DEFAULT_DOMAINS, DataBundle, DomainData, DomainSpec,
                   Protocol, Sample, build_protocol, generate_bundle,
                   generate_domain, load_domain_cache, make_sample,
                   rgb_to_hsv, save_domain_cache)
from .experiment import (ABLATION_VARIANTS, AblationConfig, ConfigError,
                         DataConfig, ExperimentConfig, MetricsReport,
                         evaluate_model, liveness_scores, load_config,
                         parse_config, run_ablation, run_experiment,
                         write_alpha_csv, write_embeddings_csv)
from .losses import (CentroidBank, EmbeddingBatch, cls_loss, depth_loss,
                     ics_loss, idc_loss, inter_domain_distance,
                     intra_domain_distance, update_centroid_bank)
from .metrics import eer_threshold, far_frr, hter, roc_auc
from .model import ForwardTrace, Network, NetworkConfig
from .norms import NormLayer, NormVariant
from .optim import Adam, Sgd
from .tensor import (TAG_ADAPTIVE, TAG_BASE, ParamStore, Tensor,
                     finite_diff_check, no_grad)
from .trainer import (Batch, DomainSampler, DomainSplit, ScheduleViolation,
                      TrainConfig, TrainResult, meta_optimize, meta_test_loss,
                      meta_train_step, normal_train_step, run_training,
                      split_domains)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS", "Adam", "AblationConfig", "Batch", "CentroidBank",
    "ConfigError", "DEFAULT_DOMAINS", "DataBundle", "DataConfig",
    "DomainData", "DomainSampler", "DomainSpec", "DomainSplit",
    "EmbeddingBatch", "ExperimentConfig", "ForwardTrace", "MetricsReport",
    "Network", "NetworkConfig", "NormLayer", "NormVariant", "ParamStore",
    "Protocol", "Sample", "ScheduleViolation", "Sgd", "TAG_ADAPTIVE",
    "TAG_BASE", "Tensor", "TrainConfig", "TrainResult", "build_protocol",
    "cls_loss", "depth_loss", "eer_threshold", "evaluate_model", "far_frr",
    "finite_diff_check", "generate_bundle", "generate_domain", "hter",
    "ics_loss", "idc_loss", "inter_domain_distance", "intra_domain_distance",
    "liveness_scores", "load_checkpoint", "load_config", "load_domain_cache",
    "make_sample", "meta_optimize", "meta_test_loss", "meta_train_step",
    "no_grad", "normal_train_step", "parse_config", "restore_bank",
    "restore_model", "rgb_to_hsv", "roc_auc", "run_ablation",
    "run_experiment", "run_training", "save_checkpoint", "save_domain_cache",
    "split_domains", "update_centroid_bank", "write_alpha_csv",
    "write_embeddings_csv",
]
