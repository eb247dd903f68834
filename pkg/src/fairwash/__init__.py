"""Manipulating and defending gradient-based model explanations.

The package covers the full loop: train small dense models on a reverse-mode
tape (so explanation gradients themselves stay differentiable), explain
predictions with gradient / input-times-gradient / integrated-gradient /
relevance-propagation maps, attack the explanations either analytically (for
linear models on flat data manifolds) or by fine-tuning against a target map,
and defend by projecting maps onto an estimated tangent space of the data
manifold. Everything is numpy float64 and deterministic for a fixed seed.
"""

from .attack import (AttackConfig, AttackDivergence, FlatManifoldSpec,
                     analytic_fairwash, attack_loss, finetune_attack,
                     finetune_attack_tsp, solve_lambda)
from .dataio import (Dataset, NormStats, fit_normalization, gen_credit,
                     gen_digits, gen_digits_split, load_idx_dataset, load_map,
                     load_mnist_dir, normalize, normalize_with, save_map,
                     target_fourtwo, write_csv, write_pgm)
from .evalmetrics import (EvalReport, FlipCurve, aggregate, build_report, kl,
                          mse, pcc, pixel_flipping, ssim)
from .explain import (ExplanationMap, IntGradConfig, LrpConfig,
                      explain_gradient, explain_intgrad, explain_lrp,
                      explain_xgrad, gradient_maps, intgrad_maps, lrp_maps,
                      normalize_map, xgrad_maps)
from .manifold import (Projector, ProjectorCache, build_hyperplane_cache,
                       decoder_jacobian, decoder_tangent, generalized_project,
                       hyperplane_tangent, knn_indices, reconstruction_sweep,
                       tsp_map, write_projector_cache)
from .models import (AutoencoderModel, Layer, LogRegModel, MlpModel,
                     TrainConfig, accuracy, init_mlp, load_model,
                     logreg_as_mlp, predict, predicted_class, save_model,
                     softmax_probs, train_autoencoder, train_classifier)
from .rng import RngState
from .tape import ContractError, Tape, as_array

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackDivergence", "AutoencoderModel", "ContractError",
    "Dataset", "EvalReport", "ExplanationMap", "FlatManifoldSpec",
    "FlipCurve", "IntGradConfig", "Layer", "LogRegModel", "LrpConfig",
    "MlpModel", "NormStats", "Projector", "ProjectorCache", "RngState",
    "Tape", "TrainConfig", "accuracy", "aggregate", "analytic_fairwash",
    "as_array", "attack_loss", "build_hyperplane_cache", "build_report",
    "decoder_jacobian", "decoder_tangent", "explain_gradient",
    "explain_intgrad", "explain_lrp", "explain_xgrad", "finetune_attack",
    "finetune_attack_tsp", "fit_normalization", "gen_credit", "gen_digits",
    "gen_digits_split", "generalized_project", "gradient_maps",
    "hyperplane_tangent", "init_mlp", "intgrad_maps", "kl", "knn_indices",
    "load_idx_dataset", "load_map", "load_mnist_dir", "load_model",
    "logreg_as_mlp", "lrp_maps",
    "mse", "normalize", "normalize_map", "normalize_with", "pcc",
    "pixel_flipping", "predict", "predicted_class", "reconstruction_sweep",
    "save_map", "save_model", "softmax_probs", "solve_lambda", "ssim",
    "target_fourtwo", "train_autoencoder", "train_classifier", "tsp_map",
    "write_csv", "write_pgm", "write_projector_cache",
]
