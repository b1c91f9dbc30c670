"""Auditing neural classifiers against uncertainty-constrained perturbations.

Submodules:

``autodiff``     reverse-mode differentiation over numpy arrays
``models``       dense and pooled-set networks, training, checkpoints
``bench``        synthetic benchmark data and cut-based baselines
``uncertainty``  per-feature uncertainty envelopes and projection
``attacks``      constrained PGD and margin attacks
``metrics``      ROC/AUC, working points, distribution checks
``pipeline``     the full audit workflow and its report
"""
from .attacks import AttackConfig, attack_dataset, chi2_soft, cw_attack, fooling_ratio, pgd_attack, prior_loss
from .autodiff import Graph, Trace, backward, forward
from .bench import EventTable, GenConfig, TrackSet, generate
from .errors import AttackError, ConfigurationError, DomainError, ShapeError, StateError, TrainingError
from .metrics import efficiency_at_rejection, hist_chi2_hard, pearson_delta, roc_auc, z_stats
from .models import Checkpoint, ModelSpec, TrainConfig
from .pipeline import RunConfig, default_run_config, emit_report, load_report, run_audit
from .uncertainty import UncertaintyModel, default_uncertainty, project, sigma, standardize

__version__ = "0.1.0"
