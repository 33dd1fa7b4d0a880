"""Cleartext reference optimizers, sigmoid variants and fairness metrics."""

from .metrics import FairnessReport, GroupRates, evaluate, p_percent_ratio, predict, report_from_predictions
from .sigmoid import CHEB_COEFFS, chebyshev, secureml, secureml_fixed, sigmoid_variants
from .optimizers import (ModelParams, TrainingConfig, TrainResult, barrier, barrier_grad, bce_grad, bce_loss,
                    constraint_matrix, fairness_value, fixed_constraint_matrix, fixed_lagrange_step,
                    minibatch_order, project_gradient, train, train_iplb, train_lagrange,
                    train_projected, write_trace, xi_bce, xi_con)

__all__ = [
    "FairnessReport", "GroupRates", "evaluate", "p_percent_ratio", "predict", "report_from_predictions",
    "CHEB_COEFFS", "chebyshev", "secureml", "secureml_fixed", "sigmoid_variants",
    "ModelParams", "TrainingConfig", "TrainResult", "barrier", "barrier_grad", "bce_grad", "bce_loss",
    "constraint_matrix", "fairness_value", "fixed_constraint_matrix", "fixed_lagrange_step",
    "minibatch_order", "project_gradient", "train", "train_iplb", "train_lagrange", "train_projected",
    "write_trace", "xi_bce", "xi_con",
]
