"""Kernel-based balancing weights for debiased collaborative filtering."""

from .data import (Batch, Dataset, DrawScope, FeatureMap, FeatureSource,
                   build_features, generate_synthetic, load_matrix_dataset,
                   sample_batch, save_matrix_dataset)
from .kernels import (GramMatrix, KernelFamily, KernelFit, KernelSpec,
                      fit_errors, gram, kernel_eval, select_top_j,
                      worst_case_quadratic)
from .balancing import (BalanceReport, BalancingFunctionSet, FunctionKind,
                        balancing_loss, choose_functions_akb,
                        choose_functions_rkb, moment_functions, residuals,
                        solve_exact_entropy, wkb_loss)
from .estimators import (ErrorForm, EstimatorName, EstimatorReport,
                         dr_loss, empirical_bias, ideal_loss, imputation_loss,
                         ips_loss, kbdr_loss, kbips_loss, naive_loss,
                         pointwise_error, propensity_ce_loss, snips_loss)
from .models import (FactorizationModel, Link, ModelBundle, OptimizerState,
                     analytic_gradients, gradient_step, init_bundle,
                     init_factorization, load_checkpoint, loss_value,
                     save_checkpoint)
from .metrics import MetricReport, auc, f1_at_k, ndcg_at_k
from .training import (Strategy, TrainConfig, TrainTrace, sweep, train,
                       validate)

__version__ = "0.1.0"
