"""Metrics, significance tests and the LOSO experiment harness.

The harness itself lives in :mod:`phenotrace.evaluation.experiment` (it
depends on the training code, which depends on the metrics here).
"""

from .metrics import SCALAR_METRICS, ConfusionMatrix, MetricBundle, auc_pr, balanced_accuracy, confusion, metrics, roc_auc
from .stats import (
    TestResult,
    paired_t_test,
    signed_rank_null_counts,
    significance_stars,
    t_two_sided_p,
    welch_t_test,
    wilcoxon_signed_rank,
)
