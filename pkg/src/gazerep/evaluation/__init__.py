"""Saliency metrics, static baselines, gaze error, classification scores and linear probes."""
from .attention import (TASKS, Geometry, eval_frames, evaluate_attention, gaze_baseline_from, make_report,
                        saliency_baseline_from, static_gaze_baseline, static_saliency_baseline, write_report)
from .metrics import (SALIENCY_METRICS, ClassReport, confusion_matrix, macro_prf, metric_auc_judd, metric_cc,
                      metric_kld, metric_nss, metric_sim, saliency_scores)
from .probe import (ProbeConfig, ProbeError, ProbeResult, SoftmaxRegression, balanced_weights, l2_grid,
                    probe_arrays, probe_features, probe_sweep, select_index, softmax_objective,
                    softmax_regression_fit)
