"""Conformal prediction sets with group-conditional calibration and
subgroup fairness auditing for classifier score tables."""

__version__ = "0.1.0"

from .calibration import (
    CalibratedPredictor,
    TemperatureFit,
    apply_temperature,
    conformal_quantile,
    fit_aggregate,
    fit_group,
    fit_temperature,
    naive_predictor,
)
from .data import (
    ScoreRecord,
    ScoreTable,
    SplitSpec,
    TableSchema,
    mean_probs,
    normalize_rows,
    parse_score_table,
    split_calibration_test,
    write_score_table,
)
from .metrics import (
    AuditReport,
    MethodAudit,
    audit_predictor,
    average_set_size,
    coverage_disparity,
    marginal_coverage,
    max_softmax_prob,
    predictive_entropy,
    rule_in_accuracy,
    rule_out_accuracy,
    set_size_disparity,
    spearman,
)
from .prediction import (
    PredictionSet,
    build_set_cumulative,
    build_set_naive,
    build_set_raps,
    predict,
    predict_table,
)
from .scoring import ScoreMethod, aps_score, rank_of, raps_score
from .synth import (
    GroupSpec,
    SynthConfig,
    coverage_oracle,
    fitzpatrick_config,
    generate,
    generate_logit_table,
    order_statistic_oracle,
    shifted_groups_config,
    single_group_config,
)
