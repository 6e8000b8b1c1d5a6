from .metrics import METRIC_CONVENTION, PSNR_CAP, mse, psnr, psnr_capped, psnr_from_mse, ssim, ssim_map
from .predictor import AgePredictor, AgePredictorConfig, pad, pad_from_predictions, train_age_predictor
from .report import EvaluationPair, MetricsReport, PairRecord, evaluate_pairs
from .stats import (
    AnovaResult,
    DegenerateError,
    StatsError,
    f_survival,
    jacobian_relative_error,
    one_way_anova,
    regularized_incomplete_beta,
    relative_change,
)
