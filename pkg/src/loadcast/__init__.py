"""Day-ahead electric load forecasting on an in-repo autodiff core.

The pipeline: clean anomalous days, build 9x24 calendar/weather/similar-day
feature matrices, train a convolutional + attention encoder-decoder network
for the initial 24-point forecast, then a GRU refinement head for a
residual correction, and evaluate with daily accuracy / mean error and the
two-sigma residual rule.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     IngestError, LoadcastError, MissingHistoryError, NumericError,
                     ShapeError, UnrecoverableDayError)
from .tensor import (Tensor, backward, grad_check, grad_check_params, matmul, relu,
                     set_nan_trap, softmax, unbroadcast)
from .nn import (BatchNormState, GRUWeights, batchnorm2d, conv2d, gru_sequence,
                 layer_norm, linear, pointwise_conv)
from .optim import AdamState, adam_step
from .data import (CleaningLog, DailyRecord, DatasetSplit, FeatureMatrix, IngestReport,
                   NormStats, SyntheticProfile, build_dataset, build_feature_matrix,
                   clean_records, denormalize, detect_anomalous_day,
                   load_csv, locate_and_replace_outliers, minmax_normalize, save_csv,
                   similar_days, split_train_test, synthesize_dataset,
                   validate_feature_matrix)
from .model import (DayPrediction, ModelConfig, ModelParams, encoder_decoder_forward,
                    feature_extract, ffn_regress_head, forward_initial, init_params,
                    multi_head_attention, positional_encode_2d, predict_day,
                    refine_load, self_attention, sinusoid_table, tiny_config)
from .training import (StageSchedule, TrainReport, batch_loss, lr_schedule,
                       mse_day_loss, stage1_defaults, stage2_defaults, train_stage1,
                       train_stage2, write_loss_csv)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import (AblationReport, ArmResult, DayScore, EvalReport,
                         ResidualAnalysis, daily_accuracy, daily_mean_error,
                         evaluate_series, measure_predict_time, outlier_count_passes,
                         residual_analysis, run_ablation, weekly_report)
from .forecaster import LoadForecaster
