"""Intrusive binaural speech-intelligibility prediction from frozen
speech-foundation-model features.

The model fuses multi-layer SFM activations with a multi-scale CNN over
log-Mel frames, runs two transformer stages (within-stream temporal, then
across-layer), attends each ear to the clean reference and to the other
ear, conditions on listener severity, and pools the two ear scores with a
differentiable best-ear rule into a single [0, 100] score.
"""

from .errors import (ConfigError, DataError, EarshotError, FormatError,
                     NumericError, PreconditionError, ShapeError)
from .tensor import ParameterStore, Tensor, grad_check, load_checkpoint, save_checkpoint
from .conditioning import ConditioningStats, ListenerProfile, Severity
from .dsp import FeatureBundle, LogMelConfig, log_mel, read_bundle, write_bundle
from .model import (ForwardResult, ModelConfig, PreparedUtterance, build_model,
                    forward, model_param_count, prepare_bundle)
from .training import (AdamW, Fold, FoldResult, TrainConfig, ensemble_predict,
                       ensemble_predict_scores, make_folds, predict,
                       predict_scores, rmse_loss, rmse_metric, train_fold)
from .synthetic import SynthSpec, generate_dataset, generate_prepared, make_listeners
from .experiments import (AblationReport, EvalRecord, SceneHistogram,
                          StratifiedReport, SweepReport, SweepSpec,
                          constant_baseline_rmse, pooled_rmse, run_ablations,
                          run_sweep, scene_histogram, stratify)
from .data import (load_dataset, load_listeners, load_manifest, load_model_config,
                   load_train_config, read_predictions_csv, write_listeners,
                   write_manifest, write_predictions_csv)

__version__ = "0.1.0"
