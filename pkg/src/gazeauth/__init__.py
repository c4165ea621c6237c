"""gazeauth: gaze-based continuous authentication at desk scale.

Ingestion and synthesis of 250 Hz binocular gaze recordings, windowed
normalization, three classifier backends (transformer encoder, dilated
dense 1-D CNN, gradient-boosted trees) on a from-scratch autodiff
engine, and the short-term / long-term / retrained drift protocols.
"""

from .gaze_io import (
    CONCRETE_TASKS,
    GazeSample,
    Recording,
    RecordingMeta,
    SyntheticUserParams,
    TaskKind,
    apply_behavioral_drift,
    generate_synthetic_recording,
    load_dataset,
    parse_path_meta,
    parse_recording_csv,
    recording_to_csv,
)
from .preprocess import (
    Normalizer,
    WindowConfig,
    WindowSet,
    build_raw_windowset,
    build_windowset,
    clean_recording,
    fit_normalizer,
    normalize_time,
    normalize_value,
    segment_windows,
)
from .tensor import Tensor, backward, no_grad
from .optim import AdamState, Parameter, adam_step
from .transformer import TransformerClassifier, TransformerConfig, attention, positional_encoding
from .densenet import DenseNetClassifier, DenseNetConfig, receptive_field
from .gbt import (
    GbtClassifier,
    GbtConfig,
    GbtEnsemble,
    find_best_split,
    flatten_window,
    predict_gbt,
    softmax_grad_hess,
    train_gbt,
)
from .training import (
    LabelEncoder,
    SplitSpec,
    TrainConfig,
    TrainReport,
    encode_labels,
    evaluate,
    split,
    train_epochs,
)
from .experiments import (
    ExperimentConfig,
    ExperimentReport,
    Protocol,
    drift_report,
    emit_table,
    make_longitudinal_cohort,
    run_protocol,
    write_report_files,
)

__version__ = "0.1.0"
