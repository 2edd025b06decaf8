# Config module
from .settings import (
    runtime_config,
    checkpoint_config,
    TRAINING_DEFAULTS,
    ADAM_DEFAULTS,
    ARCHITECTURE_DEFAULTS,
    TIOU_THRESHOLDS,
    REFERENCE_COMPLEXITY_CONFIG,
    REFERENCE_PARAM_COUNTS,
    UNRECONCILED_VARIANTS,
    EXIT_CODES,
    METRICS_SCHEMA_VERSION,
    LOG_FORMAT,
)
