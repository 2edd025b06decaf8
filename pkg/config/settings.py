"""
WindowContext HAR Engine - Configuration Settings
"""
import os
from dataclasses import dataclass
from typing import Dict, List

from dotenv import load_dotenv

load_dotenv()


@dataclass
class RuntimeConfig:
    """Process-wide runtime settings (environment overrides)"""
    # Results land here unless the experiment file or CLI says otherwise
    output_dir: str = os.getenv("WCTX_OUTPUT_DIR", "results")
    log_level: str = os.getenv("WCTX_LOG_LEVEL", "INFO")

    # float64 keeps finite-difference checks meaningful; float32 for faster release runs
    dtype: str = os.getenv("WCTX_DTYPE", "float64")

    # Reject NaN/inf operands at every primitive
    check_finite: bool = os.getenv("WCTX_CHECK_FINITE", "1") not in ("0", "false", "False")

    # Opt-in fold-level parallelism (process pool); sequential keeps logs ordered
    fold_workers: int = int(os.getenv("WCTX_FOLD_WORKERS", "1"))


@dataclass
class CheckpointConfig:
    """Checkpoint file layout"""
    format_version: int = 1
    manifest_name: str = "manifest.json"
    arrays_name: str = "params.npz"


# Training protocol defaults
TRAINING_DEFAULTS = {
    "epochs": 30,
    "train_batch": 100,
    "base_lr": 1e-4,
    "decay_factor": 0.9,
    "decay_period_epochs": 10,
    "weight_decay": 1e-6,
    "decoupled_weight_decay": False,
    "seeds": [1, 2, 3],
    "partial_batch": "keep",
}

ADAM_DEFAULTS = {
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
}

# Layer hyperparameters shared by every architecture
ARCHITECTURE_DEFAULTS = {
    "conv_layers": 4,
    "filters": 64,
    "kernel": 9,
    "lstm_hidden": 128,
    "lstm_layers": 1,
    "dropout": 0.5,
    "attn_heads": 4,
    "transformer_layers": 3,
    "mlp_ratio": 4,
    "max_positions": 4096,
}

# Five temporal IoU thresholds used for mAP
TIOU_THRESHOLDS: List[float] = [0.3, 0.4, 0.5, 0.6, 0.7]

# Configuration whose parameter counts reconcile with the published complexity table
REFERENCE_COMPLEXITY_CONFIG = {
    "sensor_channels": 3,
    "n_classes": 6,
    "window_samples": 50,
    "kernel": 9,
    "lstm_layers": 1,
    "attn_heads": 4,
    "batch": 100,
    "window_seconds": 1.0,
    "overlap_seconds": 0.5,
}

# Published learnable-parameter counts, keyed by variant name
REFERENCE_PARAM_COUNTS: Dict[str, int] = {
    "deepconvlstm": 277_062,
    "shallow_deepconvlstm": 277_062,
    "dcc_lstm": 704_198,
    "dcc_bilstm": 837_062,
    "dcc_causal_attention": 638_150,
    "dcc_causal_transformer": 1_961_158,
}

# Variants whose reference count our layer definitions cannot reproduce
UNRECONCILED_VARIANTS: List[str] = ["dcc_causal_transformer", "dcc_bi_transformer"]

EXIT_CODES = {
    "ok": 0,
    "config": 2,
    "data": 3,
    "divergence": 4,
}

METRICS_SCHEMA_VERSION = "1.0"

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


# Create singleton instances
runtime_config = RuntimeConfig()
checkpoint_config = CheckpointConfig()
