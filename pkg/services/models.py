"""
Model Assembly and Complexity Accounting
Wires the layer zoo into DeepConvLSTM, Shallow DeepConvLSTM and the DeepConvContext
family, and reports parameter counts, FLOP and memory estimates and context length.
"""
import logging
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError, model_validator

from config.settings import ARCHITECTURE_DEFAULTS, REFERENCE_PARAM_COUNTS, UNRECONCILED_VARIANTS
from services import autodiff as ad
from services.autodiff import Tensor
from services.errors import ConfigError, ShapeError
from services.layers import (
    BiLstmLayer,
    Classifier,
    ConvBlock,
    Dropout,
    LstmLayer,
    Module,
    MultiHeadSelfAttention,
    PositionalEncoding,
    Projection,
    TransformerStack,
)

logger = logging.getLogger(__name__)

ConfigModel = TypeVar("ConfigModel", bound=BaseModel)


def parse_section(model_cls: Type[ConfigModel], data: Mapping[str, Any], section: str) -> ConfigModel:
    """Validate a config mapping, converting pydantic failures into ConfigError"""
    try:
        return model_cls.model_validate(dict(data))
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"[{section}] {problems}") from None


class ModelVariant(str, Enum):
    DEEPCONVLSTM = "deepconvlstm"
    SHALLOW_DEEPCONVLSTM = "shallow_deepconvlstm"
    DCC_LSTM = "dcc_lstm"
    DCC_BILSTM = "dcc_bilstm"
    DCC_CAUSAL_ATTENTION = "dcc_causal_attention"
    DCC_BI_ATTENTION = "dcc_bi_attention"
    DCC_CAUSAL_TRANSFORMER = "dcc_causal_transformer"
    DCC_BI_TRANSFORMER = "dcc_bi_transformer"

    @property
    def uses_context(self) -> bool:
        """True when logits of one window depend on other windows of the batch"""
        return self is not ModelVariant.DEEPCONVLSTM

    @property
    def is_deepconvcontext(self) -> bool:
        return self.value.startswith("dcc_")

    @property
    def bidirectional(self) -> bool:
        return self in (ModelVariant.DCC_BILSTM, ModelVariant.DCC_BI_ATTENTION, ModelVariant.DCC_BI_TRANSFORMER)

    @property
    def inter_module(self) -> Optional[str]:
        return {
            ModelVariant.SHALLOW_DEEPCONVLSTM: "lstm",
            ModelVariant.DCC_LSTM: "lstm",
            ModelVariant.DCC_BILSTM: "bilstm",
            ModelVariant.DCC_CAUSAL_ATTENTION: "attention",
            ModelVariant.DCC_BI_ATTENTION: "attention",
            ModelVariant.DCC_CAUSAL_TRANSFORMER: "transformer",
            ModelVariant.DCC_BI_TRANSFORMER: "transformer",
        }.get(self)


class ModelConfig(BaseModel):
    """Full hyperparameter record for one architecture"""
    sensor_channels: int
    n_classes: int
    window_samples: int
    kernel: int = ARCHITECTURE_DEFAULTS["kernel"]
    conv_layers: int = ARCHITECTURE_DEFAULTS["conv_layers"]
    filters: int = ARCHITECTURE_DEFAULTS["filters"]
    lstm_hidden: int = ARCHITECTURE_DEFAULTS["lstm_hidden"]
    lstm_layers: int = ARCHITECTURE_DEFAULTS["lstm_layers"]
    dropout: float = ARCHITECTURE_DEFAULTS["dropout"]
    attn_heads: int = ARCHITECTURE_DEFAULTS["attn_heads"]
    transformer_layers: int = ARCHITECTURE_DEFAULTS["transformer_layers"]
    mlp_ratio: int = ARCHITECTURE_DEFAULTS["mlp_ratio"]
    max_positions: int = ARCHITECTURE_DEFAULTS["max_positions"]
    variant: ModelVariant = ModelVariant.DCC_LSTM
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        counts = {
            "sensor_channels": self.sensor_channels,
            "n_classes": self.n_classes,
            "window_samples": self.window_samples,
            "kernel": self.kernel,
            "conv_layers": self.conv_layers,
            "filters": self.filters,
            "lstm_hidden": self.lstm_hidden,
            "attn_heads": self.attn_heads,
            "transformer_layers": self.transformer_layers,
            "mlp_ratio": self.mlp_ratio,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"model.{name} must be positive, got {value}")
        if self.lstm_layers not in (1, 2):
            raise ConfigError(f"model.lstm_layers must be 1 or 2, got {self.lstm_layers}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        min_length = self.conv_layers * (self.kernel - 1) + 1
        if self.window_samples < min_length:
            raise ConfigError(f"window too short (min {min_length}): got {self.window_samples} samples")
        if self.variant.inter_module in ("attention", "transformer") and self.lstm_hidden % self.attn_heads:
            raise ConfigError(f"model.lstm_hidden {self.lstm_hidden} not divisible by {self.attn_heads} heads")
        return self

    @property
    def conv_output_length(self) -> int:
        return self.window_samples - self.conv_layers * (self.kernel - 1)

    @property
    def conv_features(self) -> int:
        return self.filters * self.sensor_channels


class HarModel(Module):
    """Base for all architectures: [B, C, T] windows in, [B, n_classes] logits out"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.variant = config.variant
        self.conv = ConvBlock(rng, config.conv_layers, config.filters, config.kernel)

    def _features(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.sensor_channels, cfg.window_samples):
            raise ShapeError(
                self.variant.value, x.shape, (cfg.sensor_channels, cfg.window_samples), detail="expected [B, C, T]"
            )
        return self.conv(x)

    def reseed_dropout(self, rng: np.random.Generator) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def _conv_activations(self, batch: int) -> int:
        cfg = self.config
        t = cfg.window_samples
        total = 0
        for _ in range(cfg.conv_layers):
            t -= cfg.kernel - 1
            total += batch * cfg.filters * cfg.sensor_channels * t
        return total


class DeepConvLSTM(HarModel):
    """Conv block then an LSTM over the intra-window steps; every window is classified on its own"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.lstm = LstmLayer(config.conv_features, rng, config.lstm_hidden, config.lstm_layers)
        self.classifier = Classifier(config.lstm_hidden, config.n_classes, config.dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        features = ad.transpose(self._features(x), (0, 2, 1))
        out, _ = self.lstm(features)
        return self.classifier(out[:, out.shape[1] - 1, :])

    def flop_breakdown(self, batch: int) -> Dict[str, int]:
        cfg = self.config
        return {
            "conv": self.conv.flops(batch, cfg.sensor_channels, cfg.window_samples),
            "intra_lstm": self.lstm.flops(batch, cfg.conv_output_length),
            "classifier": self.classifier.flops(batch),
        }

    def activation_count(self, batch: int) -> int:
        cfg = self.config
        lstm = batch * cfg.conv_output_length * cfg.lstm_hidden * cfg.lstm_layers
        return self._conv_activations(batch) + lstm + batch * cfg.n_classes


class ShallowDeepConvLSTM(HarModel):
    """Conv features of each window's final time step, LSTM across the batch's windows"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        self.lstm = LstmLayer(config.conv_features, rng, config.lstm_hidden, config.lstm_layers)
        self.classifier = Classifier(config.lstm_hidden, config.n_classes, config.dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        features = self._features(x)
        batch = features.shape[0]
        last = features[:, :, features.shape[2] - 1]
        out, _ = self.lstm(ad.reshape(last, (1, batch, self.config.conv_features)))
        return self.classifier(ad.reshape(out, (batch, self.config.lstm_hidden)))

    def flop_breakdown(self, batch: int) -> Dict[str, int]:
        cfg = self.config
        return {
            "conv": self.conv.flops(batch, cfg.sensor_channels, cfg.window_samples),
            "inter_lstm": self.lstm.flops(1, batch),
            "classifier": self.classifier.flops(batch),
        }

    def activation_count(self, batch: int) -> int:
        cfg = self.config
        return self._conv_activations(batch) + batch * cfg.lstm_hidden * cfg.lstm_layers + batch * cfg.n_classes


class DeepConvContext(HarModel):
    """
    Intra-window conv + LSTM, projection to one vector per window, then an
    inter-window module (LSTM, BiLSTM, attention or transformer) over the
    time-ordered windows of the batch.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        h = config.lstm_hidden
        variant = config.variant
        self.intra_lstm = LstmLayer(config.conv_features, rng, h, config.lstm_layers)
        self.projection = Projection(config.conv_output_length * h, h, rng)
        self.positional = None
        kind = variant.inter_module
        if kind == "lstm":
            self.inter = LstmLayer(h, rng, h, config.lstm_layers)
        elif kind == "bilstm":
            self.inter = BiLstmLayer(h, rng, h, config.lstm_layers)
        elif kind == "attention":
            self.inter = MultiHeadSelfAttention(rng, h, config.attn_heads, causal=not variant.bidirectional)
        elif kind == "transformer":
            self.inter = TransformerStack(
                rng, config.transformer_layers, h, config.attn_heads, config.mlp_ratio, causal=not variant.bidirectional
            )
        else:
            raise ConfigError(f"{variant.value} is not a DeepConvContext variant")
        if kind in ("attention", "transformer"):
            self.positional = PositionalEncoding(h, config.max_positions)
        self.output_size = 2 * h if kind == "bilstm" else h
        self.classifier = Classifier(self.output_size, config.n_classes, config.dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        h = cfg.lstm_hidden
        features = ad.transpose(self._features(x), (0, 2, 1))
        batch = features.shape[0]
        intra, _ = self.intra_lstm(features)
        window_vectors = self.projection(ad.reshape(intra, (batch, cfg.conv_output_length * h)))
        seq = ad.reshape(window_vectors, (1, batch, h))
        if self.positional is not None:
            seq = self.positional(seq)
        if isinstance(self.inter, LstmLayer):
            seq, _ = self.inter(seq)
        else:
            seq = self.inter(seq)
        return self.classifier(ad.reshape(seq, (batch, self.output_size)))

    def flop_breakdown(self, batch: int) -> Dict[str, int]:
        cfg = self.config
        return {
            "conv": self.conv.flops(batch, cfg.sensor_channels, cfg.window_samples),
            "intra_lstm": self.intra_lstm.flops(batch, cfg.conv_output_length),
            "projection": self.projection.flops(batch),
            "inter": self.inter.flops(1, batch),
            "classifier": self.classifier.flops(batch),
        }

    def activation_count(self, batch: int) -> int:
        cfg = self.config
        h = cfg.lstm_hidden
        intra = batch * cfg.conv_output_length * h * cfg.lstm_layers
        inter_width = self.output_size
        if isinstance(self.inter, TransformerStack):
            inter_width = h * (2 + cfg.mlp_ratio) * cfg.transformer_layers
        return self._conv_activations(batch) + intra + batch * h + batch * inter_width + batch * cfg.n_classes


MODEL_CLASSES: Dict[ModelVariant, Type[HarModel]] = {
    ModelVariant.DEEPCONVLSTM: DeepConvLSTM,
    ModelVariant.SHALLOW_DEEPCONVLSTM: ShallowDeepConvLSTM,
}


def build(config: ModelConfig, rng: Optional[np.random.Generator] = None) -> HarModel:
    """Construct the model selected by config.variant, initialized from config.seed unless rng is given"""
    if not isinstance(config, ModelConfig):
        config = parse_section(ModelConfig, config, "model")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model_cls = MODEL_CLASSES.get(config.variant, DeepConvContext)
    model = model_cls(config, rng)
    logger.debug(f"Built {config.variant.value} with {model.param_count():,} parameters")
    return model


def count_params(model: Module) -> int:
    return model.param_count()


def estimate_flops(model: Module, batch: int = 100) -> int:
    """Analytic FLOPs (2 x multiply-accumulates plus bias adds) for one forward batch"""
    return int(sum(model.flop_breakdown(batch).values()))


def estimate_memory(model: Module, batch: int = 100, bytes_per_value: int = 4) -> int:
    """Bytes for parameters plus the main forward activations at the given batch size"""
    return bytes_per_value * (count_params(model) + model.activation_count(batch))


def context_length_seconds(batch: int, window_seconds: float, overlap_seconds: float) -> float:
    """Seconds of signal an inter-window module sees per batch: b * (w - o)"""
    if window_seconds <= overlap_seconds:
        raise ConfigError(f"window ({window_seconds}s) must be longer than overlap ({overlap_seconds}s)")
    if overlap_seconds < 0:
        raise ConfigError(f"overlap must be >= 0, got {overlap_seconds}")
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    return batch * (window_seconds - overlap_seconds)


class ComplexityReport(BaseModel):
    variant: str
    param_count: int
    flop_estimate: int
    memory_estimate_bytes: int
    context_length_seconds: float
    batch: int
    reference_param_count: Optional[int] = None
    note: str = ""


def complexity_of(
    config: ModelConfig, batch: int, window_seconds: float, overlap_seconds: float
) -> ComplexityReport:
    """Complexity figures for one configured variant"""
    return complexity_of_model(build(config), batch, window_seconds, overlap_seconds)


def complexity_of_model(
    model: HarModel, batch: int, window_seconds: float, overlap_seconds: float
) -> ComplexityReport:
    config = model.config
    if config.variant.uses_context:
        context = context_length_seconds(batch, window_seconds, overlap_seconds)
    else:
        # Window-only models see one window; the call still validates w and o
        context_length_seconds(1, window_seconds, overlap_seconds)
        context = window_seconds
    params = count_params(model)
    reference = REFERENCE_PARAM_COUNTS.get(config.variant.value)
    note = ""
    if config.variant.value in UNRECONCILED_VARIANTS:
        note = "not reconciled: layer widths of the published transformer are unknown"
    return ComplexityReport(
        variant=config.variant.value,
        param_count=params,
        flop_estimate=estimate_flops(model, batch),
        memory_estimate_bytes=estimate_memory(model, batch),
        context_length_seconds=context,
        batch=batch,
        reference_param_count=reference,
        note=note,
    )


def predict_proba(model: HarModel, windows: np.ndarray) -> np.ndarray:
    """Class probabilities for one batch of windows [B, C, T], evaluation mode, no tape"""
    was_training = model.training
    model.eval()
    try:
        logits = model(Tensor(windows))
        return ad.softmax(logits).data
    finally:
        model.train(was_training)
