"""
Layer Zoo
Convolutional feature extractor, (bi)LSTM stacks, multi-head self-attention,
transformer blocks, positional encoding, projection and classifier heads.
Every layer knows its learnable-parameter count and an analytic FLOP estimate.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import ARCHITECTURE_DEFAULTS
from services import autodiff as ad
from services.autodiff import Tensor, default_dtype
from services.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

LstmState = Tuple[Tensor, Tensor]


def uniform_param(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str) -> Tensor:
    """Uniform in +-1/sqrt(fan_in)"""
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(default_dtype())
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Container that tracks learnable tensors and sub-modules in registration order"""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        named = [(f"{prefix}{name}", p) for name, p in self._params.items()]
        for child_name, child in self._children.items():
            named.extend(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> List["Module"]:
        found = [self]
        for child in self._children.values():
            found.extend(child.modules())
        return found

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def flop_breakdown(self, batch: int) -> Dict[str, int]:
        """FLOPs per named stage for one forward pass over `batch` windows"""
        return {}

    def activation_count(self, batch: int) -> int:
        return 0

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def layer_param_count(layer: Module) -> int:
    """Exact number of scalar learnable parameters in a layer (recursively)"""
    return layer.param_count()


# =====================================================
# BASIC BUILDING BLOCKS
# =====================================================

class Linear(Module):
    """Affine map over the last axis; weight stored as [in, out]"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = uniform_param(rng, (in_features, out_features), in_features, "weight")
        self.bias = uniform_param(rng, (out_features,), in_features, "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out

    def flops(self, rows: int) -> int:
        bias_adds = rows * self.out_features if self.bias is not None else 0
        return 2 * rows * self.in_features * self.out_features + bias_adds


class Projection(Linear):
    """Reduces a flattened intra-window feature sequence to one vector per window"""


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name="beta")

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout; identity in evaluation mode"""

    def __init__(self, p: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.p
        return ad.dropout(x, keep, 1.0 - self.p)


class Classifier(Module):
    """Dropout followed by an affine map to class logits"""

    def __init__(self, in_features: int, n_classes: int, p: float, rng: np.random.Generator):
        super().__init__()
        self.dropout = Dropout(p, rng)
        self.fc = Linear(in_features, n_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.dropout(x))

    def flops(self, rows: int) -> int:
        return self.fc.flops(rows)


# =====================================================
# CONVOLUTIONAL FEATURE EXTRACTOR
# =====================================================

class TimeConv(Module):
    """k x 1 valid convolution over time, shared across sensor channels, with bias"""

    def __init__(self, in_maps: int, out_maps: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        self.in_maps = in_maps
        self.out_maps = out_maps
        self.kernel = kernel
        fan_in = in_maps * kernel
        self.weight = uniform_param(rng, (out_maps, in_maps, kernel), fan_in, "weight")
        self.bias = uniform_param(rng, (out_maps,), fan_in, "bias")

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv_time(x, self.weight)
        return ad.add(out, ad.reshape(self.bias, (1, self.out_maps, 1, 1)))

    def flops(self, batch: int, channels: int, t_in: int) -> int:
        t_out = t_in - self.kernel + 1
        positions = batch * channels * t_out * self.out_maps
        return 2 * positions * self.in_maps * self.kernel + positions


class ConvBlock(Module):
    """Stack of valid time convolutions, each followed by ReLU"""

    def __init__(
        self,
        rng: np.random.Generator,
        num_layers: int = ARCHITECTURE_DEFAULTS["conv_layers"],
        filters: int = ARCHITECTURE_DEFAULTS["filters"],
        kernel: int = ARCHITECTURE_DEFAULTS["kernel"],
    ):
        super().__init__()
        if num_layers < 1 or filters < 1 or kernel < 1:
            raise ConfigError("conv block needs positive layer count, filters and kernel")
        self.num_layers = num_layers
        self.filters = filters
        self.kernel = kernel
        self.layers: List[TimeConv] = []
        for i in range(num_layers):
            conv = TimeConv(1 if i == 0 else filters, filters, kernel, rng)
            self.layers.append(self.add_module(f"conv{i}", conv))

    @property
    def min_length(self) -> int:
        return self.num_layers * (self.kernel - 1) + 1

    def output_length(self, t: int) -> int:
        if t < self.min_length:
            raise ConfigError(f"window too short (min {self.min_length}): got {t} samples")
        return t - self.num_layers * (self.kernel - 1)

    def forward(self, x: Tensor) -> Tensor:
        """[B, C, T] -> [B, filters * C, T']"""
        if x.ndim != 3:
            raise ShapeError("conv_block", x.shape, detail="expected [B, C, T]")
        batch, channels, t = x.shape
        t_out = self.output_length(t)
        h = ad.reshape(x, (batch, 1, channels, t))
        for conv in self.layers:
            h = ad.relu(conv(h))
        return ad.reshape(h, (batch, self.filters * channels, t_out))

    def flops(self, batch: int, channels: int, t: int) -> int:
        total = 0
        for conv in self.layers:
            total += conv.flops(batch, channels, t)
            t = t - conv.kernel + 1
        return total


# =====================================================
# RECURRENT LAYERS
# =====================================================

class LstmCell(Module):
    """Gate parameters of one LSTM layer, gate order (input, forget, cell, output)"""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        gates = 4 * hidden_size
        self.w_ih = uniform_param(rng, (input_size, gates), hidden_size, "w_ih")
        self.w_hh = uniform_param(rng, (hidden_size, gates), hidden_size, "w_hh")
        self.b_ih = uniform_param(rng, (gates,), hidden_size, "b_ih")
        self.b_hh = uniform_param(rng, (gates,), hidden_size, "b_hh")

    def step(self, x_proj: Tensor, state: LstmState) -> LstmState:
        """One recurrence step given the precomputed input projection x W_ih + b_ih"""
        h, c = state
        hs = self.hidden_size
        gates = ad.add(ad.add(x_proj, ad.matmul(h, self.w_hh)), self.b_hh)
        i = ad.sigmoid(gates[:, 0:hs])
        f = ad.sigmoid(gates[:, hs:2 * hs])
        g = ad.tanh(gates[:, 2 * hs:3 * hs])
        o = ad.sigmoid(gates[:, 3 * hs:4 * hs])
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        return h, c

    def flops(self, rows: int) -> int:
        gates = 4 * self.hidden_size
        return rows * (2 * gates * (self.input_size + self.hidden_size) + 2 * gates)


class LstmLayer(Module):
    """Unidirectional LSTM with 1 or more stacked layers and no dropout in between"""

    def __init__(
        self,
        input_size: int,
        rng: np.random.Generator,
        hidden_size: int = ARCHITECTURE_DEFAULTS["lstm_hidden"],
        num_layers: int = ARCHITECTURE_DEFAULTS["lstm_layers"],
    ):
        super().__init__()
        if num_layers < 1:
            raise ConfigError(f"LSTM needs at least one layer, got {num_layers}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.cells: List[LstmCell] = []
        for layer in range(num_layers):
            cell = LstmCell(input_size if layer == 0 else hidden_size, hidden_size, rng)
            self.cells.append(self.add_module(f"layer{layer}", cell))

    def zero_state(self, rows: int) -> LstmState:
        zeros = np.zeros((rows, self.hidden_size), dtype=default_dtype())
        return Tensor(zeros), Tensor(zeros.copy())

    def forward(self, x: Tensor, state: Optional[List[LstmState]] = None) -> Tuple[Tensor, List[LstmState]]:
        """[N, S, in] -> ([N, S, hidden], final (h, c) per layer)"""
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError("lstm", x.shape, (self.input_size,), detail="expected [N, S, input_size]")
        rows, steps = x.shape[0], x.shape[1]
        finals: List[LstmState] = []
        seq = x
        for layer, cell in enumerate(self.cells):
            carry = state[layer] if state is not None else self.zero_state(rows)
            projected = ad.add(ad.matmul(seq, cell.w_ih), cell.b_ih)
            outputs = []
            for t in range(steps):
                carry = cell.step(projected[:, t, :], carry)
                outputs.append(ad.reshape(carry[0], (rows, 1, self.hidden_size)))
            seq = ad.concatenate(outputs, axis=1)
            finals.append(carry)
        return seq, finals

    def forward_steps(
        self, xs: Sequence[Tensor], state: Optional[List[LstmState]] = None
    ) -> Tuple[List[Tensor], List[LstmState]]:
        """Per-step interface: list of [N, in] inputs -> list of [N, hidden] outputs"""
        stacked = ad.concatenate([ad.reshape(x, (x.shape[0], 1, x.shape[1])) for x in xs], axis=1)
        out, finals = self.forward(stacked, state)
        return [out[:, t, :] for t in range(len(xs))], finals

    def flops(self, rows: int, steps: int) -> int:
        return steps * sum(cell.flops(rows) for cell in self.cells)


class BiLstmLayer(Module):
    """Forward and backward LSTMs over the same sequence, outputs concatenated per step"""

    def __init__(
        self,
        input_size: int,
        rng: np.random.Generator,
        hidden_size: int = ARCHITECTURE_DEFAULTS["lstm_hidden"],
        num_layers: int = ARCHITECTURE_DEFAULTS["lstm_layers"],
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.forward_lstm = LstmLayer(input_size, rng, hidden_size, num_layers)
        self.backward_lstm = LstmLayer(input_size, rng, hidden_size, num_layers)

    @property
    def output_size(self) -> int:
        return 2 * self.hidden_size

    def forward(self, x: Tensor) -> Tensor:
        """[N, S, in] -> [N, S, 2 * hidden]"""
        fwd, _ = self.forward_lstm(x)
        bwd_rev, _ = self.backward_lstm(x[:, ::-1, :])
        return ad.concatenate([fwd, bwd_rev[:, ::-1, :]], axis=2)

    def flops(self, rows: int, steps: int) -> int:
        return self.forward_lstm.flops(rows, steps) + self.backward_lstm.flops(rows, steps)


# =====================================================
# ATTENTION
# =====================================================

def causal_mask(steps: int) -> np.ndarray:
    """Keep-mask allowing each query to see itself and earlier keys"""
    return np.tril(np.ones((steps, steps), dtype=bool))


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over a sequence, optionally causal, no dropout"""

    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = ARCHITECTURE_DEFAULTS["lstm_hidden"],
        heads: int = ARCHITECTURE_DEFAULTS["attn_heads"],
        causal: bool = True,
    ):
        super().__init__()
        if embed_dim % heads:
            raise ConfigError(f"embed dim {embed_dim} not divisible by {heads} heads")
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.causal = causal
        self.q_proj = Linear(embed_dim, embed_dim, rng)
        self.k_proj = Linear(embed_dim, embed_dim, rng)
        self.v_proj = Linear(embed_dim, embed_dim, rng)
        self.out_proj = Linear(embed_dim, embed_dim, rng)
        self.last_weights: Optional[np.ndarray] = None

    def _split_heads(self, t: Tensor, rows: int, steps: int) -> Tensor:
        return ad.transpose(ad.reshape(t, (rows, steps, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        """[N, S, D] or [S, D] -> same shape"""
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[2] != self.embed_dim:
            raise ShapeError("mhsa", x.shape, (self.embed_dim,))
        rows, steps = x.shape[0], x.shape[1]

        q = self._split_heads(self.q_proj(x), rows, steps)
        k = self._split_heads(self.k_proj(x), rows, steps)
        v = self._split_heads(self.v_proj(x), rows, steps)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(self.head_dim)))
        weights = ad.softmax(scores, mask=causal_mask(steps) if self.causal else None)
        self.last_weights = weights.data
        context = ad.matmul(weights, v)
        merged = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (rows, steps, self.embed_dim))
        out = self.out_proj(merged)
        if squeeze:
            out = ad.reshape(out, (steps, self.embed_dim))
        return out

    def flops(self, rows: int, steps: int) -> int:
        projections = 4 * self.q_proj.flops(rows * steps)
        # QK^T and AV, each steps * steps * embed_dim MACs per sequence
        mixing = 2 * (2 * rows * steps * steps * self.embed_dim)
        return projections + mixing


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x)) with GELU"""

    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = ARCHITECTURE_DEFAULTS["lstm_hidden"],
        heads: int = ARCHITECTURE_DEFAULTS["attn_heads"],
        mlp_ratio: int = ARCHITECTURE_DEFAULTS["mlp_ratio"],
        causal: bool = True,
    ):
        super().__init__()
        self.norm1 = LayerNorm(embed_dim)
        self.attn = MultiHeadSelfAttention(rng, embed_dim, heads, causal)
        self.norm2 = LayerNorm(embed_dim)
        self.fc1 = Linear(embed_dim, mlp_ratio * embed_dim, rng)
        self.fc2 = Linear(mlp_ratio * embed_dim, embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.norm2(x)))))

    def flops(self, rows: int, steps: int) -> int:
        tokens = rows * steps
        return self.attn.flops(rows, steps) + self.fc1.flops(tokens) + self.fc2.flops(tokens)


class TransformerStack(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        num_layers: int = ARCHITECTURE_DEFAULTS["transformer_layers"],
        embed_dim: int = ARCHITECTURE_DEFAULTS["lstm_hidden"],
        heads: int = ARCHITECTURE_DEFAULTS["attn_heads"],
        mlp_ratio: int = ARCHITECTURE_DEFAULTS["mlp_ratio"],
        causal: bool = True,
    ):
        super().__init__()
        self.blocks: List[TransformerBlock] = []
        for i in range(num_layers):
            block = TransformerBlock(rng, embed_dim, heads, mlp_ratio, causal)
            self.blocks.append(self.add_module(f"block{i}", block))

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def flops(self, rows: int, steps: int) -> int:
        return sum(block.flops(rows, steps) for block in self.blocks)


class PositionalEncoding(Module):
    """Fixed sinusoidal table added to a sequence; holds no learnable parameters"""

    def __init__(self, dim: int, max_positions: int = ARCHITECTURE_DEFAULTS["max_positions"]):
        super().__init__()
        self.dim = dim
        self.table = sinusoid_table(max_positions, dim)

    def forward(self, x: Tensor) -> Tensor:
        steps = x.shape[-2]
        if steps > self.table.shape[0]:
            self.table = sinusoid_table(steps, self.dim)
        return ad.add(x, Tensor(self.table[:steps]))


def sinusoid_table(positions: int, dim: int) -> np.ndarray:
    pos = np.arange(positions)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((positions, dim), dtype=default_dtype())
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


LAYER_TYPES: Dict[str, type] = {
    "conv": TimeConv,
    "conv_block": ConvBlock,
    "lstm": LstmLayer,
    "bilstm": BiLstmLayer,
    "mhsa": MultiHeadSelfAttention,
    "transformer": TransformerBlock,
    "projection": Projection,
    "classifier": Classifier,
}
