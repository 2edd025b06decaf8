"""
Optimizer and Learning-Rate Schedule
Bias-corrected Adam with L2 weight decay (coupled by default) and a step-decay schedule
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from config.settings import ADAM_DEFAULTS, TRAINING_DEFAULTS
from services.autodiff import Tensor
from services.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moment estimates and the shared step counter"""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


@dataclass
class LrSchedule:
    """lr(e) = base_lr * decay_factor ** floor(e / decay_period_epochs)"""
    base_lr: float = TRAINING_DEFAULTS["base_lr"]
    decay_factor: float = TRAINING_DEFAULTS["decay_factor"]
    decay_period_epochs: int = TRAINING_DEFAULTS["decay_period_epochs"]

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_period_epochs < 1:
            raise ConfigError(f"decay_period_epochs must be >= 1, got {self.decay_period_epochs}")

    def lr_at_epoch(self, epoch: int) -> float:
        return lr_at_epoch(self, epoch)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return schedule.base_lr * schedule.decay_factor ** math.floor(epoch / schedule.decay_period_epochs)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = TRAINING_DEFAULTS["weight_decay"],
    decoupled: bool = False,
) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Coupled decay adds weight_decay * param to the gradient before the moment
    updates; decoupled decay shrinks the parameter by lr * weight_decay instead.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError("adam_step", (len(params),), (len(grads),), detail="parameter/gradient count")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or len(state.v) != len(params):
        raise ShapeError(
            "adam_step", (len(params),), (len(state.m), len(state.v)), detail="state does not match parameters"
        )
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        if p.shape != m.shape or p.shape != v.shape:
            raise ShapeError("adam_step", p.shape, m.shape, v.shape, detail="moment shapes")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t

    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        if weight_decay and decoupled:
            p -= lr * weight_decay * p
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Adam bound to a fixed list of parameter tensors"""

    def __init__(
        self,
        params: Sequence[Tensor],
        weight_decay: float = TRAINING_DEFAULTS["weight_decay"],
        decoupled: bool = TRAINING_DEFAULTS["decoupled_weight_decay"],
        beta1: float = ADAM_DEFAULTS["beta1"],
        beta2: float = ADAM_DEFAULTS["beta2"],
        eps: float = ADAM_DEFAULTS["eps"],
    ):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = AdamState.for_params([p.data for p in self.params], beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(
            [p.data for p in self.params],
            grads,
            self.state,
            lr,
            weight_decay=self.weight_decay,
            decoupled=self.decoupled,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
