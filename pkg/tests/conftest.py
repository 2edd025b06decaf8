"""
Shared fixtures and helpers: finite-difference gradient checks, small recordings
and a tiny experiment configuration that trains in seconds.
"""
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pytest

from config.settings import runtime_config
from services.autodiff import Tape, Tensor, backward, mul, sum_
from services.data_pipeline import RawRecording
from services.experiment import parse_experiment


@pytest.fixture(autouse=True)
def float64_runtime(monkeypatch):
    monkeypatch.setattr(runtime_config, "dtype", "float64")
    monkeypatch.setattr(runtime_config, "check_finite", True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    max_coords: Optional[int] = None,
) -> float:
    """
    Worst relative error between tape gradients and central differences of
    sum(fn(*inputs) * R) for a fixed random projection R.
    """
    with Tape() as tape:
        out = fn(*inputs)
        proj = Tensor(rng.standard_normal(out.shape))
        loss = sum_(mul(out, proj))
    backward(tape, loss, inputs)

    def objective() -> float:
        return float((fn(*inputs).data * proj.data).sum())

    worst = 0.0
    for x in inputs:
        analytic = x.grad.reshape(-1)
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        flat = x.data.reshape(-1)
        for k, i in enumerate(coords):
            original = flat[i]
            flat[i] = original + h
            plus = objective()
            flat[i] = original - h
            minus = objective()
            flat[i] = original
            numeric[k] = (plus - minus) / (2 * h)
        picked = analytic[coords]
        scale = max(np.linalg.norm(picked), np.linalg.norm(numeric), 1e-10)
        worst = max(worst, float(np.linalg.norm(picked - numeric) / scale))
    return worst


def make_recording(
    labels: Sequence[int],
    subject_id: str = "s1",
    channels: int = 2,
    rate: float = 10.0,
    seed: int = 0,
) -> RawRecording:
    labels = np.asarray(labels, dtype=np.int64)
    data = np.random.default_rng(seed).standard_normal((channels, labels.size))
    return RawRecording(
        subject_id=subject_id,
        sampling_rate=rate,
        channel_names=[f"ch{c}" for c in range(channels)],
        data=data,
        labels=labels,
    )


TINY_MODEL: Dict = {
    "kernel": 3,
    "conv_layers": 2,
    "filters": 4,
    "lstm_hidden": 8,
    "attn_heads": 2,
    "transformer_layers": 1,
    "mlp_ratio": 2,
    "dropout": 0.1,
}


def tiny_experiment(
    variants: List[str],
    epochs: int = 3,
    seeds: Sequence[int] = (1,),
    train_batch: int = 20,
    base_lr: float = 5e-3,
    sampling_rate: float = 20.0,
    **overrides,
):
    data = {
        "name": "tiny",
        "dataset": {"paths": [], "sampling_rate": sampling_rate},
        "window": {"window_seconds": 1.0, "overlap_seconds": 0.5},
        "model": {**TINY_MODEL, "variants": variants},
        "training": {
            "epochs": epochs,
            "train_batch": train_batch,
            "base_lr": base_lr,
            "seeds": list(seeds),
        },
    }
    data.update(overrides)
    return parse_experiment(data)
