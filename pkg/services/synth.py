"""
Synthetic Activity Generator
Markov-chain activity sequences rendered as noisy per-class sinusoid signatures.
With context_rule set, the last class shares the signal signature of the
second-to-last class and can only be told apart by the activity before it.
"""
import bisect
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from services.data_pipeline import LABEL_MAP_NAME, RawRecording, write_csv, write_label_map
from services.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class SynthSpec:
    """Generator settings; the same settings and seed always produce the same recordings"""
    n_subjects: int = 4
    n_classes: int = 6
    n_channels: int = 3
    sampling_rate: float = 50.0
    seconds_per_subject: float = 300.0
    # Activity may only change on block boundaries
    block_seconds: float = 5.0
    stay_probability: float = 0.5
    noise: float = 0.3
    context_rule: bool = False
    transition: Optional[np.ndarray] = None
    seed: int = 0

    def transition_matrix(self) -> np.ndarray:
        matrix = self.transition if self.transition is not None else default_transition(
            self.n_classes, self.stay_probability, self.context_rule
        )
        validate_transition(matrix, self.n_classes)
        return np.asarray(matrix, dtype=np.float64)


def default_transition(n_classes: int, stay: float = 0.5, context_rule: bool = False) -> np.ndarray:
    """
    Stay with probability `stay`, otherwise move uniformly to an allowed class.
    Under the context rule, class n-2 is entered only from class 0 and class
    n-1 only from class 1.
    """
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if context_rule and n_classes < 4:
        raise ConfigError("context rule needs at least 4 classes")
    matrix = np.zeros((n_classes, n_classes))
    twin_a, twin_b = n_classes - 2, n_classes - 1
    for i in range(n_classes):
        allowed = [j for j in range(n_classes) if j != i]
        if context_rule:
            allowed = [j for j in allowed if j not in (twin_a, twin_b)]
            if i == 0:
                allowed.append(twin_a)
            elif i == 1:
                allowed.append(twin_b)
        matrix[i, i] = stay
        matrix[i, allowed] += (1.0 - stay) / len(allowed)
    return matrix


def validate_transition(matrix: np.ndarray, n_classes: int) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (n_classes, n_classes):
        raise ConfigError(f"transition matrix must be {n_classes}x{n_classes}, got {matrix.shape}")
    if not np.isfinite(matrix).all() or (matrix < 0).any():
        raise ConfigError("transition matrix entries must be finite and non-negative")
    if not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("transition matrix rows must sum to 1")


def stationary_distribution(matrix: np.ndarray) -> np.ndarray:
    """pi with pi P = pi and sum(pi) = 1 (least-squares solution for reducible chains)"""
    n = matrix.shape[0]
    system = np.vstack([matrix.T - np.eye(n), np.ones((1, n))])
    target = np.zeros(n + 1)
    target[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, target, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass
class Signatures:
    """Per-class, per-channel sinusoid parameters, each array [n_classes, n_channels]"""
    frequency: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    offset: np.ndarray


def make_signatures(spec: SynthSpec, rng: np.random.Generator) -> Signatures:
    shape = (spec.n_classes, spec.n_channels)
    # Well separated base frequencies per class, jittered per channel
    base = 0.5 + 1.5 * np.arange(spec.n_classes)[:, None]
    signatures = Signatures(
        frequency=base + rng.uniform(0.0, 0.5, shape),
        amplitude=rng.uniform(0.5, 1.5, shape),
        phase=rng.uniform(0.0, 2 * np.pi, shape),
        offset=rng.uniform(-1.0, 1.0, shape),
    )
    if spec.context_rule:
        twin_a, twin_b = spec.n_classes - 2, spec.n_classes - 1
        for arr in (signatures.frequency, signatures.amplitude, signatures.phase, signatures.offset):
            arr[twin_b] = arr[twin_a]
    return signatures


def sample_states(matrix: np.ndarray, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Markov chain path of length n_steps, started from the stationary distribution"""
    cumulative = [list(np.cumsum(row)) for row in matrix]
    pi = stationary_distribution(matrix)
    draws = rng.random(n_steps).tolist()
    states = np.empty(n_steps, dtype=np.int64)
    last = matrix.shape[0] - 1
    state = min(bisect.bisect_right(list(np.cumsum(pi)), draws[0]), last)
    states[0] = state
    for i in range(1, n_steps):
        state = min(bisect.bisect_right(cumulative[state], draws[i]), last)
        states[i] = state
    return states


def synth_generate(spec: SynthSpec) -> List[RawRecording]:
    matrix = spec.transition_matrix()
    if spec.n_subjects < 1 or spec.n_channels < 1:
        raise ConfigError("synthetic dataset needs at least one subject and one channel")
    n_samples = int(round(spec.seconds_per_subject * spec.sampling_rate))
    block = max(1, int(round(spec.block_seconds * spec.sampling_rate)))
    if n_samples < 1:
        raise ConfigError(f"{spec.seconds_per_subject}s at {spec.sampling_rate} Hz holds no sample")

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects + 1)
    signatures = make_signatures(spec, np.random.default_rng(children[0]))
    t = np.arange(n_samples) / spec.sampling_rate

    recordings = []
    for s, child in enumerate(children[1:]):
        rng = np.random.default_rng(child)
        n_blocks = -(-n_samples // block)
        labels = np.repeat(sample_states(matrix, n_blocks, rng), block)[:n_samples]
        freq = signatures.frequency[labels].T  # [C, N]
        signal = (
            signatures.amplitude[labels].T * np.sin(2 * np.pi * freq * t + signatures.phase[labels].T)
            + signatures.offset[labels].T
        )
        signal = signal + spec.noise * rng.standard_normal(signal.shape)
        recordings.append(
            RawRecording(
                subject_id=f"subject_{s + 1:02d}",
                sampling_rate=spec.sampling_rate,
                channel_names=[f"acc_{axis}" for axis in "xyz"[: spec.n_channels]]
                if spec.n_channels <= 3
                else [f"ch_{c}" for c in range(spec.n_channels)],
                data=signal,
                labels=labels,
            )
        )
    logger.info(
        f"Generated {spec.n_subjects} synthetic subjects x {n_samples} samples "
        f"({spec.n_classes} classes, context_rule={spec.context_rule})"
    )
    return recordings


def class_names(n_classes: int) -> Dict[str, int]:
    return {f"activity_{c}": c for c in range(n_classes)}


def write_dataset(recordings: List[RawRecording], directory: Union[str, Path], n_classes: int) -> List[Path]:
    """Write one CSV per subject plus the sidecar label map"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    label_map = class_names(n_classes)
    write_label_map(label_map, directory / LABEL_MAP_NAME)
    paths = [write_csv(r, directory / f"{r.subject_id}.csv", label_map) for r in recordings]
    logger.info(f"Wrote {len(paths)} recordings to {directory}")
    return paths
