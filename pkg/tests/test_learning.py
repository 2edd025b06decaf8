"""
Desk-scale learning runs on synthetic data. Each takes minutes; deselect with
-m "not slow".

All runs use a reduced protocol so they finish on one laptop core: 2 conv
layers of 16 filters (kernel 5), LSTM width 32, base learning rate 2e-3 with
the usual 0.9 decay every 10 epochs, and 20 Hz data except where noted. The
full-width models (4 x 64 filters, width 128, lr 1e-4) need an order of
magnitude more compute to reach the same scores.
"""
import numpy as np
import pytest

from services.experiment import parse_experiment, run_batch_sweep, run_loso
from services.metrics import f1_from_confusion
from services.synth import SynthSpec, synth_generate

pytestmark = pytest.mark.slow

SMALL_MODEL = {
    "kernel": 5,
    "conv_layers": 2,
    "filters": 16,
    "lstm_hidden": 32,
    "attn_heads": 4,
    "dropout": 0.3,
}

REDUCED_LR = 2e-3


def _experiment(variants, sampling_rate, n_classes, seeds, epochs, base_lr=REDUCED_LR):
    return parse_experiment(
        {
            "name": "learning",
            "dataset": {"paths": [], "sampling_rate": sampling_rate, "n_classes": n_classes},
            "window": {"window_seconds": 1.0, "overlap_seconds": 0.5},
            "model": {**SMALL_MODEL, "variants": variants},
            "training": {"epochs": epochs, "train_batch": 100, "base_lr": base_lr, "seeds": seeds},
        }
    )


def _context_rule_recordings(n_subjects: int, seconds: float):
    """
    Four classes; classes 2 and 3 share one signal signature and are entered
    only from class 0 and class 1 respectively.
    """
    return synth_generate(
        SynthSpec(
            n_subjects=n_subjects,
            n_classes=4,
            n_channels=2,
            sampling_rate=20.0,
            seconds_per_subject=seconds,
            block_seconds=4.0,
            stay_probability=0.3,
            noise=0.2,
            context_rule=True,
            seed=3,
        )
    )


def test_separable_data_is_learned_by_all_three_architectures():
    recordings = synth_generate(
        SynthSpec(n_subjects=4, n_classes=6, n_channels=3, sampling_rate=50.0, seconds_per_subject=300.0, seed=1)
    )
    config = _experiment(
        ["deepconvlstm", "shallow_deepconvlstm", "dcc_lstm"],
        sampling_rate=50.0,
        n_classes=6,
        seeds=[1],
        epochs=30,
    )
    result = run_loso(config, recordings)
    for summary in result.variants:
        assert summary.aggregate.macro_f1 >= 0.9, summary.variant


def test_parallel_folds_match_sequential():
    recordings = synth_generate(
        SynthSpec(n_subjects=3, n_classes=4, n_channels=2, sampling_rate=20.0, seconds_per_subject=60.0, seed=2)
    )
    config = _experiment(["dcc_lstm"], sampling_rate=20.0, n_classes=4, seeds=[1, 2], epochs=2)
    sequential = run_loso(config, recordings, workers=1)
    parallel = run_loso(config, recordings, workers=2)
    assert sequential.metrics_json() == parallel.metrics_json()


def test_inter_window_models_resolve_context_dependent_classes():
    """
    A model scoring windows in isolation cannot tell the twin classes apart,
    so its F1 on that pair stays near chance (about 0.5).
    """
    recordings = _context_rule_recordings(n_subjects=4, seconds=300.0)
    config = _experiment(
        ["deepconvlstm", "shallow_deepconvlstm", "dcc_lstm"],
        sampling_rate=20.0,
        n_classes=4,
        seeds=[1, 2, 3],
        epochs=30,
    )
    result = run_loso(config, recordings)
    f1 = {s.variant: s.aggregate.macro_f1 for s in result.variants}
    assert f1["shallow_deepconvlstm"] - f1["deepconvlstm"] >= 0.15
    assert f1["dcc_lstm"] - f1["deepconvlstm"] >= 0.15

    window_only = [r for r in result.runs if r.variant == "deepconvlstm"]
    confusion = np.sum([np.asarray(r.metrics.confusion) for r in window_only], axis=0)
    twins = f1_from_confusion(confusion)[2:]
    assert np.nanmean(twins) <= 0.6


def test_longer_batches_give_more_context():
    recordings = _context_rule_recordings(n_subjects=3, seconds=300.0)
    config = _experiment(["dcc_lstm"], sampling_rate=20.0, n_classes=4, seeds=[1], epochs=30)
    report = run_batch_sweep(config, [1, 100], recordings)

    f1 = {row.batch_size: row.macro_f1 for row in report.rows}
    assert f1[100] > f1[1]
    assert [row.context_length_seconds for row in report.rows] == [0.5, 50.0]
