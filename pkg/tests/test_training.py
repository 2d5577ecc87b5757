import time

import numpy as np
import pytest

import deepcsp.csp
import deepcsp.training
from deepcsp.csp import class_covariances, csp_fit, deepcsp_loss, deepcsp_loss_node
from deepcsp.data import SynthSpec, split, standard_positions, synth_generate
from deepcsp.models import FEATURE_GROUP, ModelConfig, extract_latents, init_params, latent_node, tape_parameters
from deepcsp.numcore import Tape
from deepcsp.training import (
    TrainConfig,
    TrainingError,
    _feature_step,
    evaluate,
    export_scatter,
    export_topomap,
    sgd_step,
    train,
    train_csp_baseline,
)


def quick_config(**overrides):
    values = dict(epochs=3, n_components=2, seed=9, early_stop_patience=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_feature=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(estimator="granger")
    assert TrainConfig().lr_feature == 0.01
    assert TrainConfig().lr_classifier == 0.1
    assert TrainConfig().batch_size == 64


def test_sgd_step_rounds_to_storage_dtype():
    params = init_params(ModelConfig("csp", n_channels=4, fs=16.0, n_components=1))
    before = params.tensors["classifier.w2"].copy()
    grads = {"classifier.w2": np.ones_like(before, dtype=np.float64)}
    sgd_step(params, grads, ["classifier.w2"], 0.5)
    assert params.tensors["classifier.w2"].dtype == np.float32
    np.testing.assert_allclose(params.tensors["classifier.w2"], before - 0.5, atol=1e-6)


def test_zero_learning_rates_leave_parameters_untouched(small_epochs):
    config = quick_config(lr_feature=0.0, lr_classifier=0.0)
    result = train(small_epochs, config)
    fresh = init_params(ModelConfig("shallow-deepcsp", n_channels=6, fs=128.0, n_components=2, seed=9))
    assert result.params.checksum() == fresh.checksum()


def test_training_is_deterministic(small_epochs):
    first = train(small_epochs, quick_config())
    second = train(small_epochs, quick_config())
    assert first.history == second.history
    assert first.params.checksum() == second.params.checksum()
    assert first.bank.checksum() == second.bank.checksum()


def test_history_starts_with_initial_state(small_epochs):
    seen = []
    result = train(small_epochs, quick_config(), on_epoch=seen.append)
    assert [m.epoch for m in result.history] == [0, 1, 2, 3]
    assert seen == result.history
    for metrics in result.history:
        assert 0.0 <= metrics.accuracy <= 1.0
        assert metrics.val_accuracy is not None
        assert len(metrics.eigenvalues) == 24
        assert -1.0 <= metrics.deepcsp_loss <= -0.5 + 1e-12


def test_chunked_feature_step_matches_single_tape(small_epochs, monkeypatch):
    params = init_params(ModelConfig("shallow-deepcsp", n_channels=6, fs=128.0, n_components=2, seed=9))
    latents = extract_latents(params, small_epochs.trials)
    state = deepcsp_loss(latents, small_epochs.labels, 2)
    names = params.names(FEATURE_GROUP)

    tape = Tape()
    nodes = tape_parameters(tape, params, names)
    loss, _ = deepcsp_loss_node(tape, latent_node(tape, small_epochs.trials, nodes, params), small_epochs.labels, 2)
    reference = params.copy()
    sgd_step(reference, tape.backward(loss), names, 1.0)

    monkeypatch.setattr(deepcsp.training, "FEATURE_CHUNK", 7)
    chunked = params.copy()
    _feature_step(chunked, small_epochs, quick_config(lr_feature=1.0), 1, latents, state)
    for name in names:
        np.testing.assert_allclose(chunked.tensors[name], reference.tensors[name], rtol=1e-5, atol=1e-7)


def test_exploding_learning_rate_is_reported(small_epochs):
    with pytest.raises(TrainingError):
        train(small_epochs, quick_config(lr_feature=1e300, epochs=2))


def test_degenerate_spectrum_is_an_issue(small_epochs, monkeypatch):
    monkeypatch.setattr(deepcsp.csp, "_selection_degenerate", lambda *args, **kwargs: True)
    result = train(small_epochs, quick_config(epochs=2))
    degenerate = [issue for issue in result.issues if "degenerate" in issue["message"]]
    assert len(degenerate) == 1
    assert degenerate[0]["component"] == "training"
    assert "3 epoch(s), first at epoch 0" in degenerate[0]["message"]


def test_stop_request_interrupts_between_epochs(small_epochs):
    result = train(small_epochs, quick_config(epochs=50), stop_requested=lambda: True)
    assert result.interrupted
    assert len(result.history) == 1
    assert result.best_epoch == 0


def test_early_stopping_keeps_best_epoch(small_epochs):
    result = train(small_epochs, quick_config(epochs=40, early_stop_patience=2))
    monitored = [m.val_cross_entropy for m in result.history]
    assert result.best_epoch == int(np.argmin(monitored))
    if result.stopped_early:
        assert len(result.history) - 1 - result.best_epoch == 2


def test_training_needs_both_classes(small_epochs):
    single = small_epochs.subset(np.flatnonzero(small_epochs.labels == 0))
    with pytest.raises(ValueError):
        train(single, quick_config())


def test_gcn_training_records_graph(small_epochs):
    result = train(small_epochs, quick_config(variant="shallow-gcn", epochs=1))
    assert result.graph is not None
    assert result.graph.estimator == "plv"
    assert result.params.adjacency.shape == (6, 6)
    np.testing.assert_allclose(result.params.adjacency.sum(axis=1), 1.0, atol=1e-12)


def test_gcn_isolated_nodes_reach_the_issues(small_epochs):
    result = train(small_epochs, quick_config(variant="shallow-gcn", epochs=1, threshold=2.0))
    assert any("isolated" in issue["message"] for issue in result.issues)
    np.testing.assert_array_equal(result.params.adjacency, 0.0)


def test_evaluate_flipped_labels_and_empty_set(small_epochs):
    result = train(small_epochs, quick_config())
    metrics = evaluate(result.params, result.bank, small_epochs)
    flipped = evaluate(result.params, result.bank, small_epochs.flip_labels())
    assert flipped.accuracy == pytest.approx(1.0 - metrics.accuracy, abs=1e-12)
    with pytest.raises(ValueError):
        evaluate(result.params, result.bank, small_epochs.subset([]))


def test_evaluate_does_not_touch_the_bank(small_epochs):
    result = train(small_epochs, quick_config())
    before = (result.bank.checksum(), result.params.checksum())
    evaluate(result.params, result.bank, small_epochs)
    assert (result.bank.checksum(), result.params.checksum()) == before


def test_csp_baseline_separates_planted_set(planted):
    epochs, _ = planted
    train_set, test_set = split(epochs, 0.8, seed=1)
    result = train_csp_baseline(train_set, TrainConfig(n_components=2, seed=1))
    assert result.bank.names() == epochs.channel_names
    assert evaluate(result.params, result.bank, test_set).accuracy >= 0.9


def test_shallow_deepcsp_learns_planted_set(planted):
    epochs, _ = planted
    result = train(epochs, TrainConfig(epochs=60, seed=4, early_stop_patience=0))
    assert result.history[-1].accuracy >= 0.75


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["shallow-deepcsp", "shallow-gcn"])
def test_full_protocol_reaches_holdout_accuracy(variant):
    epochs, _ = synth_generate(SynthSpec(fs=512.0, n_samples=2560, trials_per_class=100, seed=21))
    train_set, test_set = split(epochs, 0.8, seed=21)
    started = time.perf_counter()
    result = train(train_set, TrainConfig(variant=variant, seed=21))
    assert time.perf_counter() - started <= 300.0
    assert evaluate(result.params, result.bank, test_set).accuracy >= 0.9


@pytest.mark.slow
def test_top_eigenvalue_trend_is_non_decreasing():
    profiles = np.ones((2, 15))
    profiles[0, 0] = 16.0
    epochs, _ = synth_generate(SynthSpec(profiles=profiles, seed=2))
    result = train(epochs, TrainConfig(n_components=1, epochs=60, early_stop_patience=0, seed=2))
    top = [m.eigenvalues[0] for m in result.history]
    assert all(later >= earlier - 0.02 for earlier, later in zip(top, top[1:]))
    assert top[-1] >= top[0] - 0.02
    assert np.mean(result.history[-1].eigenvalues[:1]) > 0.8


# -----------------------------
# Exports
# -----------------------------

def test_export_scatter_columns_and_separation(planted):
    epochs, _ = planted
    bank = csp_fit(*class_covariances(epochs), 2)
    rows = export_scatter(epochs.trials, epochs.labels, bank, n=2)
    assert len(rows) == epochs.n_trials
    assert all(len(row) == 3 for row in rows)
    table = np.array(rows)
    for column in (0, 1):
        gap = table[table[:, 2] == 0, column].mean() - table[table[:, 2] == 1, column].mean()
        assert abs(gap) > 1.0

    single = export_scatter(epochs.trials[0], epochs.labels[:1], bank, n=3)
    assert len(single) == 1 and len(single[0]) == 4


def test_export_topomap_identity_bank():
    names = ["C3", "Cz", "C4"]
    components = export_topomap(np.eye(3)[:, [0, 2]], names, standard_positions(names))
    assert len(components) == 2
    for column, component in zip((0, 2), components):
        assert len(component["records"]) == 3
        weights = [record["weight"] for record in component["records"]]
        assert weights == [1.0 if idx == column else 0.0 for idx in range(3)]
    with pytest.raises(ValueError):
        export_topomap(np.eye(3), names, {"C3": [0.0, 0.0]})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_topomap_localizes_planted_channel(seed):
    epochs, _ = synth_generate(SynthSpec(mixing_kind="identity", seed=seed))
    bank = csp_fit(*class_covariances(epochs), 2, epochs.channel_names)
    positions = dict(zip(epochs.channel_names, epochs.channel_positions.tolist()))
    top = export_topomap(bank.filters, epochs.channel_names, positions)[0]["records"]
    assert int(np.argmax([abs(record["weight"]) for record in top])) == 0


def _single_source_hits(channel: int, seeds) -> int:
    hits = 0
    for seed in seeds:
        profiles = np.ones((2, 15))
        profiles[0, channel], profiles[1, channel] = 4.0, 0.25
        epochs, _ = synth_generate(SynthSpec(mixing_kind="identity", profiles=profiles, seed=seed))
        bank = csp_fit(*class_covariances(epochs), 1, epochs.channel_names)
        positions = dict(zip(epochs.channel_names, epochs.channel_positions.tolist()))
        top = export_topomap(bank.filters, epochs.channel_names, positions)[0]["records"]
        hits += int(np.argmax([abs(record["weight"]) for record in top])) == channel
    return hits


@pytest.mark.slow
@pytest.mark.parametrize("channel", [0, 7])
def test_topomap_localizes_single_source_across_seeds(channel):
    assert _single_source_hits(channel, range(20)) >= 19
