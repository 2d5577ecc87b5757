import numpy as np
import pytest

from deepcsp.connectivity import (
    PHASE_METHODS,
    ConnectivityError,
    ConnectivityGraph,
    coherence,
    coherence_matrix,
    connectivity_matrix,
    graph_normalize,
    phase_matrix,
    phase_metric,
    read_graph_csv,
    write_graph_csv,
    write_graph_sidecar,
)
from deepcsp.data import EpochSet

FS = 128.0
BAND = (8.0, 30.0)
LAG_TOL = 0.02


def tone(n_samples, phase=0.0, freq=16.0):
    t = np.arange(n_samples) / FS
    return np.cos(2 * np.pi * freq * t + phase)


def noise_pair(rng, n_samples):
    return rng.standard_normal(n_samples), rng.standard_normal(n_samples)


# -----------------------------
# Coherence
# -----------------------------

def test_coherence_identical_and_negated(rng):
    x = rng.standard_normal(1024)
    assert coherence(x, x, FS, BAND) == pytest.approx(1.0, abs=1e-9)
    assert coherence(x, -x, FS, BAND) == pytest.approx(1.0, abs=1e-9)


def test_coherence_of_independent_noise_is_low(rng):
    x, y = noise_pair(rng, 128 * 65 // 2 * 2)
    assert coherence(x, y, FS, BAND) < 0.2


def test_coherence_needs_two_segments():
    with pytest.raises(ValueError):
        coherence(np.ones(200), np.ones(200), FS, BAND)


def test_coherence_matrix_symmetric_unit_diagonal(rng):
    matrix = coherence_matrix(rng.standard_normal((4, 1024)), FS, BAND)
    np.testing.assert_array_equal(matrix, matrix.T)
    np.testing.assert_array_equal(np.diag(matrix), np.ones(4))
    assert np.all((matrix >= 0) & (matrix <= 1))


# -----------------------------
# Phase synchrony
# -----------------------------

def test_zero_lag_copies(rng):
    x = rng.standard_normal(1024)
    assert phase_metric(x, x, FS, BAND, "plv") == pytest.approx(1.0, abs=1e-9)
    assert phase_metric(x, x, FS, BAND, "pli") == 0.0
    assert phase_metric(x, x, FS, BAND, "dpli") == 0.5
    assert phase_metric(x, x, FS, BAND, "wpli") == 0.0
    assert phase_metric(x, x, FS, BAND, "dwpli") == 0.0
    assert phase_metric(x, x, FS, BAND, "iplv") == 0.0


def test_duplicated_channels_in_a_set_have_no_lag(rng):
    base = rng.standard_normal((4, 2, 512))
    trials = np.concatenate([base, base[:, :1]], axis=1)
    epochs = EpochSet(trials, [0, 1, 0, 1], FS, ["a", "b", "a2"])
    for method, expected in (("pli", 0.0), ("dpli", 0.5), ("wpli", 0.0)):
        graph = connectivity_matrix(epochs, method, BAND)
        assert graph.adjacency[0, 2] == expected, method


def test_constant_lag_tone():
    x = tone(1280)
    y = tone(1280, -np.pi / 4)
    assert phase_metric(x, y, FS, BAND, "plv") == pytest.approx(1.0, abs=LAG_TOL)
    assert phase_metric(x, y, FS, BAND, "pli") == pytest.approx(1.0, abs=LAG_TOL)
    assert phase_metric(x, y, FS, BAND, "dpli") == pytest.approx(1.0, abs=LAG_TOL)
    assert phase_metric(x, y, FS, BAND, "iplv") == pytest.approx(np.sin(np.pi / 4), abs=LAG_TOL)
    assert phase_metric(x, y, FS, BAND, "wpli") == pytest.approx(1.0, abs=1e-9)
    assert phase_metric(y, x, FS, BAND, "dpli") == pytest.approx(0.0, abs=LAG_TOL)


def test_independent_signals_are_unsynchronized(rng):
    x, y = noise_pair(rng, 10000)
    assert phase_metric(x, y, FS, BAND, "plv") < 0.1
    assert phase_metric(x, y, FS, BAND, "pli") < 0.1
    assert 0.45 <= phase_metric(x, y, FS, BAND, "dpli") <= 0.55


@pytest.mark.parametrize("method", PHASE_METHODS)
def test_symmetry_and_bounds(rng, method):
    x, y = noise_pair(rng, 2048)
    y = 0.6 * y + 0.4 * np.roll(x, 3)
    forward = phase_metric(x, y, FS, BAND, method)
    backward = phase_metric(y, x, FS, BAND, method)
    assert 0.0 <= forward <= 1.0
    if method == "dpli":
        assert forward == pytest.approx(1.0 - backward, abs=1e-12)
    else:
        assert forward == pytest.approx(backward, abs=1e-12)


@pytest.mark.parametrize("method", ["plv", "iplv", "wpli", "dwpli"])
def test_amplitude_invariance(rng, method):
    x, y = noise_pair(rng, 2048)
    y = y + np.roll(x, 2)
    base = phase_metric(x, y, FS, BAND, method)
    assert phase_metric(3.0 * x, 0.2 * y, FS, BAND, method) == pytest.approx(base, abs=1e-9)


def test_phase_matrix_diagonals(rng):
    trial = rng.standard_normal((3, 1024))
    expected = {"plv": 1.0, "iplv": 0.0, "pli": 0.0, "dpli": 0.5, "wpli": 0.0, "dwpli": 0.0}
    for method, diagonal in expected.items():
        matrix, clamped = phase_matrix(trial, FS, BAND, method)
        np.testing.assert_array_equal(np.diag(matrix), np.full(3, diagonal))
        assert clamped >= 0


def test_silent_channel_is_rejected(rng):
    trial = np.stack([rng.standard_normal(1024), np.zeros(1024)])
    with pytest.raises(ConnectivityError):
        phase_matrix(trial, FS, BAND, "plv")


def test_unknown_method(rng):
    with pytest.raises(ConnectivityError):
        phase_metric(np.ones(512), np.ones(512), FS, BAND, "granger")


# -----------------------------
# Graphs
# -----------------------------

def epochs_from(trials):
    trials = np.asarray(trials)
    labels = np.arange(trials.shape[0]) % 2
    names = [f"Ch{i}" for i in range(trials.shape[1])]
    return EpochSet(trials, labels, FS, names)


def test_duplicated_channel_is_fully_connected(rng):
    base = rng.standard_normal((4, 1, 1024))
    other = rng.standard_normal((4, 1, 1024))
    epochs = epochs_from(np.concatenate([base, base, other], axis=1))
    for method in ("plv", "coh"):
        graph = connectivity_matrix(epochs, method, BAND)
        assert graph.adjacency[0, 1] == pytest.approx(1.0, abs=1e-9)
        assert graph.trials_used == 4
        assert not graph.directed


def test_independent_channels_stay_weak():
    rng = np.random.default_rng(17)
    graph = connectivity_matrix(epochs_from(rng.standard_normal((50, 2, 1024))), "plv", BAND)
    assert graph.adjacency[0, 1] < 0.2


def test_dpli_matrix_complementarity(rng):
    graph = connectivity_matrix(epochs_from(rng.standard_normal((3, 4, 1024))), "dpli", BAND)
    assert graph.directed
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_allclose((graph.adjacency + graph.adjacency.T)[off], 1.0, atol=1e-9)


def test_connectivity_needs_two_channels(rng):
    with pytest.raises(ConnectivityError):
        connectivity_matrix(epochs_from(rng.standard_normal((2, 1, 1024))), "plv", BAND)


def test_normalize_uniform_complete_graph():
    graph = ConnectivityGraph(np.ones((3, 3)), "plv", BAND)
    normalized = graph_normalize(graph)
    np.testing.assert_allclose(normalized, (np.ones((3, 3)) - np.eye(3)) / 2)


def test_normalize_threshold_above_all_weights_is_self_only():
    graph = ConnectivityGraph(np.full((3, 3), 0.4), "plv", BAND)
    normalized = graph_normalize(graph, threshold=0.9)
    np.testing.assert_array_equal(normalized, np.zeros((3, 3)))
    graph_normalize(graph, threshold=0.9)
    assert len(graph.issues) == 1
    assert graph.issues[0]["severity"] == "warning"
    assert "3 isolated node(s)" in graph.issues[0]["message"]


def test_normalize_random_graph_rows_sum_to_one(rng):
    weights = rng.uniform(0.05, 1.0, (6, 6))
    graph = ConnectivityGraph((weights + weights.T) / 2, "wpli", BAND)
    normalized = graph_normalize(graph, self_loops=True)
    np.testing.assert_allclose(normalized.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(normalized) > 0)


def test_normalize_folds_dpli():
    adjacency = np.array([[0.5, 0.9, 0.5], [0.1, 0.5, 0.7], [0.5, 0.3, 0.5]])
    normalized = graph_normalize(ConnectivityGraph(adjacency, "dpli", BAND, directed=True))
    np.testing.assert_allclose(normalized[0], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(normalized[1], [0.8 / 1.2, 0.0, 0.4 / 1.2])


def test_graph_csv_round_trip(tmp_path, rng):
    adjacency = rng.uniform(size=(3, 3))
    path = str(tmp_path / "graph.csv")
    write_graph_csv(path, adjacency, ["C3", "Cz", "C4"])
    names, loaded = read_graph_csv(path)
    assert names == ["C3", "Cz", "C4"]
    np.testing.assert_array_equal(loaded, adjacency)

    sidecar = tmp_path / "graph.json"
    write_graph_sidecar(str(sidecar), ConnectivityGraph(adjacency, "coh", BAND, trials_used=7))
    assert '"trials_used": 7' in sidecar.read_text()
