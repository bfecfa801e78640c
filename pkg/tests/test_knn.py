import numpy as np
import pytest

from oracles import brute_knn
from pdvoice.errors import EmptyChunk, EmptyTrainingSet, EvenK
from pdvoice.knn import FeatureVector, Standardizer, extract_features, knn_classify, knn_predict

SR = 16000


def test_features_zero_signal():
    f = extract_features(np.zeros(512))
    assert (f.rms_energy, f.zero_crossing_rate, f.autocorr_pitch, f.energy_std) == (0.0, 0.0, 0.0, 0.0)


def test_features_alternating():
    f = extract_features(np.tile([1.0, -1.0], 256))
    assert f.zero_crossing_rate == pytest.approx(1.0)
    assert f.rms_energy == pytest.approx(1.0)


def test_features_square_wave_pitch():
    t = np.arange(2048)
    square = np.where((t % 160) < 80, 1.0, -1.0)  # 100 Hz at 16 kHz
    f = extract_features(square)
    assert abs(f.autocorr_pitch - 160) <= 1


def test_features_finite_and_bounded(rng):
    for _ in range(20):
        f = extract_features(rng.standard_normal(rng.integers(1, 600)))
        arr = f.as_array()
        assert np.all(np.isfinite(arr))
        assert 0.0 <= f.zero_crossing_rate <= 1.0


def test_features_circular_shift(rng):
    x = rng.standard_normal(1000)
    a = extract_features(x)
    for shift in (1, 37, 999):
        b = extract_features(np.roll(x, shift))
        assert abs(a.rms_energy - b.rms_energy) < 1e-9
        assert abs(a.zero_crossing_rate - b.zero_crossing_rate) < 1e-9


def test_features_empty():
    with pytest.raises(EmptyChunk):
        extract_features(np.zeros(0))


def fv(*vals):
    return FeatureVector(*map(float, vals))


def test_classify_identity_and_vote():
    train = [(fv(0, 0, 0, 0), "HC"), (fv(5, 5, 5, 5), "PD"), (fv(9, 1, 3, 2), "HC")]
    assert knn_classify(train, fv(5, 5, 5, 5), k=1) == "PD"
    train = [(fv(1, 0, 0, 0), "PD"), (fv(1.1, 0, 0, 0), "PD"), (fv(0.9, 0, 0, 0), "HC"), (fv(10, 0, 0, 0), "HC")]
    assert knn_classify(train, fv(1.0, 0, 0, 0), k=3) == "PD"


def test_classify_errors():
    with pytest.raises(EvenK):
        knn_classify([(fv(0, 0, 0, 0), "HC")] * 3, fv(0, 0, 0, 0), k=2)
    with pytest.raises(EmptyTrainingSet):
        knn_classify([], fv(0, 0, 0, 0), k=1)


def test_distance_ties_use_training_order():
    x = np.array([[1.0], [-1.0], [1.0]])
    assert knn_predict(x, ["PD", "HC", "HC"], [[0.0]], k=1) == ["PD"]
    assert knn_predict(x, ["HC", "PD", "PD"], [[0.0]], k=1) == ["HC"]


def test_standardizer_uses_training_stats(rng):
    x = rng.standard_normal((30, 4)) * [1, 2, 3, 0] + [5, 0, -1, 7]
    s = Standardizer.fit(x)
    z = s.transform(x)
    assert np.allclose(z[:, :3].mean(axis=0), 0) and np.allclose(z[:, :3].std(axis=0), 1)
    assert np.all(z[:, 3] == 0)


def test_matches_brute_force(rng):
    agree = 0
    for _ in range(50):
        n = int(rng.integers(1, 201))
        d = int(rng.integers(1, 5))
        # coarse grid values make exact distance ties common
        train_x = rng.integers(-3, 4, size=(n, d)).astype(float)
        train_y = list(rng.choice(["HC", "PD"], size=n))
        queries = rng.integers(-3, 4, size=(10, d)).astype(float)
        k = int(rng.choice([k for k in (1, 3, 5, 7) if k <= n] or [1]))
        got = knn_predict(train_x, train_y, queries, k)
        want = [brute_knn(train_x.tolist(), train_y, q.tolist(), k) for q in queries]
        assert got == want
        agree += 1
    assert agree == 50
