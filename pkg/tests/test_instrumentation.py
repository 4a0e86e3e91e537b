import numpy as np
import pytest

from amilab import tensor as T
from amilab.errors import ConfigurationError
from amilab.instrumentation import batch_witness_stats, trace, witness_stats
from amilab.model import default_spec, init_params, TrainedModel, zero_model
from amilab.rng import Rng


@pytest.fixture(scope="module")
def model():
    spec = default_spec(4)
    return TrainedModel(spec, init_params(spec, Rng(3)))


def test_zero_image_zero_biases_gives_zero_trace(model):
    tr = trace(model, np.zeros((2, 1, 16, 16)))
    assert all(np.all(v == 0) for v in tr.values.values())


def test_trace_is_deterministic_and_transparent(model):
    x = Rng(4).uniform(0, 1, (5, 1, 16, 16))
    a, b = trace(model, x), trace(model, x)
    assert all(a.values[l].tobytes() == b.values[l].tobytes() for l in a.layers)
    assert a.logits.tobytes() == model.logits(x).tobytes()
    assert a.layers == [1, 4, 7]
    assert all(np.all(v >= 0) for v in a.values.values())


def test_dense_values_match_manual_recomputation(model):
    x = Rng(5).uniform(0, 1, (3, 1, 16, 16))
    h = x
    for i in range(7):
        layer = model.spec.layers[i]
        if layer["type"] == "conv":
            h = T.conv2d_forward(h, *model.params[i])
        elif layer["type"] == "dense":
            h = T.dense_forward(h, *model.params[i])
        elif layer["type"] == "relu":
            h = T.relu(h)
        elif layer["type"] == "maxpool":
            h = T.maxpool2x2(h)
        else:
            h = T.flatten(h)
    h = T.relu(h)
    assert trace(model, x, [7]).values[7].tobytes() == h.tobytes()


def test_conv_units_are_channel_means(model):
    x = Rng(6).uniform(0, 1, (2, 1, 16, 16))
    act = T.relu(T.conv2d_forward(x, *model.params[0]))
    means = np.array([[sum(float(v) for v in act[n, c].ravel()) / act[n, c].size for c in range(8)] for n in range(2)])
    assert np.max(np.abs(trace(model, x, [1]).values[1] - means)) < 1e-15


def test_non_relu_layer_rejected(model):
    with pytest.raises(ConfigurationError):
        trace(model, np.zeros((1, 1, 16, 16)), [0])


def test_witness_stats_hand_cases():
    s = witness_stats(np.array([3.0, 7.0]), [0])
    assert (s.mean, s.std, s.min, s.count) == (3.0, 0.0, 3.0, 1)
    s = witness_stats(np.array([1.0, 5.0, 3.0]), [0, 2])
    assert (s.mean, s.std, s.min) == (2.0, 1.0, 1.0)
    assert witness_stats(np.array([1.0]), []) is None


def test_witness_stats_two_pass_oracle_and_permutation():
    rng = Rng(7)
    v = rng.uniform(0, 5, 80)
    idx = list(rng.permutation(80)[:50])
    vals = [float(v[i]) for i in idx]
    mu = sum(vals) / len(vals)
    sd = (sum((x - mu) ** 2 for x in vals) / len(vals)) ** 0.5
    s = witness_stats(v, idx)
    assert abs(s.mean - mu) < 1e-12 and abs(s.std - sd) < 1e-12 and s.min == min(vals)
    t = witness_stats(v, idx[::-1])
    assert (t.mean, t.std, t.min) == (s.mean, s.std, s.min)
    mean, std, lo = batch_witness_stats(np.stack([v, v[::-1]]), sorted(idx))
    assert mean[0] == s.mean and std[0] == s.std and lo[0] == s.min
