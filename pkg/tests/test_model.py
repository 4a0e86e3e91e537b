import numpy as np
import pytest

from amilab import tensor as T
from amilab.datagen import DataConfig, generate
from amilab.errors import ConfigurationError, DimensionError, FormatError, TrainingError
from amilab.model import (NetworkSpec, TrainConfig, TrainedModel, accuracy, default_spec, model_from_bytes,
                          model_to_bytes, predict, train, zero_model)
from amilab.rng import Rng

from conftest import random_network

H = 1e-5


def loss(model, x, y):
    return float(T.ordered_sum(T.cross_entropy(model.forward(x), y)))


def analytic(model, x, y):
    tape = T.Tape()
    z = model.forward(x, tape=tape)
    return T.backward(tape, T.cross_entropy_backward(z, y))


def max_rel_error(a, n):
    # entrywise relative error, floored so entries near zero are judged absolutely
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)))


def fd_check(model, seed):
    rng = Rng(10_000 + seed)
    x = rng.uniform(0, 1, (2,) + model.spec.input_shape)
    y = rng.integers(0, model.spec.num_classes - 1, 2)
    grads = analytic(model, x, y)
    worst = 0.0
    for i in model.spec.param_layers:
        for slot in (0, 1):
            p = model.params[i][slot]
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + H
                up = loss(model, x, y)
                p[idx] = old - H
                down = loss(model, x, y)
                p[idx] = old
                num[idx] = (up - down) / (2 * H)
            worst = max(worst, max_rel_error(grads[i][slot], num))
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + H
        up = loss(model, x, y)
        x[idx] = old - H
        down = loss(model, x, y)
        x[idx] = old
        num[idx] = (up - down) / (2 * H)
    return max(worst, max_rel_error(grads["input"], num))


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    model = random_network(seed)
    assert sum(w.size + b.size for w, b in model.params.values()) <= 10_000
    assert fd_check(model, seed) < 1e-5


def test_constant_network_has_zero_gradients():
    model = zero_model(NetworkSpec((1, 4, 4), [{"type": "flatten"}, {"type": "dense", "out": 3}]))
    x = Rng(1).uniform(0, 1, (2, 1, 4, 4))
    tape = T.Tape()
    model.forward(x, tape=tape)
    grads = T.backward(tape, np.zeros((2, 3)))
    assert all(np.all(g == 0) for pair in grads.values() if isinstance(pair, tuple) for g in pair)
    assert np.all(grads["input"] == 0)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NetworkSpec((1, 4, 4), [{"type": "flatten"}, {"type": "relu"}])
    with pytest.raises(ConfigurationError):
        NetworkSpec((1, 2, 2), [{"type": "conv", "filters": 1, "kh": 3, "kw": 3}, {"type": "flatten"},
                                {"type": "dense", "out": 2}])
    s = default_spec(8)
    assert s.shapes()[-1] == (8,) and s.relu_layers == [1, 4, 7]


def test_zero_model_ties_break_to_lowest_index():
    p = predict(zero_model(default_spec(5)), np.zeros((1, 16, 16)))
    assert p.label == 0
    assert abs(p.probabilities.sum() - 1) < 1e-12
    with pytest.raises(DimensionError):
        predict(zero_model(default_spec(5)), np.zeros((1, 8, 8)))


def test_single_class_trains_to_full_accuracy():
    ds = generate(DataConfig(classes=1, per_class=6, seed=3))
    spec = NetworkSpec((1, 16, 16), [{"type": "flatten"}, {"type": "dense", "out": 1}])
    model = train(spec, ds, TrainConfig(epochs=1, batch=4))
    assert model.metadata["final_accuracy"] == 1.0


def test_training_is_bitwise_deterministic_and_round_trips():
    ds = generate(DataConfig(per_class=10, seed=5))
    hyper = TrainConfig(epochs=2, batch=8, seed=1)
    a, b = train(default_spec(), ds, hyper), train(default_spec(), ds, hyper)
    assert a.digest() == b.digest()
    c = model_from_bytes(model_to_bytes(a))
    x = ds.images[:7]
    assert c.logits(x).tobytes() == a.logits(x).tobytes()
    assert accuracy(c, ds.images, ds.labels) == a.metadata["final_accuracy"]
    with pytest.raises(FormatError):
        model_from_bytes(b"AMLX" + model_to_bytes(a)[4:])


def test_divergence_raises_training_error():
    ds = generate(DataConfig(per_class=4, seed=5))
    with pytest.raises(TrainingError) as exc:
        train(default_spec(), ds, TrainConfig(epochs=3, batch=4, lr=1e200))
    assert exc.value.epoch == 0


def test_reference_model_accuracy(reference):
    model, ds, test = reference.objects["model"], reference.objects["dataset"], reference.objects["testset"]
    assert model.metadata["final_accuracy"] >= 0.98
    assert accuracy(model, ds.images, ds.labels) == model.metadata["final_accuracy"]
    assert accuracy(model, test.images, test.labels) >= 0.95


def test_batch_rows_equal_single_forward(reference):
    model, test = reference.objects["model"], reference.objects["testset"]
    z = model.logits(test.images[:9])
    for i in range(9):
        assert z[i].tobytes() == model.logits(test.images[i])[0].tobytes()
