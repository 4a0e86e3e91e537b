"""Per-layer activation traces and witness statistics.

A conv "unit" is a channel, valued by the mean of its post-relu feature map;
a dense unit is itself. Traces are read through the model's activation hook,
which returns the activations untouched, so tracing cannot change a
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import TrainedModel, _as_batch
from .tensor import ordered_sum


@dataclass
class ActivationTrace:
    """``values[layer]`` is ``(N, units)``; ``N == 1`` for a single traced image."""

    values: dict[int, np.ndarray]
    logits: np.ndarray

    @property
    def layers(self) -> list[int]:
        return sorted(self.values)

    def single(self, row: int = 0) -> dict[int, np.ndarray]:
        return {l: v[row] for l, v in self.values.items()}


@dataclass(frozen=True)
class WitnessStats:
    mean: float
    std: float
    min: float
    count: int


def unit_values(activations: np.ndarray) -> np.ndarray:
    """``(N, C, H, W) -> (N, C)`` channel means; ``(N, U)`` passes through."""
    if activations.ndim == 4:
        n, c = activations.shape[:2]
        flat = activations.reshape(n, c, -1)
        return ordered_sum(flat, axis=-1) / flat.shape[-1]
    if activations.ndim == 2:
        return activations
    raise ConfigurationError(f"cannot derive unit values from shape {activations.shape}")


def check_observed(model: TrainedModel, layers) -> list[int]:
    relus = set(model.spec.relu_layers)
    layers = sorted(int(l) for l in layers)
    bad = [l for l in layers if l not in relus]
    if bad:
        raise ConfigurationError(f"layers {bad} are not relu layers (relu layers: {sorted(relus)})")
    return layers


def unit_counts(model: TrainedModel) -> dict[int, int]:
    shapes = model.spec.shapes()
    return {l: shapes[l][0] for l in model.spec.relu_layers}


def trace(model: TrainedModel, images: np.ndarray, observed_layers=None) -> ActivationTrace:
    """Forward pass recording unit values at ``observed_layers`` (default: every relu)."""
    layers = check_observed(model, model.spec.relu_layers if observed_layers is None else observed_layers)
    wanted = set(layers)
    seen: dict[int, np.ndarray] = {}

    def hook(index, act):
        if index in wanted:
            seen[index] = unit_values(act)
        return act

    z = model.forward(_as_batch(images, model.spec.input_shape), hook=hook)
    return ActivationTrace(seen, z)


def witness_stats(values: np.ndarray, witnesses) -> WitnessStats | None:
    """Mean, population std and min of ``values`` over the witness indices.

    Returns ``None`` for an empty witness set; callers skip that layer.
    """
    idx = np.asarray(sorted(set(int(i) for i in witnesses)), dtype=np.int64)
    if idx.size == 0:
        return None
    w = np.asarray(values, dtype=np.float64)[idx]
    mean = float(ordered_sum(w)) / idx.size
    var = float(ordered_sum((w - mean) ** 2)) / idx.size
    return WitnessStats(mean, float(np.sqrt(var)), float(w.min()), int(idx.size))


def batch_witness_stats(values: np.ndarray, witnesses) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``(mean, std, min)`` for ``(N, units)`` values; same arithmetic as :func:`witness_stats`."""
    idx = np.asarray(sorted(set(int(i) for i in witnesses)), dtype=np.int64)
    w = values[:, idx]
    mean = ordered_sum(w, axis=1) / idx.size
    var = ordered_sum((w - mean[:, None]) ** 2, axis=1) / idx.size
    return mean, np.sqrt(var), w.min(axis=1)
