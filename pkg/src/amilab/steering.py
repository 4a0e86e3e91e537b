"""The attribute-steered model: amplify witness units, damp the rest.

Weakening (non-witness unit ``v``, witness mean ``mu``, witness std ``sigma``)::

    v' = exp(-(v - mu) / (alpha * sigma)) * v

Strengthening (witness unit ``v``, witness minimum ``lo``)::

    formula:      v' = eps * v + (1 - exp(-(v - lo) / (beta * sigma))) * v
    code-compat:  v' = v * ((1 + eps) - exp(-(v - lo) / beta))

With the default ``eps = 1.15`` the code-compat factor is the familiar
``2.15 - exp(-x / beta)`` with ``x = v - lo``. Stats are recomputed per input
from the unsteered values at each layer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .instrumentation import ActivationTrace, batch_witness_stats, unit_values
from .model import TrainedModel, _as_batch, argmax_labels
from .witness import WitnessMap

WEAKEN_MODES = ("above-mean", "all")
STRENGTHEN_MODES = ("formula", "code-compat")


@dataclass
class SteeringParams:
    alpha: float = 100.0
    beta: float = 60.0
    epsilon: float = 1.15
    steered_layers: list[int] | None = None  # None: every layer in the witness map
    weaken_mode: str = "above-mean"
    strengthen_mode: str = "formula"
    sigma_floor: float = 1e-8
    attributes: list[str] | None = None  # None: every attribute in the witness map

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.epsilon > 0):
            raise ConfigurationError("alpha, beta and epsilon must be positive")
        if self.weaken_mode not in WEAKEN_MODES:
            raise ConfigurationError(f"weaken mode must be one of {WEAKEN_MODES}")
        if self.strengthen_mode not in STRENGTHEN_MODES:
            raise ConfigurationError(f"strengthen mode must be one of {STRENGTHEN_MODES}")
        if self.steered_layers is not None and len(self.steered_layers) == 0:
            raise ConfigurationError("steered_layers must be non-empty")

    def to_json(self) -> dict:
        return asdict(self)


def weaken_factor(v, mu, sigma, alpha, mode: str = "above-mean"):
    f = np.exp(-(np.asarray(v, dtype=np.float64) - mu) / (alpha * sigma))
    if mode == "above-mean":
        f = np.where(np.asarray(v) > mu, f, 1.0)
    return f


def weaken_value(v, mu, sigma, alpha, mode: str = "above-mean"):
    return weaken_factor(v, mu, sigma, alpha, mode) * v


def strengthen_factor(v, lo, sigma, beta, epsilon, mode: str = "formula"):
    v = np.asarray(v, dtype=np.float64)
    if mode == "formula":
        return epsilon + (1.0 - np.exp(-(v - lo) / (beta * sigma)))
    return (1.0 + epsilon) - np.exp(-(v - lo) / beta)


def strengthen_value(v, lo, sigma, beta, epsilon, mode: str = "formula"):
    return strengthen_factor(v, lo, sigma, beta, epsilon, mode) * v


@dataclass
class SteeringFactors:
    """Multiplicative factors per steered layer, ``(N, units)``."""

    factors: dict[int, np.ndarray] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)


def _resolve(witness_map: WitnessMap, params: SteeringParams) -> tuple[list[int], list[str]]:
    layers = witness_map.layers if params.steered_layers is None else sorted(params.steered_layers)
    missing = [l for l in layers if l not in witness_map.layer_units]
    if missing:
        raise ConfigurationError(f"steered layers {missing} are not in the witness map")
    attrs = witness_map.attributes if params.attributes is None else list(params.attributes)
    return layers, attrs


def layer_factors(values: np.ndarray, witnesses, params: SteeringParams) -> np.ndarray:
    """Factors for one layer given ``(N, units)`` unsteered values and a non-empty witness set."""
    idx = np.asarray(sorted(witnesses), dtype=np.int64)
    mean, std, lo = batch_witness_stats(values, idx)
    sigma = np.maximum(std, params.sigma_floor)[:, None]
    factors = weaken_factor(values, mean[:, None], sigma, params.alpha, params.weaken_mode)
    factors[:, idx] = strengthen_factor(values[:, idx], lo[:, None], sigma, params.beta, params.epsilon,
                                        params.strengthen_mode)
    return factors


def steer_trace(trace: ActivationTrace, witness_map: WitnessMap, attribute_set, params: SteeringParams) -> SteeringFactors:
    """Factors computed independently per layer from an unsteered trace."""
    params = SteeringParams(**{**asdict(params), "attributes": attribute_set})
    layers, attrs = _resolve(witness_map, params)
    out = SteeringFactors()
    for l in layers:
        wit = witness_map.union(l, attrs) if attrs else ()
        if not wit:
            out.skipped.append(l)
            continue
        out.factors[l] = layer_factors(trace.values[l], wit, params)
    return out


def steered_logits(model: TrainedModel, witness_map: WitnessMap, params: SteeringParams,
                   images: np.ndarray) -> np.ndarray:
    """Forward pass with steering applied right after each steered relu layer."""
    layers, attrs = _resolve(witness_map, params)
    relus = set(model.spec.relu_layers)
    bad = [l for l in layers if l not in relus]
    if bad:
        raise ConfigurationError(f"witness map layers {bad} are not relu layers of this model")
    units = model.spec.shapes()
    plan = {}
    for l in layers:
        if units[l][0] != witness_map.layer_units[l]:
            raise ConfigurationError(f"layer {l}: model has {units[l][0]} units, witness map {witness_map.layer_units[l]}")
        wit = witness_map.union(l, attrs) if attrs else ()
        if wit:
            plan[l] = wit

    def hook(index, act):
        if index not in plan:
            return act
        f = layer_factors(unit_values(act), plan[index], params)
        if act.ndim == 4:
            return act * f[:, :, None, None]
        return act * f

    return model.forward(_as_batch(images, model.spec.input_shape), hook=hook)


def attribute_predict(model: TrainedModel, witness_map: WitnessMap, params: SteeringParams, image: np.ndarray):
    """``(label, logits)`` of the attribute-steered model for one image."""
    z = steered_logits(model, witness_map, params, np.asarray(image)[None])[0]
    return int(argmax_labels(z)), z


def attribute_labels(model: TrainedModel, witness_map: WitnessMap, params: SteeringParams,
                     images: np.ndarray, chunk: int = 512) -> np.ndarray:
    return np.concatenate([
        argmax_labels(steered_logits(model, witness_map, params, images[s:s + chunk]))
        for s in range(0, len(images), chunk)
    ])
