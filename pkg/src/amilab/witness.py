"""Witness identification by attribute substitution and attribute preservation.

A unit is a witness for an attribute when it reacts to swapping that
attribute's glyph (substitution score high) and stays put when everything
*except* that attribute is re-randomized (preservation score low). Both
scores are medians of relative changes ``|v' - v| / (|v| + 1e-6)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import Dataset
from .errors import AttributeLookupError, ConfigurationError, FormatError, UsageError
from .instrumentation import check_observed, trace, unit_counts
from .model import TrainedModel
from .rng import Rng

DELTA = 1e-6


def relative_change(changed: np.ndarray, original: np.ndarray) -> np.ndarray:
    return np.abs(changed - original) / (np.abs(original) + DELTA)


def _median_scores(model, original: np.ndarray, variants: np.ndarray, layers) -> dict[int, np.ndarray]:
    base = trace(model, original, layers)
    moved = trace(model, variants, layers)
    return {l: np.median(relative_change(moved.values[l], base.values[l]), axis=0) for l in base.layers}


def substitution_test(model: TrainedModel, dataset: Dataset, index: int, attribute: str,
                      donor_variants, observed_layers=None) -> dict[int, np.ndarray]:
    """Per-unit median relative change when ``attribute`` is re-rendered as each donor."""
    donors = list(donor_variants)
    if not donors:
        raise UsageError("substitution test needs at least one donor variant")
    dataset.attribute(attribute)
    swapped = np.stack([dataset.substitute(index, attribute, d) for d in donors])
    return _median_scores(model, dataset.images[index], swapped, observed_layers)


def preservation_test(model: TrainedModel, dataset: Dataset, index: int, attribute: str,
                      randomizations: int, rng: Rng, noise: float | None = None,
                      observed_layers=None) -> dict[int, np.ndarray]:
    """Per-unit median relative change when every pixel outside the attribute region is redrawn.

    Fresh pixels are uniform in ``[0, noise]`` (default: the dataset's noise
    level). Other attributes' glyphs are overwritten too.
    """
    if randomizations < 1:
        raise UsageError("preservation test needs at least one randomization")
    _, spec = dataset.attribute(attribute)
    amp = dataset.noise if noise is None else noise
    img = dataset.images[index]
    c, h, w = img.shape
    keep = spec.mask(h, w)
    fresh = rng.random(randomizations * c * h * w).reshape(randomizations, c, h, w) * amp
    variants = np.where(keep, img[None], fresh)
    return _median_scores(model, img, variants, observed_layers)


@dataclass
class WitnessConfig:
    sample: int = 50
    tau_sub: float = 0.2
    tau_pres: float = 1.0
    min_support: float = 0.6
    randomizations: int = 4
    seed: int = 0
    observed_layers: list[int] | None = None


@dataclass
class WitnessMap:
    """``witnesses[attribute][layer]`` is a sorted tuple of unit indices."""

    witnesses: dict[str, dict[int, tuple[int, ...]]]
    layer_units: dict[int, int]
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if "config" in self.witnesses:
            raise ConfigurationError("'config' is reserved and cannot be an attribute name")
        for attr, layers in self.witnesses.items():
            for l, idx in layers.items():
                if l not in self.layer_units:
                    raise ConfigurationError(f"{attr}: layer {l} has no unit count")
                if any(i < 0 or i >= self.layer_units[l] for i in idx):
                    raise ConfigurationError(f"{attr}: index out of range in layer {l}")

    @classmethod
    def empty(cls, layer_units: dict[int, int]) -> "WitnessMap":
        return cls({}, dict(layer_units))

    @property
    def attributes(self) -> list[str]:
        return sorted(self.witnesses)

    @property
    def layers(self) -> list[int]:
        return sorted(self.layer_units)

    def union(self, layer: int, attributes=None) -> tuple[int, ...]:
        names = self.attributes if attributes is None else attributes
        found = set()
        for a in names:
            if a not in self.witnesses:
                raise AttributeLookupError(f"witness map has no attribute {a!r}")
            found.update(self.witnesses[a].get(layer, ()))
        return tuple(sorted(found))

    def non_witnesses(self, layer: int, attributes=None) -> tuple[int, ...]:
        taken = set(self.union(layer, attributes))
        return tuple(i for i in range(self.layer_units[layer]) if i not in taken)

    def to_json(self) -> dict:
        out = {a: {str(l): list(idx) for l, idx in sorted(layers.items())} for a, layers in self.witnesses.items()}
        # JSON has no infinity; unreachable thresholds are written as strings
        cfg = {k: (repr(v) if isinstance(v, float) and not np.isfinite(v) else v) for k, v in self.config.items()}
        cfg["layer_units"] = {str(l): n for l, n in sorted(self.layer_units.items())}
        cfg["warnings"] = list(self.warnings)
        out["config"] = cfg
        return out

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, indent=1, allow_nan=False).encode("utf-8") + b"\n"

    @classmethod
    def from_json(cls, d: dict) -> "WitnessMap":
        try:
            cfg = dict(d["config"])
            units = {int(l): int(n) for l, n in cfg.pop("layer_units").items()}
            warnings = list(cfg.pop("warnings", []))
            wit = {a: {int(l): tuple(sorted(int(i) for i in idx)) for l, idx in layers.items()}
                   for a, layers in d.items() if a != "config"}
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"malformed witness map: {exc}") from exc
        return cls(wit, units, cfg, warnings)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WitnessMap":
        with open(path, "rb") as fh:
            try:
                return cls.from_json(json.loads(fh.read().decode("utf-8")))
            except json.JSONDecodeError as exc:
                raise FormatError(f"witness map is not valid JSON: {exc}") from exc


def extract_witnesses(model: TrainedModel, dataset: Dataset, config: WitnessConfig | None = None,
                      attributes=None) -> WitnessMap:
    """Witness sets per attribute and observed layer.

    A unit qualifies on an image when its substitution score is ``>= tau_sub``
    and its preservation score ``<= tau_pres``; it is a witness when it
    qualifies on at least ``min_support`` of the sampled images.
    """
    config = config or WitnessConfig()
    if not 1 <= config.sample <= len(dataset):
        raise ConfigurationError(f"sample size {config.sample} outside [1, {len(dataset)}]")
    layers = check_observed(model, model.spec.relu_layers if config.observed_layers is None else config.observed_layers)
    names = [a.name for a in dataset.attributes] if attributes is None else list(attributes)
    for a in names:
        dataset.attribute(a)
    units = unit_counts(model)
    root = Rng(config.seed)
    chosen = np.sort(root.spawn(0).permutation(len(dataset))[: config.sample])
    witnesses: dict[str, dict[int, tuple[int, ...]]] = {}
    for ai, name in enumerate(names):
        _, spec = dataset.attribute(name)
        hits = {l: np.zeros(units[l], dtype=np.int64) for l in layers}
        for index in chosen:
            own = dataset.variant_of(index, name)
            donors = [v for v in range(len(spec.variants)) if v != own]
            sub = substitution_test(model, dataset, index, name, donors, layers)
            pres = preservation_test(model, dataset, index, name, config.randomizations,
                                     root.spawn(1 + ai * len(dataset) + int(index)), observed_layers=layers)
            for l in layers:
                hits[l] += (sub[l] >= config.tau_sub) & (pres[l] <= config.tau_pres)
        witnesses[name] = {
            l: tuple(int(i) for i in np.flatnonzero(hits[l] / config.sample >= config.min_support))
            for l in layers
        }
    cfg = asdict(config)
    cfg["observed_layers"] = layers
    warnings = []
    wm = WitnessMap(witnesses, {l: units[l] for l in layers}, cfg, warnings)
    for l in layers:
        if names and not wm.non_witnesses(l):
            warnings.append(f"layer {l}: every unit is a witness, steering would weaken nothing")
    return wm
