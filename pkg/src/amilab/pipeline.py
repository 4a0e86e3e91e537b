"""The reference pipeline, datagen -> train -> witness -> attack -> detect -> aggregate.

Every stage emits one canonical byte artifact; its SHA-256 is the stage digest.
Determinism checks compare digests stage by stage and stop at the first
artifact that differs.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

from .attacks import AttackConfig, adversarial_set, run_attack
from .datagen import DataConfig, dataset_to_bytes, generate
from .errors import UsageError
from .evaluation import aggregate, detect_batch, mixed_set, records_to_bytes
from .model import TrainConfig, default_spec, model_to_bytes, train
from .steering import SteeringParams
from .witness import WitnessConfig, extract_witnesses

ARTIFACTS = ("dataset", "testset", "model", "witness_map", "adversarial", "detections", "metrics")
FILENAMES = {
    "dataset": "dataset.amld",
    "testset": "testset.amld",
    "model": "model.amlm",
    "witness_map": "witness_map.json",
    "adversarial": "adversarial.amld",
    "detections": "detections.json",
    "metrics": "metrics.json",
}


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return sha256(fh.read())


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    test_per_class: int = 25
    train: TrainConfig = field(default_factory=TrainConfig)
    witness: WitnessConfig = field(default_factory=WitnessConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    attack_count: int = 64
    steering: SteeringParams = field(default_factory=SteeringParams)
    threads: int = 1

    def test_config(self) -> DataConfig:
        # the held-out set follows the training seed so one --seed moves both
        return replace(self.data, per_class=self.test_per_class, seed=self.data.seed + 1)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, data=replace(self.data, seed=seed))

    def to_json(self) -> dict:
        d = asdict(self)
        d["attack"]["mask"] = list(self.attack.mask)
        return d


@dataclass
class PipelineRun:
    digests: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, bytes] = field(default_factory=dict, repr=False)
    objects: dict = field(default_factory=dict, repr=False)


class _Diverged(Exception):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


def run_pipeline(config: PipelineConfig | None = None, out_dir=None,
                 on_artifact: Callable[[str, str], None] | None = None,
                 log: Callable[[str], None] | None = None) -> PipelineRun:
    """Run every stage; ``on_artifact(name, digest)`` fires as each artifact is produced."""
    config = config or PipelineConfig()
    say = log or (lambda msg: None)
    run = PipelineRun()

    def emit(name, data: bytes, obj):
        run.artifacts[name] = data
        run.digests[name] = sha256(data)
        run.objects[name] = obj
        if out_dir is not None:
            with open(os.path.join(out_dir, FILENAMES[name]), "wb") as fh:
                fh.write(data)
        say(f"{name}: {run.digests[name]}")
        if on_artifact is not None:
            on_artifact(name, run.digests[name])

    ds = generate(config.data)
    emit("dataset", dataset_to_bytes(ds), ds)
    test = generate(config.test_config())
    emit("testset", dataset_to_bytes(test), test)
    model = train(default_spec(config.data.classes, (1, config.data.height, config.data.width)), ds, config.train)
    emit("model", model_to_bytes(model), model)
    wm = extract_witnesses(model, ds, config.witness)
    emit("witness_map", wm.to_bytes(), wm)
    n = min(config.attack_count, len(test))
    if n < 1:
        raise UsageError("attack_count must be at least 1")
    clean, golds = test.images[:n], test.labels[:n]
    adv = run_attack(model, clean, golds, config.attack, threads=config.threads)
    emit("adversarial", dataset_to_bytes(adversarial_set(adv, test, config.attack)), adv)
    mixed = mixed_set(clean, golds, adv)
    records = detect_batch(model, wm, config.steering, mixed.images, mixed.golds, mixed.ids,
                           mixed.attack, mixed.attack_success)
    emit("detections", records_to_bytes(records), records)
    report = aggregate(records)
    emit("metrics", report.to_bytes(), report)
    run.objects["mixed"] = mixed
    return run


@dataclass
class DeterminismResult:
    passed: bool
    repetitions: int
    digests: list[dict[str, str]]
    first_divergent: str | None = None
    divergent_run: int | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        if self.passed:
            return f"PASS: {self.repetitions} runs, {len(ARTIFACTS)} artifacts identical"
        return f"FAIL: run {self.divergent_run} diverged at artifact '{self.first_divergent}'"


def determinism_check(config: PipelineConfig | None = None, repetitions: int = 2,
                      reseed_between_runs: bool = False, log=None,
                      reference: dict[str, str] | None = None) -> DeterminismResult:
    """Run the pipeline repeatedly; fail at the first artifact whose digest differs.

    ``reseed_between_runs`` is the negative control: every repeat uses a
    different data seed, so the check must fail at ``dataset``. Passing the
    digests of an earlier run as ``reference`` skips the first run.
    """
    if repetitions < 2:
        raise UsageError("determinism check needs at least 2 repetitions")
    config = config or PipelineConfig()
    if reference is None:
        reference = run_pipeline(config, log=log).digests
    seen = [reference]
    for rep in range(1, repetitions):
        cfg = config.with_seed(config.data.seed + rep) if reseed_between_runs else config
        current: dict[str, str] = {}

        def compare(name, digest):
            current[name] = digest
            if digest != reference[name]:
                raise _Diverged(name)

        try:
            run_pipeline(cfg, on_artifact=compare, log=log)
        except _Diverged as exc:
            seen.append(current)
            return DeterminismResult(False, repetitions, seen, exc.name, rep)
        seen.append(current)
    return DeterminismResult(True, repetitions, seen)


def sweep_inputs(run: PipelineRun):
    """``(model, witness_map, mixed set)`` from a finished run, ready for a beta sweep."""
    return run.objects["model"], run.objects["witness_map"], run.objects["mixed"]

