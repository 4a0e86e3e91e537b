"""Command-line front end.

Every subcommand resolves its options as flag > ``--config`` JSON > default,
writes its artifact plus a ``<out>.manifest.json`` run manifest, and exits
0 on success, 1 on usage errors and 2 on data or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .attacks import METHODS, AttackConfig, load_adversarial, run_attack, save_adversarial
from .datagen import DataConfig, generate, load_dataset, save_dataset
from .errors import AmiLabError, ConfigurationError, UsageError
from .evaluation import (aggregate, beta_sweep, detect_batch, load_records, mixed_set, records_to_bytes,
                         replay_log)
from .model import TrainConfig, default_spec, load_model, save_model, train
from .pipeline import ARTIFACTS, PipelineConfig, determinism_check, file_digest, run_pipeline, sha256
from .steering import STRENGTHEN_MODES, WEAKEN_MODES, SteeringParams
from .witness import WitnessConfig, WitnessMap, extract_witnesses


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def _mask(text) -> tuple[int, ...]:
    vals = text if isinstance(text, (list, tuple)) else str(text).split(",")
    try:
        out = tuple(int(v) for v in vals)
    except ValueError:
        raise ConfigurationError(f"mask must be row,col,height,width, got {text!r}") from None
    if len(out) != 4:
        raise ConfigurationError(f"mask must have 4 integers, got {text!r}")
    return out


# name, type, default, help; a default of REQUIRED means flag or config must supply it
REQUIRED = object()
COMMON = [("threads", int, 1, "worker threads for the deterministic parallel paths")]
STEERING = [
    ("alpha", float, 100.0, "weakening magnitude"),
    ("beta", float, 60.0, "strengthening magnitude"),
    ("epsilon", float, 1.15, "strengthening factor"),
    ("weaken-mode", str, "above-mean", f"one of {'|'.join(WEAKEN_MODES)}"),
    ("strengthen-mode", str, "formula", f"one of {'|'.join(STRENGTHEN_MODES)}"),
]
OPTIONS = {
    "gen-data": [
        ("seed", int, 42, "data seed"),
        ("classes", int, 8, "number of identities"),
        ("per-class", int, 200, "images per identity"),
        ("noise", float, 0.1, "background noise amplitude"),
        ("jitter", int, 1, "maximum glyph offset in pixels"),
        ("out", str, REQUIRED, "output dataset file"),
    ],
    "train": [
        ("data", str, REQUIRED, "training dataset"),
        ("seed", int, 7, "init and shuffle seed"),
        ("epochs", int, 30, "passes over the data"),
        ("batch", int, 16, "minibatch size"),
        ("lr", float, 0.05, "SGD learning rate"),
        ("out", str, REQUIRED, "output model file"),
    ],
    "witness": [
        ("model", str, REQUIRED, "trained model"),
        ("data", str, REQUIRED, "dataset to probe"),
        ("seed", int, 0, "sampling seed"),
        ("sample", int, 50, "images probed per attribute"),
        ("tau-sub", float, 0.2, "minimum substitution score"),
        ("tau-pres", float, 1.0, "maximum preservation score"),
        ("min-support", float, 0.6, "fraction of images a unit must qualify on"),
        ("randomizations", int, 4, "preservation redraws per image"),
        ("out", str, REQUIRED, "output witness map (JSON)"),
    ],
    "attack": [
        ("model", str, REQUIRED, "trained model"),
        ("data", str, REQUIRED, "images to attack"),
        ("method", str, "cw", "fgsm|bim|cw|patch"),
        ("target", str, "untargeted", "untargeted|first|next|<class id>"),
        ("count", int, 0, "attack only the first N images (0: all)"),
        ("eps", float, 0.15, "L-inf budget for fgsm and bim"),
        ("steps", int, 10, "bim iterations"),
        ("step-size", float, 0.03, "bim step"),
        ("cw-c", float, 1.0, "initial C&W trade-off constant"),
        ("cw-kappa", float, 0.0, "C&W confidence margin"),
        ("cw-search-rounds", int, 9, "C&W binary-search rounds"),
        ("cw-iterations", int, 200, "C&W iterations per round"),
        ("cw-lr", float, 0.2, "C&W step size"),
        ("mask", str, "6,6,4,4", "patch rectangle row,col,height,width"),
        ("patch-steps", int, 50, "patch iterations"),
        ("patch-step-size", float, 0.1, "patch step"),
        ("seed", int, 0, "attack seed"),
        ("out", str, REQUIRED, "output adversarial set"),
    ] + COMMON,
    "detect": [
        ("model", str, REQUIRED, "trained model"),
        ("witness", str, REQUIRED, "witness map"),
        ("data", str, "", "clean dataset"),
        ("adv", str, "", "adversarial set from the attack command"),
        ("count", int, 0, "use only the first N clean images (0: all)"),
        ("out", str, REQUIRED, "output detection records (JSON)"),
    ] + STEERING,
    "eval": [
        ("records", str, REQUIRED, "detection records from the detect command"),
        ("out", str, "", "metrics report (JSON)"),
    ],
    "sweep": [
        ("model", str, REQUIRED, "trained model"),
        ("witness", str, REQUIRED, "witness map"),
        ("data", str, REQUIRED, "clean dataset"),
        ("adv", str, REQUIRED, "adversarial set"),
        ("count", int, 0, "use only the first N clean images (0: all)"),
        ("beta", str, "5,8,12,16,30,60", "comma-separated beta grid"),
        ("out", str, REQUIRED, "output CSV; the full report goes next to it as JSON"),
    ] + [o for o in STEERING if o[0] != "beta"],
    "replay": [
        ("log", str, REQUIRED, "triple-log CSV with header gold,original,attribute"),
        ("out", str, "", "metrics report (JSON)"),
    ],
    "selfcheck": [
        ("repetitions", int, 2, "pipeline runs to compare"),
        ("seed", int, 42, "data seed of the reference pipeline"),
        ("attack-count", int, 64, "test images attacked per run"),
        ("negative-control", int, 1, "also run a reseeded control that must fail (1/0)"),
        ("reference", str, "", "pinned digest file to compare the first run against"),
        ("out", str, "", "directory for the first run's artifacts and the manifest"),
    ] + COMMON + STEERING,
}
CHOICES = {"weaken-mode": WEAKEN_MODES, "strengthen-mode": STRENGTHEN_MODES, "method": METHODS}
COMMANDS = {
    "gen-data": "generate a synthetic attribute-face dataset",
    "train": "train the reference CNN",
    "witness": "extract witness units per attribute",
    "attack": "craft adversarial examples",
    "detect": "run discrepancy detection on clean and adversarial images",
    "eval": "aggregate detection records into a metrics report",
    "sweep": "sweep beta over a mixed clean + adversarial set",
    "replay": "aggregate an external gold,original,attribute log",
    "selfcheck": "run the pipeline repeatedly and compare artifact digests",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="amilab", description="Attribute-steered adversarial-example detection lab")
    parser.add_argument("--version", action="version", version=f"amilab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=COMMANDS[name], description=COMMANDS[name])
        p.add_argument("--config", help="flat JSON file keyed by flag names")
        for flag, typ, default, text in opts:
            shown = "required" if default is REQUIRED else f"default {default}"
            p.add_argument(f"--{flag}", type=typ, default=None, choices=CHOICES.get(flag),
                           help=f"{text} ({shown})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Flag beats config file beats built-in default."""
    file_cfg = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"config {args.config} must be a flat JSON object")
        file_cfg = {k.replace("_", "-"): v for k, v in file_cfg.items()}
    known = {o[0]: o for o in OPTIONS[command]}
    unknown = sorted(set(file_cfg) - set(known))
    if unknown:
        raise ConfigurationError(f"config keys not understood by '{command}': {', '.join(unknown)}")
    out = {}
    for flag, (_, typ, default, _) in known.items():
        value = getattr(args, flag.replace("-", "_"))
        if value is None and flag in file_cfg:
            try:
                value = typ(file_cfg[flag]) if not isinstance(file_cfg[flag], (list, dict)) else file_cfg[flag]
            except (TypeError, ValueError):
                raise ConfigurationError(f"config key {flag!r}: cannot read {file_cfg[flag]!r} as {typ.__name__}") from None
        if value is None:
            if default is REQUIRED:
                raise UsageError(f"{command}: --{flag} is required (or set \"{flag}\" in --config)")
            value = default
        out[flag] = value
    if "threads" in out and out["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return out


def _steering(cfg: dict) -> SteeringParams:
    beta = cfg["beta"] if isinstance(cfg.get("beta"), float) else SteeringParams.beta
    return SteeringParams(alpha=cfg["alpha"], beta=beta,
                          epsilon=cfg["epsilon"], weaken_mode=cfg["weaken-mode"],
                          strengthen_mode=cfg["strengthen-mode"])


def write_manifest(path, command: str, cfg: dict, inputs, outputs, started: float) -> None:
    body = {
        "command": command,
        "config": cfg,
        "inputs": {p: file_digest(p) for p in inputs if p},
        "outputs": {p: file_digest(p) for p in outputs},
        "version": __version__,
    }
    manifest = dict(body)
    manifest["manifest_digest"] = sha256(json.dumps(body, sort_keys=True).encode("utf-8"))
    # wall time is the only field allowed to vary between identical runs
    manifest["excluded_from_digest"] = {"wall_time_seconds": round(time.perf_counter() - started, 3)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def _first(n: int, *arrays):
    return tuple(a if n <= 0 else a[:n] for a in arrays)


def cmd_gen_data(cfg):
    ds = generate(DataConfig(classes=cfg["classes"], per_class=cfg["per-class"], noise=cfg["noise"],
                             jitter=cfg["jitter"], seed=cfg["seed"]))
    save_dataset(ds, cfg["out"])
    print(f"wrote {len(ds)} images, {cfg['classes']} classes -> {cfg['out']}")
    return [], [cfg["out"]]


def cmd_train(cfg):
    ds = load_dataset(cfg["data"])
    spec = default_spec(int(ds.labels.max()) + 1 if len(ds) else 0, ds.images.shape[1:])
    hyper = TrainConfig(epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"], seed=cfg["seed"])
    model = train(spec, ds, hyper, log=lambda msg: print(msg, file=sys.stderr))
    save_model(model, cfg["out"])
    print(f"train accuracy {model.metadata['final_accuracy']:.4f} -> {cfg['out']}")
    return [cfg["data"]], [cfg["out"]]


def cmd_witness(cfg):
    model, ds = load_model(cfg["model"]), load_dataset(cfg["data"])
    wc = WitnessConfig(sample=cfg["sample"], tau_sub=cfg["tau-sub"], tau_pres=cfg["tau-pres"],
                       min_support=cfg["min-support"], randomizations=cfg["randomizations"], seed=cfg["seed"])
    wm = extract_witnesses(model, ds, wc)
    wm.save(cfg["out"])
    for a in wm.attributes:
        sizes = ", ".join(f"layer {l}: {len(wm.witnesses[a].get(l, ()))}" for l in wm.layers)
        print(f"{a}: {sizes}")
    for w in wm.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return [cfg["model"], cfg["data"]], [cfg["out"]]


def cmd_attack(cfg):
    model, ds = load_model(cfg["model"]), load_dataset(cfg["data"])
    ac = AttackConfig(method=cfg["method"], target=cfg["target"], eps=cfg["eps"], steps=cfg["steps"],
                      step_size=cfg["step-size"], cw_c=cfg["cw-c"], cw_kappa=cfg["cw-kappa"],
                      cw_search_rounds=cfg["cw-search-rounds"], cw_iterations=cfg["cw-iterations"],
                      cw_lr=cfg["cw-lr"], mask=_mask(cfg["mask"]), patch_steps=cfg["patch-steps"],
                      patch_step_size=cfg["patch-step-size"], seed=cfg["seed"])
    images, golds = _first(cfg["count"], ds.images, ds.labels)
    examples = run_attack(model, images, golds, ac, threads=cfg["threads"])
    save_adversarial(examples, ds, cfg["out"], ac)
    ok = sum(e.success for e in examples)
    print(f"{ac.method}: {ok}/{len(examples)} successful -> {cfg['out']}")
    return [cfg["model"], cfg["data"]], [cfg["out"]]


def _mixed(cfg, allow_partial: bool):
    clean_images = clean_golds = None
    adversarial = []
    if cfg["data"]:
        ds = load_dataset(cfg["data"])
        clean_images, clean_golds = _first(cfg["count"], ds.images, ds.labels)
    if cfg["adv"]:
        _, adversarial = load_adversarial(cfg["adv"])
    elif not allow_partial:
        raise UsageError("sweeps need a mixed set: give both --data and --adv")
    if clean_images is None:
        if not allow_partial:
            raise UsageError("sweeps need a mixed set: give both --data and --adv")
        if not adversarial:
            raise UsageError("give --data, --adv or both")
        shape = adversarial[0].image.shape
        clean_images, clean_golds = np.zeros((0,) + shape), np.zeros(0, dtype=np.int64)
    return mixed_set(clean_images, clean_golds, adversarial)


def cmd_detect(cfg):
    model, wm = load_model(cfg["model"]), WitnessMap.load(cfg["witness"])
    mixed = _mixed(cfg, allow_partial=True)
    records = detect_batch(model, wm, _steering(cfg), mixed.images, mixed.golds, mixed.ids,
                           mixed.attack, mixed.attack_success)
    _write(cfg["out"], records_to_bytes(records))
    print(aggregate(records).to_text())
    return [cfg["model"], cfg["witness"], cfg["data"], cfg["adv"]], [cfg["out"]]


def cmd_eval(cfg):
    report = aggregate(load_records(cfg["records"]))
    print(report.to_text())
    if cfg["out"]:
        _write(cfg["out"], report.to_bytes())
    return [cfg["records"]], [cfg["out"]] if cfg["out"] else []


def cmd_sweep(cfg):
    model, wm = load_model(cfg["model"]), WitnessMap.load(cfg["witness"])
    mixed = _mixed(cfg, allow_partial=False)
    betas = _csv_floats(cfg["beta"])
    report = beta_sweep(model, wm, mixed, betas, cfg["alpha"], cfg["epsilon"], _steering(cfg))
    json_path = os.path.splitext(cfg["out"])[0] + ".json"
    _write(cfg["out"], report.to_csv().encode("utf-8"))
    _write(json_path, report.to_bytes())
    print(report.to_text())
    return [cfg["model"], cfg["witness"], cfg["data"], cfg["adv"]], [cfg["out"], json_path]


def cmd_replay(cfg):
    report = aggregate(replay_log(cfg["log"]))
    print(report.to_text(title=f"Replay of {cfg['log']}"))
    if cfg["out"]:
        _write(cfg["out"], report.to_bytes())
    return [cfg["log"]], [cfg["out"]] if cfg["out"] else []


def cmd_selfcheck(cfg):
    base = PipelineConfig()
    pc = replace(base, data=replace(base.data, seed=cfg["seed"]), attack_count=cfg["attack-count"],
                 steering=_steering(cfg), threads=cfg["threads"])
    out_dir = cfg["out"] or None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = lambda msg: print(msg, file=sys.stderr)
    first = run_pipeline(pc, out_dir=out_dir, log=log).digests
    result = determinism_check(pc, cfg["repetitions"], log=log, reference=first)
    print(result.summary())
    ok = result.passed
    if cfg["negative-control"]:
        control = determinism_check(pc, 2, reseed_between_runs=True, reference=first)
        good = not control.passed and control.first_divergent == ARTIFACTS[0]
        print(f"negative control ({'expected' if good else 'UNEXPECTED'}): {control.summary()}")
        ok = ok and good
    if cfg["reference"]:
        with open(cfg["reference"], encoding="utf-8") as fh:
            pinned = json.load(fh)
        pinned = pinned.get("digests", pinned)
        bad = [name for name in ARTIFACTS if name in pinned and pinned[name] != first[name]]
        print("reference pin: " + ("match" if not bad else f"MISMATCH at {bad[0]}"))
        ok = ok and not bad
    for name in ARTIFACTS:
        print(f"  {name:<12} {first[name]}")
    if out_dir:
        _write(os.path.join(out_dir, "digests.json"),
               json.dumps({"digests": first}, sort_keys=True, indent=1).encode("utf-8") + b"\n")
    if not ok:
        raise _CheckFailed("self-check failed")
    outputs = [os.path.join(out_dir, f) for f in sorted(os.listdir(out_dir))
               if not f.endswith("manifest.json")] if out_dir else []
    return [cfg["reference"]], outputs


class _CheckFailed(AmiLabError):
    pass


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "witness": cmd_witness, "attack": cmd_attack,
    "detect": cmd_detect, "eval": cmd_eval, "sweep": cmd_sweep, "replay": cmd_replay,
    "selfcheck": cmd_selfcheck,
}


def _manifest_path(command: str, cfg: dict) -> str | None:
    if not cfg.get("out"):
        return None
    if command == "selfcheck":
        return os.path.join(cfg["out"], "manifest.json")
    return cfg["out"] + ".manifest.json"


def main(argv=None) -> int:
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("amilab: choose a command: " + ", ".join(OPTIONS))
        cfg = resolve(args.command, args)
        inputs, outputs = HANDLERS[args.command](cfg)
        path = _manifest_path(args.command, cfg)
        if path:
            write_manifest(path, args.command, cfg, inputs, outputs, started)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (AmiLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
