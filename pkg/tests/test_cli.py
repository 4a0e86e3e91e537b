import json

import pytest

from amilab.cli import main
from amilab.datagen import load_dataset

from conftest import fixture_path


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_replay_prints_table_four_string(capsys, tmp_path):
    code, out, _ = run(capsys, "replay", "--log", fixture_path("table4_beta5.csv"))
    assert code == 0 and "1.00 [3/3]" in out
    code, out, _ = run(capsys, "replay", "--log", fixture_path("table4_default.csv"), "--out", str(tmp_path / "m.json"))
    assert code == 0 and "0.00 [0/3]" in out
    manifest = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert manifest["command"] == "replay" and str(tmp_path / "m.json") in manifest["outputs"]


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "replay", "--bogus")[0] == 1
    assert run(capsys, "replay")[0] == 1
    assert run(capsys, "detect", "--weaken-mode", "sideways")[0] == 1
    code, _, err = run(capsys, "replay", "--log", str(tmp_path / "missing.csv"))
    assert code == 2 and "missing.csv" in err
    bad = tmp_path / "bad.csv"
    bad.write_text("gold,original,attribute\n1,2,oops\n")
    code, _, err = run(capsys, "replay", "--log", str(bad))
    assert code == 2 and "line 2" in err
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert run(capsys, "gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"))[0] == 2
    cfg.write_text('{"unknown_key": 1}')
    assert run(capsys, "gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"))[0] == 2
    assert run(capsys)[0] == 1


def test_flag_beats_config_beats_default(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"per_class": 3, "seed": 5, "noise": 0.05}))
    out = tmp_path / "d.amld"
    assert run(capsys, "gen-data", "--config", str(cfg), "--seed", "9", "--out", str(out))[0] == 0
    ds = load_dataset(out)
    assert len(ds) == 24 and ds.seed == 9 and ds.noise == 0.05 and ds.jitter == 1
    resolved = json.loads((tmp_path / "d.amld.manifest.json").read_text())["config"]
    assert resolved["seed"] == 9 and resolved["per-class"] == 3 and resolved["jitter"] == 1


def test_manifest_is_deterministic_except_wall_time(capsys, tmp_path):
    manifests = []
    for _ in range(2):
        assert run(capsys, "gen-data", "--per-class", "2", "--out", str(tmp_path / "d.amld"))[0] == 0
        m = json.loads((tmp_path / "d.amld.manifest.json").read_text())
        m.pop("excluded_from_digest")
        manifests.append(m)
    assert manifests[0] == manifests[1]


def test_small_end_to_end(capsys, tmp_path):
    p = lambda name: str(tmp_path / name)
    assert run(capsys, "gen-data", "--per-class", "30", "--out", p("d.amld"))[0] == 0
    assert run(capsys, "gen-data", "--per-class", "3", "--seed", "43", "--out", p("t.amld"))[0] == 0
    assert run(capsys, "train", "--data", p("d.amld"), "--epochs", "4", "--out", p("m.amlm"))[0] == 0
    assert run(capsys, "witness", "--model", p("m.amlm"), "--data", p("d.amld"), "--sample", "10",
               "--out", p("w.json"))[0] == 0
    assert run(capsys, "attack", "--model", p("m.amlm"), "--data", p("t.amld"), "--method", "fgsm",
               "--threads", "2", "--out", p("a.amld"))[0] == 0
    code, out, _ = run(capsys, "detect", "--model", p("m.amlm"), "--witness", p("w.json"), "--data", p("t.amld"),
                       "--adv", p("a.amld"), "--beta", "5", "--out", p("r.json"))
    assert code == 0 and "detection rate" in out
    code, out, _ = run(capsys, "eval", "--records", p("r.json"), "--out", p("met.json"))
    assert code == 0 and "false positive rate" in out
    code, out, _ = run(capsys, "sweep", "--model", p("m.amlm"), "--witness", p("w.json"), "--data", p("t.amld"),
                       "--adv", p("a.amld"), "--beta", "5,8,12,16,30,60", "--out", p("s.csv"))
    assert code == 0
    rows = (tmp_path / "s.csv").read_text().strip().splitlines()
    assert len(rows) == 7 and rows[0] == "beta,detection_rate,fpr,flagged_fraction"
    assert (tmp_path / "s.json").exists() and (tmp_path / "s.csv.manifest.json").exists()
    # an adversarial-only sweep is refused
    code, _, err = run(capsys, "sweep", "--model", p("m.amlm"), "--witness", p("w.json"), "--data", "",
                       "--adv", p("a.amld"), "--out", p("s2.csv"))
    assert code == 1 and "mixed" in err
