import json

import pytest

from atas.cli import RunFailed, compare, load_dataset, main, run
from atas.config import ConfigError, default_config, load_config, parse_config

SMALL = """
[data]
per_class = 6
image_size = 8
[model]
kind = mlp
widths = 8
[train]
method = atas
epochs = 2
batch_size = 8
epsilon = 0.3
eval_size = 20
[saddle]
n = 8
d = 3
p = 3
T = 200
checkpoints = 100, 200
[probe]
grid_n = 3
examples = 5
[diagnose]
profile_epochs = 1
lo_decile = 6
hi_decile = 10
iteration_budget = 6
"""


def test_defaults():
    cfg = default_config()
    assert cfg["train"]["method"] == "atas"
    a = cfg.adaptive_config()
    assert a.beta == 0.5 and a.c == 0.01 and a.max_step == 16 / 255
    assert parse_config("[train]\nepsilon = 0.3\n").max_step() == pytest.approx(0.6)
    assert parse_config("[train]\nepsilon = 8/255\n")["train"]["epsilon"] == 8 / 255


def test_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="alhpa"):
        parse_config("[train]\nalhpa = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config("[train]\nepochs = 0\n")
    with pytest.raises(ConfigError, match="adaptive.beta"):
        parse_config("[adaptive]\nbeta = 2\n")
    with pytest.raises(ConfigError, match="train.method"):
        parse_config("[train]\nmethod = adam\n")
    with pytest.raises(ConfigError):
        parse_config("no section header\n")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_canonical_round_trip():
    cfg = parse_config(SMALL)
    text = cfg.serialize()
    again = parse_config(text)
    assert again.values == cfg.values
    assert again.serialize() == text


def test_train_run_writes_artifacts(tmp_path):
    cfg = parse_config(SMALL)
    info = run(cfg, tmp_path / "a")
    out = tmp_path / "a"
    for name in ("metrics.csv", "timing.csv", "model.ckpt", "state.bin", "config.ini",
                 "config.canonical.ini", "run.json"):
        assert (out / name).exists(), name
    assert (out / "config.ini").read_text() == SMALL
    meta = json.loads((out / "run.json").read_text())
    assert meta["version"] and meta["dataset"] == info["dataset"]
    run(cfg, tmp_path / "b")
    assert (out / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_zero_budget_run_is_clean(tmp_path):
    cfg = parse_config(SMALL + "\n").with_overrides(train={"epsilon": 0.0, "method": "fgsm_rs"})
    run(cfg, tmp_path)
    rows = (tmp_path / "metrics.csv").read_text().strip().split("\n")
    head = rows[0].split(",")
    for r in rows[1:]:
        vals = dict(zip(head, r.split(",")))
        assert vals["fgsm_acc"] == vals["clean_acc"]


def test_other_kinds(tmp_path):
    cfg = parse_config(SMALL)
    for kind, files in (("saddle", ("regret.csv", "summary.json")),
                        ("eval", ("eval.csv",)),
                        ("probe-surface", ("surface.csv",)),
                        ("diagnose", ("profile.csv", "metrics.csv", "co.json"))):
        out = tmp_path / kind
        run(cfg.with_overrides(experiment={"kind": kind}), out)
        for f in files:
            assert (out / f).exists(), (kind, f)
    lines = (tmp_path / "saddle" / "regret.csv").read_text().strip().split("\n")
    assert lines[0] == "t,regret_prefix,gap,mean_v" and len(lines) == 3


def test_failure_is_recorded(tmp_path):
    cfg = parse_config(SMALL + "\n").with_overrides(data={"source": "mnist", "path": str(tmp_path / "none")})
    with pytest.raises(RunFailed):
        run(cfg, tmp_path / "out")
    assert (tmp_path / "out" / "failure.json").exists()
    assert not (tmp_path / "out" / "run.json").exists()


def test_compare(tmp_path):
    cfg = parse_config(SMALL)
    run(cfg, tmp_path / "a")
    same = compare(tmp_path / "a", tmp_path / "a", "train_robust_loss")
    assert all(d == 0 for d in same["deltas"]) and same["verdict"] == "tie"
    with pytest.raises(KeyError, match="nope"):
        compare(tmp_path / "a", tmp_path / "a", "nope")
    run(cfg.with_overrides(train={"epochs": 3}), tmp_path / "b")
    with pytest.raises(ValueError, match="differ in length"):
        compare(tmp_path / "a", tmp_path / "b", "pgd10_acc")


def test_synthetic_source_is_quantized():
    ds = load_dataset(parse_config(SMALL))
    assert ((ds.images * 255) == (ds.images * 255).round()).all()


def test_main_entry(tmp_path, capsys, monkeypatch):
    path = tmp_path / "c.ini"
    path.write_text(SMALL)
    assert main(["saddle", "--config", str(path), "--out", str(tmp_path / "s"), "--seed", "3"]) == 0
    assert json.loads((tmp_path / "s" / "run.json").read_text())["seed"] == 3
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "t")]) == 0
    assert main(["compare", str(tmp_path / "t"), str(tmp_path / "t"), "--metric", "clean_acc"]) == 0
    assert "tie" in capsys.readouterr().out
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nalhpa = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    mn = tmp_path / "mn.ini"
    mn.write_text("[data]\nsource = mnist\n")
    monkeypatch.setenv("ATAS_DATA_DIR", str(tmp_path / "empty"))
    assert main(["train", "--config", str(mn), "--out", str(tmp_path / "y")]) == 1
