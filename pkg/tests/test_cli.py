import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdac.cli import main
from cdac.experiment import (OUTPUT_ROOT_ENV, SCHEMA, ConfigError, SchemaError, ablation_configs, compare,
                             parse_config)

MINIMAL = "data.generator = two_moons\ntrain.method = cdac\n"

TINY = """\
data.generator = two_moons
data.n_per_domain = 120
train.method = cdac
train.epochs = 1
train.steps_per_epoch = 10
train.eval_every = 5
model.feature_dim = 8
"""


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    root = tmp_path / "out"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(root))
    return root


def _write(tmp_path, text, name="cfg.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ------------------------------------------------------------------ parsing


def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    tc = cfg.train_config()
    assert (tc.hp.lam, tc.hp.tau, tc.hp.nu, tc.hp.k) == (1.0, 0.95, 30.0, 5)
    assert tc.method == "cdac" and tc.use_aac and tc.use_pl and tc.use_con


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="speed"):
        parse_config(MINIMAL + "speed=fast\n")


@pytest.mark.parametrize("text,key", [
    ("train.method = cdac\n", "data.generator"),
    ("data.generator = two_moons\n", "train.method"),
    (MINIMAL + "train.epochs = ten\n", "train.epochs"),
    (MINIMAL + "train.use_aac = maybe\n", "train.use_aac"),
    (MINIMAL + "optim.lr = nan\n", "optim.lr"),
    (MINIMAL + "train.setting = semi\n", "train.setting"),
    ("data.generator = spirals\ntrain.method = cdac\n", "data.generator"),
    (MINIMAL + "data.seed = 1\ndata.seed = 2\n", "data.seed"),
])
def test_errors_name_the_key_path(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(text)


def test_invalid_hyperparameter_rejected():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "hp.tau = 1.5\n")


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\n" + MINIMAL + "hp.lam = 0.5   # weaker\n")
    assert cfg["hp.lam"] == 0.5


def test_round_trip_default_config():
    cfg = parse_config(MINIMAL)
    again = parse_config(cfg.serialize())
    assert again == cfg
    assert again.serialize() == cfg.serialize()


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-6, 10.0), st.floats(0.01, 0.99), st.integers(1, 50), st.booleans(),
       st.lists(st.integers(1, 64), min_size=0, max_size=3), st.sampled_from(["ssda", "uda"]),
       st.one_of(st.none(), st.integers(1, 1000)))
def test_round_trip_property(lr, tau, epochs, use_pl, hidden, setting, ramp):
    text = MINIMAL + (f"optim.lr = {lr!r}\nhp.tau = {tau!r}\ntrain.epochs = {epochs}\n"
                      f"train.use_pl = {use_pl}\nmodel.hidden_dims = {','.join(map(str, hidden))}\n"
                      f"train.setting = {setting}\nhp.ramp_steps = {ramp}\n")
    cfg = parse_config(text)
    assert parse_config(cfg.serialize()) == cfg
    assert cfg["optim.lr"] == lr and cfg["hp.ramp_steps"] == ramp


def test_serialization_lists_every_key():
    keys = [line.split(" = ")[0] for line in parse_config(MINIMAL).serialize().splitlines()]
    assert keys == list(SCHEMA)


def test_ablation_grid_rows():
    rows = ablation_configs(parse_config(MINIMAL))
    assert len(rows) == 10
    assert [c["train.setting"] for _, c in rows] == ["uda"] * 5 + ["ssda"] * 5
    flags = [(c["train.use_aac"], c["train.use_pl"], c["train.use_con"]) for _, c in rows[:5]]
    assert flags == [(False, False, False), (True, False, False), (False, True, False), (True, True, False),
                     (True, True, True)]
    assert len({label for label, _ in rows}) == 10


# ------------------------------------------------------------------ run


def test_run_without_shift_learns(tmp_path, out_root):
    path = _write(tmp_path, "data.generator = two_moons\ndata.rotation = 0\ntrain.method = s+t\nrun.name = st\n")
    assert main(["run", str(path)]) == 0
    info = json.loads((out_root / "st" / "summary.json").read_text())
    assert info["final_accuracy"] > 0.9
    assert info["seed"] == 0 and info["config"]["train.method"] == "s+t"


def test_run_artifacts_are_byte_reproducible(tmp_path, out_root, monkeypatch):
    path = _write(tmp_path, TINY + "run.emit_features = true\n")
    original = path.read_bytes()
    assert main(["run", str(path)]) == 0
    first = {name: (out_root / "run" / name).read_bytes()
             for name in ("config.txt", "metrics.csv", "summary.json", "features.csv")}
    assert path.read_bytes() == original

    second_root = tmp_path / "again"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(second_root))
    assert main(["run", str(path)]) == 0
    for name, data in first.items():
        assert (second_root / "run" / name).read_bytes() == data
    assert "INFO" in (second_root / "run" / "run.log").read_text()
    header = first["metrics.csv"].split(b"\n")[0].decode().split(",")
    assert not any("time" in col for col in header)


def test_config_echo_reproduces_run(tmp_path, out_root, monkeypatch):
    path = _write(tmp_path, TINY)
    main(["run", str(path)])
    echo = out_root / "run" / "config.txt"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "echo"))
    assert main(["run", str(echo)]) == 0
    assert (tmp_path / "echo" / "run" / "metrics.csv").read_bytes() == (out_root / "run" / "metrics.csv").read_bytes()


def test_feature_dump_rows(tmp_path, out_root):
    path = _write(tmp_path, TINY + "run.emit_features = true\n")
    main(["run", str(path)])
    lines = (out_root / "run" / "features.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["domain", "split", "class"] and len(lines[0].split(",")) == 3 + 8
    ds = parse_config(TINY).dataset()
    assert len(lines) - 1 == len(ds.source) + len(ds.target_labeled) + len(ds.target_unlabeled) + len(ds.target_test)


def test_output_dir_key_used_without_env(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    path = _write(tmp_path, TINY + f"run.output_dir = {tmp_path / 'direct'}\n")
    assert main(["run", str(path)]) == 0
    assert (tmp_path / "direct" / "run" / "metrics.csv").exists()


def test_seeds_flag_writes_one_directory_per_seed(tmp_path, out_root):
    path = _write(tmp_path, TINY)
    assert main(["run", str(path), "--seeds", "3,4"]) == 0
    for seed in (3, 4):
        info = json.loads((out_root / "run" / f"seed{seed}" / "summary.json").read_text())
        assert info["seed"] == seed and info["config"]["data.seed"] == seed


def test_divergence_exits_nonzero(tmp_path, out_root, capsys):
    path = _write(tmp_path, TINY + "optim.lr = 1e300\n")
    with np.errstate(all="ignore"):
        status = main(["run", str(path)])
    assert status != 0
    assert "non-finite" in capsys.readouterr().err
    assert "ERROR" in (out_root / "run" / "run.log").read_text()


def test_bad_config_exits_with_diagnostic(tmp_path, out_root, capsys):
    path = _write(tmp_path, MINIMAL + "speed = fast\n")
    assert main(["run", str(path)]) == 2
    assert "speed" in capsys.readouterr().err


def test_sweep_writes_one_metrics_file_per_row(tmp_path, out_root):
    path = _write(tmp_path, TINY.replace("train.steps_per_epoch = 10", "train.steps_per_epoch = 4"))
    assert main(["sweep", str(path), "--ablations"]) == 0
    files = sorted((out_root / "run").glob("*/metrics.csv"))
    assert len(files) == 10
    arms = {json.loads((f.parent / "summary.json").read_text())["arm"] for f in files}
    assert arms == {"uda:CE", "uda:CE+AAC", "uda:CE+PL", "uda:CE+AAC+PL", "uda:cdac",
                    "ssda:CE", "ssda:CE+AAC", "ssda:CE+PL", "ssda:CE+AAC+PL", "ssda:cdac"}


def test_sweep_requires_flag(tmp_path, out_root):
    assert main(["sweep", str(_write(tmp_path, TINY))]) == 2


# ------------------------------------------------------------------ compare


def _fake_run(root, name, arm, seed, accs):
    d = root / name
    d.mkdir(parents=True)
    rows = ["step,accuracy"] + [f"{i},{a!r}" for i, a in enumerate(accs)]
    (d / "metrics.csv").write_text("\n".join(rows) + "\n")
    (d / "summary.json").write_text(json.dumps({"arm": arm, "seed": seed}))
    return d / "metrics.csv"


def test_compare_self_has_zero_differences(tmp_path, out_root, capsys):
    path = _write(tmp_path, TINY)
    main(["run", str(path)])
    metrics = out_root / "run" / "metrics.csv"
    csv_out = tmp_path / "cmp.csv"
    assert main(["compare", str(metrics), str(metrics), "--csv", str(csv_out)]) == 0
    result = compare([metrics, metrics])
    assert result.files[0].final_accuracy == result.files[1].final_accuracy
    (arm,) = result.arms.values()
    assert arm["final_std"] == 0.0 and arm["best_std"] == 0.0
    deltas = [line.split(",")[-1] for line in csv_out.read_text().splitlines()[1:3]]
    assert deltas == ["0.0", "0.0"]
    assert "+0.0000" in capsys.readouterr().out


def test_compare_per_arm_statistics(tmp_path):
    a = [_fake_run(tmp_path, f"a{s}", "ssda:cdac", s, [0.5, acc]) for s, acc in ((0, 0.9), (1, 0.8), (2, 0.7))]
    b = [_fake_run(tmp_path, f"b{s}", "ssda:s+t", s, [0.6, acc, 0.55]) for s, acc in ((5, 0.65), (6, 0.75))]
    result = compare(a + b)
    cd, st_ = result.arms["ssda:cdac"], result.arms["ssda:s+t"]
    assert cd["n"] == 3 and cd["final_mean"] == pytest.approx(0.8) and cd["final_std"] == pytest.approx(0.1)
    assert st_["final_mean"] == pytest.approx(0.55) and st_["final_std"] == 0.0
    assert st_["best_mean"] == pytest.approx(0.70) and st_["best_std"] == pytest.approx(np.std([0.65, 0.75], ddof=1))


def test_compare_rejects_malformed_csv(tmp_path, capsys):
    good = _fake_run(tmp_path, "good", "x", 0, [0.5])
    bad = tmp_path / "bad.csv"
    bad.write_text("step,acc\n0,0.5\n")
    with pytest.raises(SchemaError):
        compare([good, bad])
    assert main(["compare", str(good), str(bad)]) == 2
    garbage = tmp_path / "garbage.csv"
    garbage.write_text("step,accuracy\nzero,high\n")
    with pytest.raises(SchemaError):
        compare([good, garbage])
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(SchemaError):
        compare([good, empty])


def test_compare_rejects_mismatched_columns(tmp_path):
    a = _fake_run(tmp_path, "a", "x", 0, [0.5])
    b = tmp_path / "b.csv"
    b.write_text("step,accuracy,extra\n0,0.5,1\n")
    with pytest.raises(SchemaError):
        compare([a, b])


def test_compare_needs_two_files(tmp_path):
    with pytest.raises(ValueError):
        compare([_fake_run(tmp_path, "a", "x", 0, [0.5])])
