import csv
import json

import pytest

from bnlandscape.cli import ConfigError, load_config, main


def small(tmp_path, *extra, name="run"):
    out = tmp_path / name
    base = ["--out", str(out), "--set", "model.depth=3", "--set", "model.dim=3",
            "--set", "model.n=40", "--set", "train.steps=6", "--set", "train.lr=0.01",
            "--set", "instrument.ics_every=2", "--set", "instrument.probe_every=3",
            "--set", "instrument.moment_every=2"]
    return out, base + list(extra)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "model.width=3"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--set", "model.norm=groupnorm"]) == 1
    assert main(["train", "--out", str(tmp_path), "--set", "train.lr=-1"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 1
    assert not (tmp_path / "manifest.json").exists()


def test_family_defaults_are_resolved():
    cfg = load_config(None)
    assert cfg["train"]["lr"] == 1e-6 and cfg["train"]["steps"] == 10000 and cfg["model"]["n"] == 1000
    assert len(cfg["instrument"]["multipliers"]) == 20
    mlp = load_config(None, ["model.family=\"mlp\""])
    assert mlp["train"]["batch_size"] == 128 and mlp["train"]["lr"] == 0.1
    with pytest.raises(ConfigError):
        load_config(None, ["model.family=cnn"])


def test_train_writes_loss_moments_and_manifest(tmp_path):
    out, args = small(tmp_path)
    assert main(["train", *args]) == 0
    loss = rows(out / "loss.csv")
    assert loss[0] == ["step", "loss"] and len(loss) == 7
    mom = rows(out / "moments.csv")
    assert mom[0] == ["step", "layer", "unit", "mean", "variance"] and len(mom) == 1 + 3 * 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["schema"] == 1 and man["command"] == "train"
    assert set(man["artifacts"]) == {"loss.csv", "moments.csv"}
    assert man["config"]["train"]["steps"] == 6


def test_zero_steps_gives_header_only(tmp_path):
    out, args = small(tmp_path, "--set", "train.steps=0")
    assert main(["train", *args]) == 0
    assert rows(out / "loss.csv") == [["step", "loss"]]


@pytest.mark.parametrize("command,files", [
    ("train", ["loss.csv", "moments.csv"]),
    ("ics", ["ics.csv"]),
    ("probe", ["landscape.csv"]),
])
def test_rerun_from_manifest_is_byte_identical(tmp_path, command, files):
    out, args = small(tmp_path, "--set", "model.norm=noisy_bn", "--seed", "3")
    assert main([command, *args]) == 0
    again = tmp_path / "again"
    assert main([command, "--config", str(out / "manifest.json"), "--out", str(again)]) == 0
    for f in files:
        assert (out / f).read_bytes() == (again / f).read_bytes()


def test_ics_single_layer_and_zero_lr(tmp_path):
    out, args = small(tmp_path, "--set", "model.depth=1")
    assert main(["ics", *args]) == 0
    body = rows(out / "ics.csv")
    assert body[0] == ["step", "layer", "l2_diff", "cos_angle"]
    assert all(r[2] == "0" and r[3] == "1" for r in body[1:])
    out, args = small(tmp_path, "--set", "train.lr=0", "--set", "model.norm=\"bn\"", name="zero")
    assert main(["ics", *args]) == 0
    body = rows(out / "ics.csv")[1:]
    assert len(body) == 3 * 3 and all(float(r[2]) == 0.0 for r in body)


def test_probe_tiny_multiplier(tmp_path):
    out, args = small(tmp_path, "--set", "instrument.multipliers=[1e-8]")
    assert main(["probe", *args]) == 0
    body = [r for r in rows(out / "landscape.csv")[1:] if r[1]]
    assert body and all(float(r[3]) < 1e-4 for r in body)


def test_probe_summary_rows(tmp_path):
    out, args = small(tmp_path)
    assert main(["probe", *args]) == 0
    table = rows(out / "landscape.csv")
    summary = [r for r in table[1:] if r[1] == ""]
    assert [r[0] for r in summary] == ["0", "3"]
    assert all(float(r[4]) >= 0 for r in summary)
    assert len(table) == 1 + 2 * 21


def test_verify_small_run_and_skips(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", "--out", str(out), "--set", "verify.seeds=3"]) == 0
    reports = json.loads((out / "verify.json").read_text())
    assert len(reports) == 3 * 8 and all(r["passed"] for r in reports)
    assert all("residual" in r and "slack" in r for r in reports)
    out2 = tmp_path / "v2"
    assert main(["verify", "--out", str(out2), "--set", "verify.seeds=2",
                 "--set", "verify.m_min=2", "--set", "verify.m_max=2"]) == 0
    reports = json.loads((out2 / "verify.json").read_text())
    assert len(reports) == 2 and all(r["skipped"] for r in reports)


def test_compare_single_variant(tmp_path):
    out, args = small(tmp_path, "--set", "compare.variants=[\"vanilla\"]", "--set", "compare.seeds=[1]")
    assert main(["compare", *args]) == 0
    table = rows(out / "summary.csv")
    assert len(table) == 2 and table[1][0] == "vanilla" and table[1][1] == "1"


def test_compare_grad_eval_column(tmp_path):
    out, args = small(tmp_path, "--set", "compare.variants=[\"vanilla\",\"adjusted\",\"reduced_lr\"]",
                      "--set", "compare.seeds=[0]")
    assert main(["compare", *args]) == 0
    table = {r[0]: r for r in rows(out / "summary.csv")[1:]}
    assert int(table["adjusted"][6]) == 3 * int(table["vanilla"][6])
    assert table["reduced_lr"][6] == table["vanilla"][6]


def test_mlp_noisy_run_completes(tmp_path):
    out = tmp_path / "mlp"
    code = main(["train", "--out", str(out), "--set", "model.family=mlp", "--set", "model.norm=noisy_bn",
                 "--set", "train.steps=20"])
    man = json.loads((out / "manifest.json").read_text())
    assert code in (0, 2) and "divergence" in man
    losses = [float(r[1]) for r in rows(out / "loss.csv")[1:]]
    assert man["divergence"]["diverged"] or len(losses) == 20


def test_divergence_exit_code(tmp_path):
    out, args = small(tmp_path, "--set", "train.lr=50", "--set", "train.steps=100")
    assert main(["train", *args]) == 2
    assert json.loads((out / "manifest.json").read_text())["divergence"]["diverged"]
