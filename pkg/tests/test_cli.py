import json
import subprocess
import sys

import pytest

from actsel import checkpoint, cli, metrics

CONFIG = {
    "seed": 0,
    "data": {"kind": "classification", "n": 3000, "d": 8, "k": 4, "noise_rate": 0.2},
    "models": {"learner": {"layer_widths": [8, 16], "out_dim": 4}},
    "loop": {"steps": 30, "eval_every": 10, "lr": 3e-3, "super_batch": 32, "sub_batch": 16,
             "reference_steps": 60},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(CONFIG))
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out.strip().splitlines(), out.err


def summary(lines):
    return json.loads(lines[-1])


def test_gen_data(capsys, config, tmp_path):
    code, lines, _ = run(capsys, "gen-data", "--config", config, "--out", tmp_path / "d")
    assert code == 0
    s = summary(lines)
    assert s["count"] == 3000 and abs(s["noise_fraction"] - 0.2) < 0.03
    assert (tmp_path / "d" / "data.csv").exists()
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["count"] == 3000


def test_pretrain_then_train(capsys, config, tmp_path):
    code, lines, _ = run(capsys, "pretrain-ref", "--config", config, "--out", tmp_path / "r")
    assert code == 0
    ckpt = summary(lines)["checkpoint"]
    checkpoint.load(ckpt)
    code, lines, _ = run(capsys, "train", "--config", config, "--reference", ckpt,
                         "--policy", "learnability", "--out", tmp_path / "t")
    assert code == 0
    s = summary(lines)
    assert s["steps"] == 30 and 0 <= s["final_value"] <= 1
    rows = metrics.read_metrics(tmp_path / "t" / "metrics.jsonl")
    assert list(rows.steps) == [0, 10, 20, 30]
    assert rows.records[-1].cum_flops_ref > 0


@pytest.mark.parametrize("extra", [["--reference-source", "online"], ["--workers", "2"],
                                   ["--policy", "hard"], ["--reference-source", "heldout"]])
def test_train_variants(capsys, config, tmp_path, extra):
    code, lines, _ = run(capsys, "train", "--config", config, "--out", tmp_path / "t", *extra)
    assert code == 0
    s = summary(lines)
    if "--workers" in extra:
        assert s["at_most_once"] and s["workers"] == 2


def test_baseline_and_eval(capsys, config, tmp_path):
    code, lines, _ = run(capsys, "baseline", "--config", config, "--out", tmp_path / "b")
    assert code == 0
    s = summary(lines)
    assert s["cum_flops_actor"] == 0
    code, lines, _ = run(capsys, "eval", "--config", config, "--checkpoint", s["checkpoint"],
                         "--out", tmp_path / "e")
    assert code == 0 and summary(lines)["value"] == pytest.approx(s["final_value"])


def test_flops_report(capsys, tmp_path):
    code, lines, _ = run(capsys, "flops-report", "--learner", "L", "--actor", "Ti", "--spi", "0.5",
                         "--beta", "0.74", "--out", tmp_path)
    assert code == 0
    s = summary(lines)
    assert s["classact_cost"] == pytest.approx(144.5)
    assert round(s["classact_break_even"], 3) == 0.952
    code, _, err = run(capsys, "flops-report", "--learner", "XL", "--out", tmp_path)
    assert code == 2 and "learner" in err


def test_diagnose_taylor(capsys, tmp_path):
    code, lines, _ = run(capsys, "diagnose-taylor", "--out", tmp_path)
    assert code == 0
    assert 1.9 <= summary(lines)["slope"] <= 2.1
    assert sum(line.startswith("lambda=") for line in lines) == 4


def test_config_errors_name_the_field(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**CONFIG, "loop": {"sub_batch": 500}}))
    code, _, err = run(capsys, "baseline", "--config", bad, "--out", tmp_path)
    assert code == 2 and "config error" in err and "sub_batch" in err
    bad.write_text(json.dumps({**CONFIG, "lop": {}}))
    code, _, err = run(capsys, "baseline", "--config", bad, "--out", tmp_path)
    assert code == 2 and "lop" in err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--bogus"])
    assert info.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "actsel", "flops-report", "--format", "json",
                           "--out", str(tmp_path)], capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout.splitlines()[-1])["command"] == "flops-report"
