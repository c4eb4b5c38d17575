import csv
import io
import json
import os

import pytest

from edd import cli

TINY = {"num_classes": 4, "num_tasks": 2, "input_dim": 6, "samples_per_class": 30, "layer_sizes": [8, 8, 8],
        "memory_slots_init": 10, "slot_init_stddev": 0.1, "epochs_per_task": 2, "batch_size": 16, "ba_epochs": 1}


def run_cli(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def runs(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    dirs = {}
    for mode in ("joint", "finetune", "edd"):
        dirs[mode] = str(root / mode)
        assert run_cli("run", "--config", tiny_config, "--mode", mode, "--seed", "1", "--out", dirs[mode])[0] == 0
    return dirs


def test_run_writes_every_output(runs):
    for name in cli.RUN_FILES + ("checkpoint/manifest.json", "checkpoint/tensors.bin"):
        assert os.path.exists(os.path.join(runs["edd"], name)), name
    info = json.load(open(os.path.join(runs["edd"], "run.json")))
    assert info["seed"] == 1 and info["mode"] == "edd" and info["config"]["seed"] == 1
    with open(os.path.join(runs["edd"], "losses.csv")) as fh:
        header = next(csv.reader(fh))
    assert header == ["task", "epoch", "step", "ce", "align", "orth", "total"]


def test_repeated_run_is_byte_identical(runs, tiny_config, tmp_path):
    again = str(tmp_path / "again")
    assert run_cli("run", "--config", tiny_config, "--mode", "edd", "--seed", "1", "--out", again)[0] == 0
    for name in cli.RUN_FILES + ("checkpoint/manifest.json", "checkpoint/tensors.bin"):
        with open(os.path.join(runs["edd"], name), "rb") as a, open(os.path.join(again, name), "rb") as b:
            assert a.read() == b.read(), name


def test_eval_matches_the_recorded_final_row(runs, tiny_config):
    code, text = run_cli("eval", "--checkpoint", os.path.join(runs["edd"], "checkpoint"), "--config", tiny_config)
    assert code == 0
    rows = list(csv.reader(io.StringIO(text)))
    info = json.load(open(os.path.join(runs["edd"], "run.json")))
    assert [float(r[1]) for r in rows[1:-1]] == pytest.approx(info["final_accuracies"])


def test_export_features(runs, tiny_config, tmp_path):
    out = tmp_path / "f.csv"
    code, _ = run_cli("export-features", "--checkpoint", os.path.join(runs["edd"], "checkpoint"),
                      "--config", tiny_config, "--out", str(out))
    assert code == 0
    assert out.read_bytes() == open(os.path.join(runs["edd"], "features.csv"), "rb").read()


def test_eval_warns_on_a_different_config(runs, tiny_config, tmp_path):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "lambda_mem": 1.0}))
    with pytest.warns(UserWarning, match="hash"):
        code, _ = run_cli("eval", "--checkpoint", os.path.join(runs["edd"], "checkpoint"), "--config", str(other))
    assert code == 0


def test_report(runs, tmp_path):
    pairs = tmp_path / "pairs.csv"
    code, text = run_cli("report", "--runs", runs["joint"], runs["finetune"], runs["edd"], "--pairs", str(pairs))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert [r["mode"] for r in rows] == ["joint", "finetune", "edd"]
    assert float(rows[0]["gap_w2"]) == 0.0
    assert rows[0]["forgetting_task_1"] == "" and rows[1]["forgetting_task_1"] != ""
    assert pairs.read_text().startswith("run,class_c,class_d,cos,kl,w2,fdist\n")


def test_report_rejects_mixed_streams(runs, tiny_config, tmp_path):
    other = str(tmp_path / "seed2")
    run_cli("run", "--config", tiny_config, "--mode", "finetune", "--seed", "2", "--out", other)
    code, _ = run_cli("report", "--runs", runs["edd"], other)
    assert code == cli.EXIT_CONTRACT


def test_project_capacity(tmp_path):
    code, text = run_cli("project-capacity", "--L0", "1000", "--ratio", "0.15", "--tasks", "20")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "t,L,frozen" and lines[-1].split(",")[:2] == ["20", "1677"]
    code, text = run_cli("project-capacity", "--L0", "1000", "--ratio", "0.15", "--to-saturation",
                         "--out", str(tmp_path / "c.csv"))
    assert code == 0 and text == ""
    assert (tmp_path / "c.csv").read_text().splitlines()[-1].split(",")[1] == "2418"


@pytest.mark.parametrize("argv", [
    ["project-capacity", "--L0", "1000", "--ratio", "1.5", "--tasks", "3"],
    ["project-capacity", "--L0", "0", "--ratio", "0.1", "--tasks", "3"],
    ["project-capacity", "--L0", "10", "--ratio", "0.1"],
    ["project-capacity", "--L0", "10", "--ratio", "1", "--to-saturation"],
    ["bogus"],
])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 2


def test_missing_files_exit_2(tmp_path, capsys):
    code, _ = run_cli("run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o"))
    assert code == cli.EXIT_IO
    assert "nope.json" in capsys.readouterr().err
    assert run_cli("eval", "--checkpoint", str(tmp_path / "none"))[0] == cli.EXIT_IO


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"pruning_ratio": "high"}')
    assert run_cli("run", "--config", str(p), "--out", str(tmp_path / "o"))[0] == cli.EXIT_IO


def test_contract_violation_exit_1(tmp_path):
    p = tmp_path / "odd.json"
    p.write_text(json.dumps({**TINY, "num_tasks": 3}))
    assert run_cli("run", "--config", str(p), "--out", str(tmp_path / "o"))[0] == cli.EXIT_CONTRACT


def test_corrupt_checkpoint_exit_2(runs, tmp_path):
    import shutil
    ck = tmp_path / "ck"
    shutil.copytree(os.path.join(runs["edd"], "checkpoint"), ck)
    raw = bytearray((ck / "tensors.bin").read_bytes())
    raw[0] ^= 1
    (ck / "tensors.bin").write_bytes(bytes(raw))
    assert run_cli("eval", "--checkpoint", str(ck))[0] == cli.EXIT_IO


def test_gradcheck_passes():
    code, text = run_cli("gradcheck", "--seed", "3")
    assert code == 0 and text.rstrip().endswith("0 failed")


def test_gradcheck_report_is_repeatable():
    assert run_cli("gradcheck", "--seed", "5") == run_cli("gradcheck", "--seed", "5")


def test_zero_ratio_keeps_capacity_constant():
    _, text = run_cli("project-capacity", "--L0", "50", "--ratio", "0", "--tasks", "4")
    assert [line.split(",")[1] for line in text.splitlines()[1:]] == ["50"] * 5
