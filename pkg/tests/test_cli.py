import json

import numpy as np
import pytest
import yaml

from supernet_search import cli
from supernet_search.errors import DivergenceError
from supernet_search.results import (
    MANIFEST_FILE,
    RESULTS_FILE,
    ResultRecord,
    append_records,
    read_records,
)

SMALL_OPTIONS = {"kernels": [3, 5], "channels": [[2, 4], [4, 8]]}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"space_options": SMALL_OPTIONS, "dtype": "float64"}))
    return str(path)


def _search_args(config, out, *extra):
    return ["search", "--space", "conv-macro", "--data", "planted-kernel", "--config", config,
            "--epochs", "1", "--batch-size", "64", "--no-progress", "--out", str(out), *extra]


def test_search_writes_artifacts(tmp_path, small_config, capsys):
    out = tmp_path / "search"
    assert cli.main(_search_args(small_config, out)) == 0
    printed = capsys.readouterr().out
    assert "Architecture: layer1/kernel=" in printed
    assert "Planted optimum recovered:" in printed
    records = read_records(out / RESULTS_FILE)
    assert [r.epoch for r in records] == [1]
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["space"] == "conv-macro"
    assert "bilevel.epochs" not in manifest["defaults"]
    assert (out / cli.CHECKPOINT_FILE).exists()

    assert cli.main(["discretize", "--space", "conv-macro", "--config", small_config,
                     "--checkpoint", str(out / cli.CHECKPOINT_FILE)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == records[-1].architecture

    assert cli.main(_search_args(small_config, out)) == cli.EXIT_CONFIG


def test_benchmark_then_table_search(tmp_path, small_config, capsys):
    bench = tmp_path / "bench"
    args = [
        "benchmark", "--space", "conv-macro", "--data", "planted-kernel", "--config", small_config,
        "--epochs", "1", "--seeds", "0", "--no-progress", "--out", str(bench),
    ]
    assert cli.main(args) == 0
    assert "Benchmark conv-macro: 16 rows" in capsys.readouterr().out

    out = tmp_path / "random"
    args = [
        "random-search", "--space", "conv-macro", "--data", "planted-kernel",
        "--config", small_config, "--table", str(bench), "--samples", "5", "--no-progress",
        "--out", str(out),
    ]
    assert cli.main(args) == 0
    assert "random-search:" in capsys.readouterr().out
    assert 1 <= len(read_records(out / RESULTS_FILE)) <= 5


def test_report_command(tmp_path, capsys):
    out = tmp_path / "run"
    append_records(out / RESULTS_FILE, [
        ResultRecord(
            "r", "drnas", "conv-macro", "layer1/kernel=0", 0, 0.5, None, epoch, 1.0, 10, "WE"
        )
        for epoch in (1, 2)
    ])
    assert cli.main(["report", "--in", str(out), "--format", "records"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert rows[0]["table"] == "summary"
    assert cli.main(["report", "--in", str(tmp_path / "nothing")]) == cli.EXIT_CONFIG


def test_cka_command(tmp_path, rng, capsys):
    features = rng.standard_normal((12, 4))
    np.save(tmp_path / "a.npy", features)
    np.savez(tmp_path / "b.npz", early=features, late=rng.standard_normal((12, 3)))
    single = str(tmp_path / "a.npy")
    assert cli.main(["cka", "--features-a", single, "--features-b", single]) == 0
    assert capsys.readouterr().out.strip() == "linear CKA: 1.000000"
    bundle = str(tmp_path / "b.npz")
    assert cli.main(["cka", "--features-a", bundle, "--features-b", bundle]) == 0
    assert "early" in capsys.readouterr().out


def test_memory_command(capsys):
    assert cli.main(["memory", "--space", "tiny-lm", "--skip-activations"]) == 0
    printed = capsys.readouterr().out
    assert "ws_we_ratio" in printed
    assert "WS" in printed


def test_configuration_errors_exit_with_two(tmp_path):
    args = ["search", "--space", "tiny-lm", "--data", "planted-kernel", "--out", str(tmp_path)]
    assert cli.main(args) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"bilevel": {"epochz": 3}}))
    assert cli.main(["search", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2


def test_divergence_exits_with_three(tmp_path, small_config, monkeypatch):
    def diverge(*args, **kwargs):
        where = {"run_id": kwargs.get("run_id"), "epoch": 1, "phase": "weights"}
        raise DivergenceError("loss is nan", where)

    monkeypatch.setattr(cli, "train_bilevel", diverge)
    out = tmp_path / "nan"
    assert cli.main(_search_args(small_config, out)) == cli.EXIT_DIVERGENCE
    record = json.loads((out / cli.DIVERGENCE_FILE).read_text())
    assert record["message"] == "loss is nan"
    assert record["phase"] == "weights"
