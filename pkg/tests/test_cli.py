import json

import numpy as np
import pytest

from fisherflow import cli
from fisherflow.config import RunConfig, parse_config_text


def run_cli(*argv):
    return cli.main(list(argv))


FAST_TRAIN = [
    "--set", "train.steps=40", "--set", "train.flow_steps=80",
    "--set", "train.batch_size=64", "--set", "train.hidden=16,16",
    "--set", "train.eval_samples=200", "--set", "train.log_interval=10",
    "--set", "data.size=512",
]


def test_gen_data_unknown_task_is_usage_error(tmp_path, capsys):
    code = run_cli("gen-data", "--task", "nope", "--out", str(tmp_path / "d.txt"))
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_gen_data_seed_repeat_identical_bytes(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run_cli("gen-data", "--task", "bimodal_asymmetric", "--size", "128",
                   "--seed", "3", "--out", str(a)) == 0
    assert run_cli("gen-data", "--task", "bimodal_asymmetric", "--size", "128",
                   "--seed", "3", "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_row_count(tmp_path):
    out = tmp_path / "d.txt"
    assert run_cli("gen-data", "--task", "crescent", "--size", "77", "--seed", "0",
                   "--out", str(out)) == 0
    from fisherflow import tasks
    assert len(tasks.load_dataset(out)) == 77


def test_train_writes_artifacts_and_reruns_identically(tmp_path):
    out1 = tmp_path / "r1"
    assert run_cli("train", "--seed", "4", "--out", str(out1), *FAST_TRAIN) == 0
    for name in ("config.txt", "metrics.jsonl", "checkpoint.json", "report.csv"):
        assert (out1 / name).exists()
    # re-launch from the persisted config: byte-identical metrics and report
    out2 = tmp_path / "r2"
    assert run_cli("train", "--config", str(out1 / "config.txt"),
                   "--out", str(out2)) == 0
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    r1 = (out1 / "report.csv").read_text()
    r2 = (out2 / "report.csv").read_text()
    assert r1 == r2
    # persisted config is canonical: re-persisting is byte-stable modulo `out`
    c1 = parse_config_text((out1 / "config.txt").read_text())
    c2 = parse_config_text((out2 / "config.txt").read_text())
    c1.pop("out"), c2.pop("out")
    assert c1 == c2


def test_train_zero_steps_empty_log_valid_checkpoint(tmp_path):
    out = tmp_path / "r0"
    assert run_cli("train", "--out", str(out), "--set", "train.steps=0",
                   "--set", "train.flow_steps=0", "--set", "train.hidden=8,8",
                   "--set", "train.eval_samples=50", "--set", "data.size=64") == 0
    assert (out / "metrics.jsonl").read_text() == ""
    task, tmap = cli.load_checkpoint(out / "checkpoint.json")
    a = np.array([0.5, -0.5])
    np.testing.assert_array_equal(tmap.apply(None, a), a)  # init is the identity map


def test_train_from_dataset_file(tmp_path):
    data = tmp_path / "data.txt"
    assert run_cli("gen-data", "--task", "bimodal_asymmetric", "--size", "256",
                   "--seed", "1", "--out", str(data)) == 0
    out = tmp_path / "r"
    assert run_cli("train", "--out", str(out), "--set", f"data.file={data}",
                   *FAST_TRAIN) == 0
    assert (out / "report.csv").exists()


def test_validate_list_and_selected_suite(capsys):
    assert run_cli("validate", "--list") == 0
    listing = capsys.readouterr().out
    assert "score-identity" in listing and "PASS" not in listing
    assert run_cli("validate", "--suite", "determinant-expansion",
                   "--suite", "optimal-epsilon") == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2


def test_validate_unknown_suite_usage_error():
    assert run_cli("validate", "--suite", "bogus") == 2


def test_export_plots_requires_run_dir(tmp_path):
    assert run_cli("export-plots", "--run", str(tmp_path / "missing")) == 2


def test_export_plots_outputs_match_requests(tmp_path):
    out = tmp_path / "r"
    assert run_cli("train", "--out", str(out), *FAST_TRAIN) == 0
    assert run_cli("export-plots", "--run", str(out), "--samples", "111",
                   "--grid=-4,4,21") == 0
    for name in ("samples_base.csv", "samples_refined.csv", "samples_behavioral.csv"):
        rows = (out / name).read_text().strip().splitlines()
        assert len(rows) == 112  # header + samples
    heat = np.loadtxt(out / "value_heatmap.csv", delimiter=",", skiprows=1)
    assert heat.shape == (21 * 21, 4)


def test_config_roundtrip_bytes():
    cfg = RunConfig.from_entries({"task": "crescent", "seeds": "1,2,3",
                                  "train.metric": "isotropic", "train.t_eps": "0.75"})
    text = cfg.to_text()
    again = RunConfig.from_entries(parse_config_text(text))
    assert again.to_text() == text
    assert again.train.metric == "isotropic"
    assert again.train.t_eps == 0.75
    assert again.seeds == [1, 2, 3]


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        RunConfig.from_entries({"trian.steps": "10"})
    with pytest.raises(ValueError):
        RunConfig.from_entries({"train.stepz": "10"})


def test_cli_set_overrides_take_precedence(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("task = bimodal_asymmetric\ntrain.steps = 500\n")
    cfg = RunConfig.load(path, {"train.steps": "7"})
    assert cfg.train.steps == 7


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus-flag"])
    assert exc.value.code == 2


def test_ablate_metric_deterministic_and_paired(tmp_path):
    outs = []
    for name in ("a1", "a2"):
        out = tmp_path / name
        assert run_cli("ablate-metric", "--seeds", "0,1", "--out", str(out),
                       *FAST_TRAIN) == 0
        outs.append((out / "report.csv").read_text())
        agg = (out / "aggregate.csv").read_text()
        assert "fisher" in agg and "isotropic" in agg and "delta" in agg
    assert outs[0] == outs[1]
    lines = outs[0].strip().splitlines()
    assert len(lines) == 1 + 4  # header + 2 seeds x 2 metrics


def test_sweep_teps_grid_and_determinism(tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert run_cli("sweep-teps", "--seed", "0", "--out", str(out),
                       "--set", "sweep.t_eps=0.8", *FAST_TRAIN) == 0
        outs.append((out / "report.csv").read_text())
    assert outs[0] == outs[1]
    assert len(outs[0].strip().splitlines()) == 2  # single t_eps -> single row


def test_train_5k_steps_completes_in_budget(tmp_path):
    # seeded full-scale run at default widths stays well under five minutes
    import time

    out = tmp_path / "full"
    t0 = time.time()
    assert run_cli("train", "--seed", "0", "--out", str(out),
                   "--set", "train.steps=5000", "--set", "train.flow_steps=2000",
                   "--set", "train.eta=0.2") == 0
    elapsed = time.time() - t0
    assert elapsed < 300.0
    rows = (out / "metrics.jsonl").read_text().strip().splitlines()
    assert json.loads(rows[-1])["step"] == 4999
