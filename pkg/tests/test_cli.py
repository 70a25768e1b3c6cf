import json

import numpy as np
import pandas as pd
import pytest

from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, TrainConfig, load_config, main, resolve_workers
from errors import ConfigError
from fq_autograd import load_layer
from tensor_io import load_tensor, save_tensor


def read_json(path):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------

def test_config_precedence(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"steps": 5, "lr": 0.5, "notation": "4-6-6"}))
    cfg = load_config(TrainConfig, str(path), ["steps=7", "dims=[8, 8, 2]"], {"out_dir": "x"})
    assert (cfg.steps, cfg.lr, cfg.notation, cfg.dims, cfg.out_dir) == (7, 0.5, "4-6-6", [8, 8, 2], "x")


@pytest.mark.parametrize("sets", [["bogus=1"], ["steps"], ["=3"]])
def test_config_rejects_bad_pairs(sets):
    with pytest.raises(ConfigError):
        load_config(TrainConfig, None, sets)


@pytest.mark.parametrize(
    "sets",
    [['steps="ten"'], ["steps=ten"], ["steps=2.5"], ["steps=null"], ["lr=true"], ["identity=1"],
     ["notation=4"], ['dims=[8, "x", 2]'], ["dims=8"]],
)
def test_config_rejects_wrong_types(sets):
    with pytest.raises(ConfigError):
        load_config(TrainConfig, None, sets)


def test_config_accepts_nulls_and_integer_floats():
    cfg = load_config(TrainConfig, None, ["adapter_bits=null", "lr=1", "loss_scale=1024"])
    assert (cfg.adapter_bits, cfg.lr, cfg.loss_scale) == (None, 1, 1024)


def test_config_rejects_bad_files(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(TrainConfig, str(broken))
    with pytest.raises(ConfigError):
        load_config(TrainConfig, str(tmp_path / "missing.json"))
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(TrainConfig, str(listing))


def test_resolve_workers(monkeypatch):
    assert resolve_workers(3) == 3
    monkeypatch.delenv("GSQ_WORKERS", raising=False)
    assert resolve_workers(None) == 1
    monkeypatch.setenv("GSQ_WORKERS", "2")
    assert resolve_workers(None) == 2
    monkeypatch.setenv("GSQ_WORKERS", "many")
    with pytest.raises(ConfigError):
        resolve_workers(None)
    with pytest.raises(ConfigError):
        resolve_workers(0)


# --------------------------------------------------------------------------
# Exit codes
# --------------------------------------------------------------------------

def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["quantize", "--bits", "eight"])
    assert info.value.code == EXIT_USAGE


def test_unknown_config_key_exits_one(tmp_path):
    assert main(["mem", "--out", str(tmp_path), "--set", "colour=blue"]) == EXIT_USAGE
    assert not list(tmp_path.iterdir())


def test_wrong_value_types_exit_one(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", 'steps="ten"']) == EXIT_USAGE
    sets = ["--set", 'tensors=[{"kind": "file"}]']
    assert main(["formats-compare", "--out", str(tmp_path)] + sets) == EXIT_USAGE
    assert not list(tmp_path.iterdir())


def test_missing_input_exits_two(tmp_path):
    assert main(["quantize", str(tmp_path / "nothing.gsqt"), str(tmp_path / "out.gseb")]) == EXIT_RUNTIME


def test_missing_output_is_a_config_error(tmp_path):
    assert main(["quantize", str(tmp_path / "in.gsqt")]) == EXIT_USAGE


# --------------------------------------------------------------------------
# quantize / dequantize
# --------------------------------------------------------------------------

def test_quantize_dequantize_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(5, 37))
    source = tmp_path / "x.gsqt"
    save_tensor(source, x)
    first = tmp_path / "x.gseb"
    assert main(["quantize", str(source), str(first), "--bits", "6", "--group-size", "16"]) == EXIT_OK

    stats = read_json(str(first) + ".stats.json")
    assert stats["pad_len"] == 11
    assert stats["groups"] == 5 * 3
    assert stats["bits_per_element"] == pytest.approx((16 * 6 + 5) / 16)
    assert 0 < stats["max_abs_error"] < 0.25

    restored = tmp_path / "x_deq.gsqt"
    assert main(["dequantize", str(first), str(restored)]) == EXIT_OK
    back = load_tensor(restored)
    assert back.shape == (5, 37)
    assert np.max(np.abs(back - x)) == pytest.approx(stats["max_abs_error"])

    second = tmp_path / "again.gseb"
    assert main(["quantize", str(restored), str(second), "--bits", "6", "--group-size", "16"]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()


def test_quantize_along_columns_and_fp32_output(tmp_path):
    x = np.random.default_rng(1).normal(size=(40, 3))
    source = tmp_path / "x.gsqt"
    save_tensor(source, x)
    packed = tmp_path / "x.gseb"
    assert main(["quantize", str(source), str(packed), "--axis", "along_cols", "--set", "group_size=32"]) == EXIT_OK
    assert read_json(str(packed) + ".stats.json")["pad_len"] == 24
    out = tmp_path / "x32.gsqt"
    assert main(["dequantize", str(packed), str(out), "--dtype", "fp32"]) == EXIT_OK
    assert out.read_bytes()[5] == 0


def test_quantize_rejects_three_dimensional_input(tmp_path):
    source = tmp_path / "cube.gsqt"
    save_tensor(source, np.ones((2, 2, 2)))
    assert main(["quantize", str(source), str(tmp_path / "cube.gseb")]) == EXIT_RUNTIME


def test_quantize_rejects_bad_bits(tmp_path):
    source = tmp_path / "x.gsqt"
    save_tensor(source, np.ones((2, 8)))
    assert main(["quantize", str(source), str(tmp_path / "x.gseb"), "--bits", "9"]) == EXIT_USAGE


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

TRAIN_SETS = ["--set", "steps=20", "--set", "n_train=64", "--set", "n_eval=32", "--set", "batch=16"]


def test_train_artifacts_are_deterministic(tmp_path):
    one, two = tmp_path / "one", tmp_path / "two"
    assert main(["train", "--out", str(one)] + TRAIN_SETS) == EXIT_OK
    assert main(["train", "--out", str(two)] + TRAIN_SETS) == EXIT_OK

    assert (one / "metrics.csv").read_bytes() == (two / "metrics.csv").read_bytes()
    assert (one / "plot_loss.csv").read_bytes() == (two / "plot_loss.csv").read_bytes()
    metrics = pd.read_csv(one / "metrics.csv")
    assert list(metrics.columns) == ["step", "loss", "grad_norm"]
    assert len(metrics) == 20

    runs = [read_json(d / "run.json") for d in (one, two)]
    for run in runs:
        run["run"].pop("wall_time_s")
        run["config"].pop("out_dir")
    assert runs[0] == runs[1]
    assert runs[0]["run"]["config"]["notation"] == "4-8-8"


def test_train_writes_checkpoints(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "checkpoint=true",
                 "--set", "dims=[8, 8, 2]"] + TRAIN_SETS) == EXIT_OK
    layer, cfg = load_layer(tmp_path / "layer1.gsql")
    assert layer.name == "layer1"
    assert cfg.notation == "4-8-8" and cfg.rank == 4


def test_failed_training_exits_two(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "lr=1e6", "--set", "notation=\"4-16-16\""]
                + TRAIN_SETS) == EXIT_RUNTIME
    run = read_json(tmp_path / "run.json")["run"]
    assert run["failed"] is True and run["final_eval"] is None


def test_train_excel_report(tmp_path):
    openpyxl = pytest.importorskip("openpyxl")
    assert main(["train", "--out", str(tmp_path), "--excel"] + TRAIN_SETS) == EXIT_OK
    workbook = openpyxl.load_workbook(tmp_path / "train.xlsx")
    assert workbook.sheetnames == ["Metrics", "Graph"]
    assert (tmp_path / "train.png").exists()


# --------------------------------------------------------------------------
# sweep / gradcheck / mem / formats-compare
# --------------------------------------------------------------------------

SWEEP_SETS = ["--set", "bits=[8]", "--set", "ranks=[2]", "--set", "seeds=[0]", "--set", "steps=5",
              "--set", "workers=1"]


def test_single_point_sweep(tmp_path):
    assert main(["sweep", "--out", str(tmp_path)] + SWEEP_SETS) == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "bits,rank,group,seed,final_loss,memory_bytes,dominated,wall_ms"
    assert len(lines) == 2
    pareto = read_json(tmp_path / "pareto.json")
    assert len(pareto["points"]) == 1 and pareto["points"][0]["dominated"] is False


def test_sweep_over_group_sizes(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--set", "group_sizes=[8, 16]"] + SWEEP_SETS) == EXIT_OK
    runs = pd.read_csv(tmp_path / "sweep.csv")
    assert list(runs["group"]) == [8, 16]
    pareto = read_json(tmp_path / "pareto.json")
    assert [p["group_size"] for p in pareto["points"]] == [8, 16]
    assert [row["group"] for row in pareto["group_sizes"]] == [8, 16]


def test_sweep_is_deterministic_apart_from_timing(tmp_path):
    sets = SWEEP_SETS + ["--set", "ranks=[2, 4]"]
    assert main(["sweep", "--out", str(tmp_path / "a")] + sets) == EXIT_OK
    assert main(["sweep", "--out", str(tmp_path / "b")] + sets) == EXIT_OK
    a = pd.read_csv(tmp_path / "a" / "sweep.csv").drop(columns="wall_ms")
    b = pd.read_csv(tmp_path / "b" / "sweep.csv").drop(columns="wall_ms")
    pd.testing.assert_frame_equal(a, b)
    assert (tmp_path / "a" / "plot_pareto.csv").read_bytes() == (tmp_path / "b" / "plot_pareto.csv").read_bytes()


def test_sweep_with_every_run_failing_exits_two(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--set", "lr=1e6"] + SWEEP_SETS) == EXIT_RUNTIME
    assert len(read_json(tmp_path / "pareto.json")["excluded"]) == 1


def test_gradcheck_exit_codes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path / "id")]) == EXIT_OK
    report = read_json(tmp_path / "id" / "gradcheck.json")
    assert report["passed"] is True and report["report"]["max_rel_error"] <= 1e-5

    assert main(["gradcheck", "--out", str(tmp_path / "q"), "--set", "mode=quantized"]) == EXIT_OK
    assert main(["gradcheck", "--out", str(tmp_path / "strict"), "--set", "mode=quantized",
                 "--set", "tolerance=1e-30"]) == EXIT_RUNTIME
    assert main(["gradcheck", "--out", str(tmp_path / "bad"), "--set", "eps=0.5"]) == EXIT_USAGE


def test_mem_report(tmp_path):
    assert main(["mem", "--out", str(tmp_path)]) == EXIT_OK
    table = pd.read_csv(tmp_path / "memory.csv").set_index("notation")
    assert list(table.index) == ["4-16-16", "4-8-8", "4-6-6", "4-5-5"]
    assert table.loc["4-16-16", "saving_vs_baseline"] == 1.0
    assert 0.75 * 1.85 <= table.loc["4-5-5", "saving_vs_baseline"] <= 1.25 * 1.85
    assert table.loc["4-8-8", "activation_ratio_vs_16bit"] == pytest.approx(512 / 261)
    assert "total_bytes" in read_json(tmp_path / "memory.json")["formulas"]


def test_mem_rejects_unknown_model(tmp_path):
    assert main(["mem", "--out", str(tmp_path), "--set", "model=\"gpt-9\""]) == EXIT_USAGE


FORMATS_SETS = [
    "--set",
    'tensors=[{"name": "z", "kind": "zeros", "shape": [2, 32]},'
    ' {"name": "g", "kind": "gaussian", "shape": [4, 64], "seed": 3}]',
]


def test_formats_compare_flags_degenerate_tensor(tmp_path):
    assert main(["formats-compare", "--out", str(tmp_path)] + FORMATS_SETS) == EXIT_OK
    summary = read_json(tmp_path / "formats.json")
    assert summary["degenerate_tensors"] == ["z"]
    table = pd.read_csv(tmp_path / "formats.csv")
    assert set(table["tensor"]) == {"z", "g"}
    assert len(table) == 2 * (4 + 4)
    ablation = pd.read_csv(tmp_path / "group_ablation.csv")
    assert set(ablation["tensor"]) == {"g"}


def test_formats_compare_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["formats-compare", "--out", str(tmp_path / name)] + FORMATS_SETS) == EXIT_OK
    for artifact in ("formats.csv", "group_ablation.csv", "plot_sqnr.csv"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_formats_compare_rejects_unknown_tensor_kind(tmp_path):
    sets = ["--set", 'tensors=[{"kind": "noise"}]']
    assert main(["formats-compare", "--out", str(tmp_path)] + sets) == EXIT_USAGE
