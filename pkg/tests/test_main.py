import csv
import json
import math
from fractions import Fraction

import pytest

from bag_data import MANIFEST_NAME
from main import main, parse_grid, parse_int_list
from errors import ConfigError
from mil_model import init_params, save_checkpoint
from run_store import (
    ABLATION_SUMMARY_NAME, CHECKPOINT_NAME, EFFECTIVE_CONFIG_NAME, HISTORY_NAME, LOG_NAME, PRIORITY_ROWS_NAME,
    RUN_META_NAME,
)

TINY = {
    "gen": {"class_counts": {name: 4 for name in ("TA", "TVA", "TSA", "HP", "SSL", "IP", "LP")},
            "dim": 6, "min_bag_size": 8, "max_bag_size": 12, "alpha": 0.5},
    "mixed": {"pairs": [["TA", "LP"], ["HP", "IP"]], "bags_per_pair": 2},
    "trainer": {"epochs": 2, "attn_dim": 2, "lr": 0.01},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return path


@pytest.fixture
def generated(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(tiny_config), "--seed", "0", "--out", str(out)]) == 0
    return out


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# ---------- 参数解析 ----------

def test_parse_grid():
    assert parse_grid("0.05:0.5:0.05", "alpha") == [round(0.05 * i, 10) for i in range(1, 11)]
    assert parse_grid("0.4, 0.6", "beta") == [0.4, 0.6]
    for bad in ("", "0.5:0.1:0.1", "a,b", "0.1:0.5:0"):
        with pytest.raises(ConfigError):
            parse_grid(bad, "alpha")


def test_parse_int_list():
    assert parse_int_list("0,1, 2", "seeds") == [0, 1, 2]
    with pytest.raises(ConfigError):
        parse_int_list("", "seeds")
    with pytest.raises(ConfigError):
        parse_int_list("1,x", "seeds")


def test_usage_errors():
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["--help"]) == 0


# ---------- gen-data ----------

def test_gen_data_writes_manifest(generated, tiny_config, tmp_path, capsys):
    manifest = generated / MANIFEST_NAME
    lines = manifest.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 28 + 4
    assert (generated / EFFECTIVE_CONFIG_NAME).exists()
    assert (generated / LOG_NAME).exists()
    first = manifest.read_bytes()
    assert main(["gen-data", "--config", str(tiny_config), "--seed", "0", "--out", str(generated)]) == 0
    assert manifest.read_bytes() == first
    assert "TSA" in capsys.readouterr().out


def test_info_lines_only_in_run_log(tmp_path, tiny_config, capsys):
    out = tmp_path / "quiet"
    assert main(["gen-data", "--config", str(tiny_config), "--seed", "0", "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "gen-data seed=" not in captured.err
    assert "gen-data seed=" not in captured.out
    assert "gen-data seed=0" in (out / LOG_NAME).read_text(encoding="utf-8")


def test_gen_data_rejects_invalid_alpha(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"gen": {"alpha": 0.0}}), encoding="utf-8")
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == 2


# ---------- train / eval ----------

def test_train_outputs_are_reproducible(generated, tiny_config):
    args = ["train", "--config", str(tiny_config), "--out", str(generated), "--epochs", "1", "--quiet"]
    assert main(args) == 0
    for name in (CHECKPOINT_NAME, HISTORY_NAME, RUN_META_NAME, EFFECTIVE_CONFIG_NAME):
        assert (generated / name).exists()
    snapshot = {name: (generated / name).read_bytes() for name in (CHECKPOINT_NAME, HISTORY_NAME, RUN_META_NAME)}
    assert main(args) == 0
    for name, content in snapshot.items():
        assert (generated / name).read_bytes() == content
    meta = json.loads((generated / RUN_META_NAME).read_text(encoding="utf-8"))
    assert meta["epochs"] == 1 and meta["splits"]["train"] == 21


def test_train_ablation_flags(generated, tiny_config):
    assert main(["train", "--config", str(tiny_config), "--out", str(generated), "--epochs", "1", "--quiet",
                 "--no-iha", "--no-uhd"]) == 0
    record = json.loads((generated / HISTORY_NAME).read_text(encoding="utf-8").splitlines()[0])
    assert record["train_loss"]["iha"] == 0.0 and record["train_loss"]["uhd"] == 0.0
    effective = json.loads((generated / EFFECTIVE_CONFIG_NAME).read_text(encoding="utf-8"))
    assert effective["ablation"]["use_iha"] is False and effective["ablation"]["use_remix"] is True


def test_train_without_manifest(tmp_path, tiny_config):
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "empty"), "--quiet"]) == 2


def test_eval_splits(generated, tiny_config, capsys):
    assert main(["train", "--config", str(tiny_config), "--out", str(generated), "--quiet"]) == 0
    checkpoint = str(generated / CHECKPOINT_NAME)
    base = ["eval", "--config", str(tiny_config), "--out", str(generated), "--checkpoint", checkpoint]

    assert main(base + ["--split", "val"]) == 0
    metrics = json.loads((generated / "metrics_val.json").read_text(encoding="utf-8"))
    assert metrics["n"] == 7
    out = capsys.readouterr().out
    assert f"fine   acc {metrics['fine']['accuracy']:.4f}" in out
    assert f"coarse acc {metrics['coarse']['accuracy']:.4f}" in out

    assert main(base + ["--split", "test-mixed"]) == 0
    rows = _read_csv(generated / PRIORITY_ROWS_NAME)
    assert len(rows) == 4
    assert {r["urgent"] for r in rows} == {"TA", "HP"}

    # 每类 4 个包时测试集为空
    assert main(base + ["--split", "test"]) == 2
    assert main(base + ["--split", "holdout"]) == 2


def test_eval_dimension_mismatch(generated, tiny_config, tmp_path):
    checkpoint = tmp_path / "wide.hmp"
    save_checkpoint(init_params(9, 2, seed=0), checkpoint)
    assert main(["eval", "--config", str(tiny_config), "--out", str(generated), "--checkpoint", str(checkpoint),
                 "--split", "val"]) == 2


def test_eval_corrupt_checkpoint(generated, tiny_config, tmp_path):
    checkpoint = tmp_path / "broken.hmp"
    checkpoint.write_bytes(b"NOPE")
    assert main(["eval", "--config", str(tiny_config), "--out", str(generated), "--checkpoint", str(checkpoint),
                 "--split", "val"]) == 3


def test_eval_checkpoint_cut_between_tensors(generated, tiny_config, tmp_path):
    full = tmp_path / "full.hmp"
    save_checkpoint(init_params(6, 2, seed=0), full)
    checkpoint = tmp_path / "cut.hmp"
    checkpoint.write_bytes(full.read_bytes()[:12 + 2 + len("coarse.V") + 8 + 6 * 2 * 8])
    assert main(["eval", "--config", str(tiny_config), "--out", str(generated), "--checkpoint", str(checkpoint),
                 "--split", "val"]) == 3


# ---------- remix-prob ----------

def test_remix_prob_single_cell(tmp_path):
    assert main(["remix-prob", "--n", "100", "--alphas", "0.05", "--betas", "0.4", "--out", str(tmp_path)]) == 0
    rows = _read_csv(tmp_path / "remix_prob.csv")
    assert len(rows) == 1
    exact = 1 - Fraction(math.comb(95, 40), math.comb(100, 40))
    assert float(rows[0]["p_success"]) == pytest.approx(float(exact), abs=1e-12)
    summary = _read_csv(tmp_path / "remix_prob_summary.csv")
    assert summary[0]["feasible"] == "1" and summary[0]["low"] == "1"


def test_remix_prob_from_manifest(generated, tmp_path):
    out = tmp_path / "prob"
    assert main(["remix-prob", "--manifest", str(generated / MANIFEST_NAME), "--alphas", "0.1:0.3:0.1",
                 "--betas", "0.4,0.6", "--out", str(out)]) == 0
    rows = _read_csv(out / "remix_prob.csv")
    sizes = {int(r["n"]) for r in rows}
    assert sizes and all(8 <= n <= 12 for n in sizes)
    assert len(rows) == len(sizes) * 3 * 2


def test_remix_prob_usage_errors(tmp_path):
    assert main(["remix-prob", "--n", "100", "--alphas", "", "--betas", "0.4", "--out", str(tmp_path)]) == 2
    assert main(["remix-prob", "--alphas", "0.1", "--betas", "0.4", "--out", str(tmp_path)]) == 2
    assert main(["remix-prob", "--n", "0", "--alphas", "0.1", "--betas", "0.4", "--out", str(tmp_path)]) == 2


# ---------- ablate ----------

def test_ablate_summary(tmp_path, tiny_config):
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", str(tiny_config), "--out", str(out), "--epochs", "1", "--quiet",
                 "--seeds", "0,1", "--presets", "full,none"]) == 0
    assert (out / MANIFEST_NAME).exists()
    summary = _read_csv(out / ABLATION_SUMMARY_NAME)
    assert [r["config"] for r in summary] == ["full", "none"]
    assert all(r["runs"] == "2" for r in summary)
    assert (out / "none" / "seed_1" / CHECKPOINT_NAME).exists()


def test_ablate_unknown_preset(tmp_path, tiny_config):
    assert main(["ablate", "--config", str(tiny_config), "--out", str(tmp_path), "--presets", "half"]) == 2
