import json

import pytest

from config import THREADS_ENV, RunConfig, load_run_config, merge_config, resolve_threads
from errors import ConfigError
from hierloss import KLDirection
from remix import PartnerMode
from run_store import RunStore
from taxonomy import FineClass


def test_defaults_are_valid():
    config = load_run_config()
    config.validate()
    assert config.gen.alpha == 0.3
    assert config.remix.tau == 15.0
    assert config.trainer.lr == 1e-4


def test_merge_sections():
    config = merge_config(RunConfig(), {
        "seed": 3,
        "gen": {"dim": 8, "class_counts": {"TA": 5}},
        "remix": {"partner_mode": "uniform_class"},
        "trainer": {"kl_direction": "pred_to_target", "epochs": 2},
        "ablation": {"use_iha": False},
    })
    assert config.seed == 3
    assert config.gen.dim == 8 and config.gen.min_bag_size == 150
    assert config.remix.partner_mode is PartnerMode.UNIFORM_CLASS
    assert config.trainer.kl_direction is KLDirection.PRED_TO_TARGET
    assert not config.ablation.use_iha and config.ablation.use_uhd


def test_merge_does_not_mutate_original():
    base = RunConfig()
    merge_config(base, {"trainer": {"epochs": 2}})
    assert base.trainer.epochs == 50


@pytest.mark.parametrize("overrides", [
    {"learning_rate": 0.1},
    {"trainer": {"momentum": 0.9}},
    {"gen": {"alpha": 0.0}},
    {"remix": {"beta_min": 0.9}},
    {"trainer": "fast"},
    {"taxonomy": {"fine_priority": ["TA", "TA", "TVA", "TSA", "SSL", "HP", "IP"]}},
    {"seed": -1},
    {"split_ratios": [0.5, 0.5]},
    {"split_ratios": [0.7, 0.2, 0.2]},
    {"split_ratios": [1.0, 0.0, 0.0]},
])
def test_invalid_overrides(overrides):
    with pytest.raises(ConfigError):
        merge_config(RunConfig(), overrides)


def test_custom_priority(tmp_path):
    order = ["TA", "TVA", "TSA", "HP", "SSL", "IP", "LP"]
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"taxonomy": {"fine_priority": order}}), encoding="utf-8")
    taxonomy = load_run_config(path).build_taxonomy()
    assert [c.name for c in taxonomy.fine_priority] == order
    assert taxonomy.rank(FineClass.HP) < taxonomy.rank(FineClass.SSL)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(listed)


def test_effective_config_reloads_stably(tmp_path):
    config = merge_config(RunConfig(), {"trainer": {"epochs": 2}, "split_ratios": [0.6, 0.2, 0.2]})
    first = RunStore(tmp_path / "a").write_effective_config(config.to_dict())
    second = RunStore(tmp_path / "b").write_effective_config(load_run_config(first).to_dict())
    assert first.read_bytes() == second.read_bytes()
    data = json.loads(first.read_text(encoding="utf-8"))
    assert data["trainer"]["kl_direction"] == "target_to_pred"
    assert data["remix"]["partner_mode"] == "uniform_bag"
    assert data["split_ratios"] == [0.6, 0.2, 0.2]


def test_threads_from_environment(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert resolve_threads() == 4
    for bad in ("0", "many"):
        monkeypatch.setenv(THREADS_ENV, bad)
        with pytest.raises(ConfigError):
            resolve_threads()
