#!/usr/bin/env python3
"""
运行配置
一个 JSON 文档汇总各模块的配置；命令行参数覆盖文件中的值，合并后的有效配置写到输出目录
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from bag_data import GenConfig, MixedConfig
from errors import ConfigError
from remix import RemixConfig
from taxonomy import Taxonomy, taxonomy_from_dict
from trainer import AblationFlags, TrainerConfig

# 加载程序目录下的 .env
load_dotenv(Path(__file__).parent / ".env")

THREADS_ENV = "HIERMIL_THREADS"
SECTION_TYPES = {
    "gen": GenConfig,
    "mixed": MixedConfig,
    "remix": RemixConfig,
    "trainer": TrainerConfig,
    "ablation": AblationFlags,
}


@dataclass
class RunConfig:
    """一次运行的完整配置"""
    seed: int = 0
    out_dir: str = "runs/default"
    split_ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    taxonomy: Dict[str, Any] = field(default_factory=dict)     # fine_priority / coarse_priority 覆盖项
    gen: GenConfig = field(default_factory=GenConfig)
    mixed: MixedConfig = field(default_factory=MixedConfig)
    remix: RemixConfig = field(default_factory=RemixConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self):
        if int(self.seed) < 0:
            raise ConfigError(f"种子不能为负: {self.seed}")
        ratios = tuple(self.split_ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"划分比例必须是三个和为 1 的正数: {list(ratios)}")
        self.gen.validate()
        self.mixed.validate()
        self.remix.validate()
        self.trainer.validate()
        self.build_taxonomy()

    def build_taxonomy(self) -> Taxonomy:
        return taxonomy_from_dict(self.taxonomy)

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(asdict(self))


def _jsonable(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _apply_section(current, overrides: Dict[str, Any], section: str):
    """把 overrides 合并到某个配置 dataclass 上，未知键报错"""
    if not isinstance(overrides, dict):
        raise ConfigError(f"配置段 {section} 必须是 JSON 对象")
    known = {f.name for f in fields(current)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"配置段 {section} 含有未知键: {unknown}")
    try:
        return replace(current, **overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"配置段 {section} 无效: {e}")


def merge_config(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    按段合并覆盖项，返回新的配置

    顶层键: seed, out_dir, split_ratios, taxonomy, 以及 gen / mixed / remix / trainer / ablation 各段
    """
    unknown = sorted(set(overrides) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"未知的配置项: {unknown}")
    updates = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in SECTION_TYPES:
            updates[key] = _apply_section(getattr(config, key), value, key)
        elif key == "split_ratios":
            updates[key] = tuple(float(r) for r in value)
        elif key == "taxonomy":
            updates[key] = {**config.taxonomy, **value}
        else:
            updates[key] = value
    merged = replace(config, **updates)
    merged.validate()
    return merged


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """读取 JSON 配置文件；path 为空时返回默认配置"""
    config = RunConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 {path} 不是合法的 JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {path} 顶层必须是 JSON 对象")
    return merge_config(config, data)


def resolve_threads(default: int = 1) -> int:
    """评估并行线程数上限，取自环境变量 HIERMIL_THREADS"""
    raw = os.getenv(THREADS_ENV, "").strip()
    if not raw:
        return default
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} 必须是正整数: {raw!r}")
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} 必须是正整数: {raw!r}")
    return threads
