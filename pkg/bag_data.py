#!/usr/bin/env python3
"""
实例包数据模块
包含 Bag 数据模型、二进制包文件格式、分层划分，以及模拟单一/混合病变切片的合成数据生成器
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import BagSizeError, ConfigError, FormatError, InvalidArgumentError, StratificationError
from numkernel import as_tensor2
from taxonomy import (
    DEFAULT_PARENT_MAP, DEFAULT_TAXONOMY, NUM_COARSE, NUM_FINE,
    CoarseClass, FineClass, Subsite, Taxonomy, parse_fine_class, parse_subsite,
)

logger = logging.getLogger(__name__)

BAG_MAGIC = b"HMB1"
BAG_VERSION = 1
BAG_HEADER = struct.Struct("<4sHBBII")     # magic, version, label, subsite, n, d
BAG_SUFFIX = ".hmb"
MANIFEST_NAME = "manifest.jsonl"

# 随机流标签，用于从 (seed, 标签, 序号) 派生互不相关的子流
STREAM_CENTROIDS = 0
STREAM_PURE = 1
STREAM_MIXED = 2
STREAM_SPLIT = 3


class SplitTag(Enum):
    """数据划分标签"""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    TEST_MIXED = "test-mixed"


@dataclass(frozen=True)
class MixtureInfo:
    """混合病变包的构成"""
    urgent: FineClass           # 优先级更高的成分（即标签）
    other: FineClass
    urgent_count: int
    other_count: int

    def to_dict(self) -> Dict[str, object]:
        return {
            "urgent": self.urgent.name,
            "other": self.other.name,
            "urgent_count": self.urgent_count,
            "other_count": self.other_count,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "MixtureInfo":
        return cls(
            urgent=parse_fine_class(data["urgent"]),
            other=parse_fine_class(data["other"]),
            urgent_count=int(data["urgent_count"]),
            other_count=int(data["other_count"]),
        )


@dataclass
class Bag:
    """一个实例包：n 个 d 维实例特征、细类标签与取材部位"""
    id: str
    features: np.ndarray
    label: FineClass
    subsite: Subsite = Subsite.UNKNOWN
    mixture: Optional[MixtureInfo] = None

    def __post_init__(self):
        self.features = as_tensor2(self.features, name=f"bag {self.id}")
        if self.features.shape[0] < 1:
            raise InvalidArgumentError(f"包 {self.id} 至少需要一个实例")
        self.label = parse_fine_class(self.label)
        self.subsite = parse_subsite(self.subsite)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class SoftLabel:
    """两个层级上的目标分布"""
    coarse: np.ndarray
    fine: np.ndarray

    def __post_init__(self):
        self.coarse = np.asarray(self.coarse, dtype=np.float64)
        self.fine = np.asarray(self.fine, dtype=np.float64)
        for name, vec, size in (("coarse", self.coarse, NUM_COARSE), ("fine", self.fine, NUM_FINE)):
            if vec.shape != (size,):
                raise InvalidArgumentError(f"{name} 目标长度应为 {size}, 实际 {vec.shape}")
            if np.any(vec < 0) or abs(float(np.sum(vec)) - 1.0) > 1e-9:
                raise InvalidArgumentError(f"{name} 目标不在概率单纯形上: {vec}")

    @classmethod
    def one_hot(cls, label: FineClass, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> "SoftLabel":
        fine = np.zeros(NUM_FINE)
        fine[int(label)] = 1.0
        coarse = np.zeros(NUM_COARSE)
        coarse[int(taxonomy.parent(label))] = 1.0
        return cls(coarse=coarse, fine=fine)


@dataclass(frozen=True)
class Provenance:
    """训练样本来源：原始包或由两个包重混合成"""
    kind: str = "pure"                  # pure | remixed
    source_i: Optional[str] = None
    source_j: Optional[str] = None
    beta: Optional[float] = None

    @classmethod
    def pure(cls, bag_id: str) -> "Provenance":
        return cls(kind="pure", source_i=bag_id)

    @classmethod
    def remixed(cls, id_i: str, id_j: str, beta: float) -> "Provenance":
        return cls(kind="remixed", source_i=id_i, source_j=id_j, beta=float(beta))

    def to_dict(self) -> Dict[str, object]:
        if self.kind == "pure":
            return {"kind": "pure", "id": self.source_i}
        return {"kind": "remixed", "i": self.source_i, "j": self.source_j, "beta": self.beta}


@dataclass
class TrainSample:
    bag: Bag
    targets: SoftLabel
    provenance: Provenance

    def __post_init__(self):
        if self.provenance.kind == "pure":
            fine_idx = int(np.argmax(self.targets.fine))
            coarse_idx = int(np.argmax(self.targets.coarse))
            one_hot = (self.targets.fine[fine_idx] == 1.0 and self.targets.coarse[coarse_idx] == 1.0)
            if not one_hot or fine_idx != int(self.bag.label) \
                    or DEFAULT_PARENT_MAP[fine_idx] is not CoarseClass(coarse_idx):
                raise InvalidArgumentError(f"原始样本 {self.bag.id} 的目标必须是与标签一致的 one-hot")

    @classmethod
    def pure(cls, bag: Bag, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> "TrainSample":
        return cls(bag=bag, targets=SoftLabel.one_hot(bag.label, taxonomy), provenance=Provenance.pure(bag.id))


@dataclass
class Dataset:
    """包的集合及其划分标签"""
    bags: List[Bag]
    dim: int
    splits: Dict[str, SplitTag] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for bag in self.bags:
            if bag.id in seen:
                raise InvalidArgumentError(f"包 id 重复: {bag.id}")
            seen.add(bag.id)
            if bag.dim != self.dim:
                raise InvalidArgumentError(f"包 {bag.id} 特征宽度 {bag.dim} 与数据集维度 {self.dim} 不一致")
        self._index = {bag.id: bag for bag in self.bags}

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self) -> Iterator[Bag]:
        return iter(self.bags)

    def get(self, bag_id: str) -> Bag:
        return self._index[bag_id]

    def subset(self, tag: SplitTag) -> List[Bag]:
        """按原始顺序返回某个划分中的包"""
        tag = SplitTag(tag)
        return [bag for bag in self.bags if self.splits.get(bag.id) is tag]

    def tagged(self, tag: SplitTag) -> "Dataset":
        """所有包打上同一个划分标签"""
        return Dataset(list(self.bags), self.dim, {bag.id: SplitTag(tag) for bag in self.bags})

    def merged(self, other: "Dataset") -> "Dataset":
        if other.dim != self.dim:
            raise InvalidArgumentError(f"数据集维度不一致: {self.dim} vs {other.dim}")
        return Dataset(self.bags + other.bags, self.dim, {**self.splits, **other.splits})

    def class_counts(self, tag: Optional[SplitTag] = None) -> Dict[FineClass, int]:
        bags = self.bags if tag is None else self.subset(tag)
        counts = {c: 0 for c in FineClass}
        for bag in bags:
            counts[bag.label] += 1
        return counts

    def class_table(self, taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> List[Dict[str, object]]:
        """按粗类分组的每类、每个划分的包数"""
        rows = []
        tags = [t for t in SplitTag if any(v is t for v in self.splits.values())]
        for coarse in CoarseClass:
            for fine in sorted(taxonomy.children(coarse)):
                row = {"coarse": coarse.display_name, "fine": fine.name}
                for tag in tags:
                    row[tag.value] = sum(1 for b in self.subset(tag) if b.label is fine)
                row["total"] = sum(1 for b in self.bags if b.label is fine)
                rows.append(row)
        return rows


# ---------- 合成数据生成 ----------

def _default_class_counts() -> Dict[str, int]:
    return {c.name: 20 for c in FineClass}


@dataclass
class GenConfig:
    """合成数据生成配置"""
    class_counts: Dict[str, int] = field(default_factory=_default_class_counts)
    dim: int = 32                   # 特征维度 d
    min_bag_size: int = 150         # 包大小下限（含）
    max_bag_size: int = 300         # 包大小上限（含）
    alpha: float = 0.3              # 每个包中有症状实例的比例
    separation: float = 6.0         # 类中心到背景中心的距离（以 sigma 计）
    sigma: float = 1.0              # 各簇的标准差
    subsite_correlation: float = 0.8  # HP→Distal / SSL→Proximal 的概率

    def validate(self):
        if not self.class_counts or sum(int(v) for v in self.class_counts.values()) <= 0:
            raise ConfigError("类别数量为空")
        for name, count in self.class_counts.items():
            parse_fine_class(name)
            if int(count) < 0:
                raise ConfigError(f"类别 {name} 的数量不能为负: {count}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha 必须在 (0, 1] 内: {self.alpha}")
        if self.dim < 2:
            raise ConfigError(f"特征维度至少为 2: {self.dim}")
        if self.min_bag_size < 1 or self.max_bag_size < self.min_bag_size:
            raise ConfigError(f"包大小范围无效: [{self.min_bag_size}, {self.max_bag_size}]")
        if self.sigma <= 0 or self.separation < 0:
            raise ConfigError("sigma 必须为正且 separation 非负")
        if not (0.0 <= self.subsite_correlation <= 1.0):
            raise ConfigError(f"subsite_correlation 必须在 [0, 1] 内: {self.subsite_correlation}")

    def counts(self) -> Dict[FineClass, int]:
        parsed = {c: 0 for c in FineClass}
        for name, count in self.class_counts.items():
            parsed[parse_fine_class(name)] = int(count)
        return parsed


@dataclass
class MixedConfig:
    """混合病变测试集配置"""
    pairs: Optional[List[Tuple[str, str]]] = None   # None 表示所有不同细类的无序对
    bags_per_pair: int = 5
    urgent_fraction_min: float = 0.1    # 紧急成分占包内实例的比例下限
    urgent_fraction_max: float = 0.5

    def validate(self):
        if self.bags_per_pair < 1:
            raise ConfigError(f"bags_per_pair 至少为 1: {self.bags_per_pair}")
        if not (0.0 < self.urgent_fraction_min <= self.urgent_fraction_max <= 0.5):
            raise ConfigError(
                f"紧急成分比例范围无效: [{self.urgent_fraction_min}, {self.urgent_fraction_max}]")
        for a, b in self.resolved_pairs():
            if a is b:
                raise ConfigError(f"混合对的两个类别不能相同: {a.name}")

    def resolved_pairs(self) -> List[Tuple[FineClass, FineClass]]:
        if self.pairs is None:
            return list(combinations(list(FineClass), 2))
        return [(parse_fine_class(a), parse_fine_class(b)) for a, b in self.pairs]


def create_gen_config(**kwargs) -> GenConfig:
    """创建生成配置的便捷函数"""
    config = GenConfig()
    for key, value in kwargs.items():
        if not hasattr(config, key):
            raise ConfigError(f"未知的生成配置项: {key}")
        setattr(config, key, value)
    return config


def _stream(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


def class_centroids(config: GenConfig, seed: int) -> np.ndarray:
    """每个细类症状簇的中心 (7×d)，背景簇中心为原点"""
    rng = _stream(seed, STREAM_CENTROIDS)
    raw = rng.standard_normal((config.dim, NUM_FINE))
    if config.dim >= NUM_FINE:
        directions, _ = np.linalg.qr(raw)
    else:
        directions = raw / np.linalg.norm(raw, axis=0, keepdims=True)
    return (directions.T * config.separation * config.sigma).astype(np.float64)


def _draw_subsite(label: FineClass, rng: np.random.Generator, correlation: float) -> Subsite:
    # 仅 HP / SSL 的取材部位携带信息
    u = rng.random()
    if label is FineClass.SSL:
        return Subsite.PROXIMAL if u < correlation else Subsite.UNKNOWN
    if label is FineClass.HP:
        return Subsite.DISTAL if u < correlation else Subsite.UNKNOWN
    return Subsite.UNKNOWN


def _symptomatic_count(alpha: float, n: int) -> int:
    return min(n, max(1, math.ceil(alpha * n - 1e-9)))


def mixed_counts(fraction: float, alpha: float, n: int) -> Tuple[int, int]:
    """
    混合包中两种成分的实例数 (k_urgent, k_other)

    k_urgent = round(fraction·n)，限制在 [1, ⌊n/2⌋]；
    k_other 取 ⌈α·n⌉ 与 k_urgent+1 中的较大者，再截到剩余实例数，紧急成分因此始终不占多数
    """
    if n < 2:
        raise BagSizeError(f"混合包至少需要 2 个实例: {n}")
    k_urgent = min(n // 2, max(1, math.floor(fraction * n + 0.5)))
    k_other = min(n - k_urgent, max(_symptomatic_count(alpha, n), k_urgent + 1))
    return k_urgent, k_other


def _to_float32_grid(features: np.ndarray) -> np.ndarray:
    # 生成即落在 float32 网格上，内存中的包与磁盘上的包完全一致
    return features.astype(np.float32).astype(np.float64)


def _assemble(rng: np.random.Generator, blocks: Sequence[np.ndarray]) -> np.ndarray:
    stacked = np.concatenate(blocks, axis=0)
    return _to_float32_grid(stacked[rng.permutation(stacked.shape[0])])


def generate_synthetic(config: GenConfig, seed: int) -> Dataset:
    """
    生成单一病变的合成数据集

    每个包含 ⌈α·n⌉ 个来自类别高斯簇的有症状实例，其余来自共享背景簇；
    每个包使用由 (seed, 包序号) 派生的独立随机流
    """
    config.validate()
    centroids = class_centroids(config, seed)
    bags = []
    index = 0
    for label, count in config.counts().items():
        for k in range(count):
            rng = _stream(seed, STREAM_PURE, index)
            index += 1
            n = int(rng.integers(config.min_bag_size, config.max_bag_size + 1))
            k_sym = _symptomatic_count(config.alpha, n)
            symptomatic = centroids[int(label)] + config.sigma * rng.standard_normal((k_sym, config.dim))
            background = config.sigma * rng.standard_normal((n - k_sym, config.dim))
            bags.append(Bag(
                id=f"{label.name}_{k:04d}",
                features=_assemble(rng, [symptomatic, background]),
                label=label,
                subsite=_draw_subsite(label, rng, config.subsite_correlation),
            ))
    logger.info("生成 %d 个合成包 (d=%d, alpha=%.3f)", len(bags), config.dim, config.alpha)
    return Dataset(bags, config.dim)


def generate_mixed_test(config: GenConfig, mixed: MixedConfig, seed: int,
                        taxonomy: Taxonomy = DEFAULT_TAXONOMY) -> Dataset:
    """
    生成混合病变测试集

    每个包含两个细类的有症状实例，标签为优先级更高的那个；
    紧急成分占整个包的比例取自 [urgent_fraction_min, urgent_fraction_max]，
    且不多于另一成分（见 mixed_counts）
    """
    config.validate()
    mixed.validate()
    centroids = class_centroids(config, seed)
    bags = []
    index = 0
    for a, b in mixed.resolved_pairs():
        urgent, other = (a, b) if taxonomy.rank(a) < taxonomy.rank(b) else (b, a)
        for k in range(mixed.bags_per_pair):
            rng = _stream(seed, STREAM_MIXED, index)
            index += 1
            n = int(rng.integers(max(config.min_bag_size, 2), max(config.max_bag_size, 2) + 1))
            fraction = rng.uniform(mixed.urgent_fraction_min, mixed.urgent_fraction_max)
            k_urgent, k_other = mixed_counts(fraction, config.alpha, n)
            blocks = [
                centroids[int(urgent)] + config.sigma * rng.standard_normal((k_urgent, config.dim)),
                centroids[int(other)] + config.sigma * rng.standard_normal((k_other, config.dim)),
                config.sigma * rng.standard_normal((n - k_urgent - k_other, config.dim)),
            ]
            bags.append(Bag(
                id=f"mix_{urgent.name}_{other.name}_{k:03d}",
                features=_assemble(rng, blocks),
                label=urgent,
                subsite=_draw_subsite(urgent, rng, config.subsite_correlation),
                mixture=MixtureInfo(urgent, other, k_urgent, k_other),
            ))
    logger.info("生成 %d 个混合病变包", len(bags))
    return Dataset(bags, config.dim).tagged(SplitTag.TEST_MIXED)


# ---------- 数据划分 ----------

def largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    """
    按比例把 total 分成整数份：先取下整，余数按大小依次补 1，余数相同时靠前的划分优先
    """
    exact = [total * r for r in ratios]
    counts = [math.floor(x + 1e-9) for x in exact]
    remainders = [round(x - c, 9) for x, c in zip(exact, counts)]
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, ratios: Tuple[float, float, float] = (0.7, 0.15, 0.15),
          seed: int = 0) -> Dataset:
    """按细类分层划分为 train / val / test"""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"划分比例必须为 3 个正数且和为 1: {ratios}")
    tags = (SplitTag.TRAIN, SplitTag.VAL, SplitTag.TEST)
    assignment: Dict[str, SplitTag] = {}
    for label in FineClass:
        members = [bag.id for bag in dataset.bags if bag.label is label]
        if not members:
            continue
        if len(members) < 3:
            raise StratificationError(f"类别 {label.name} 只有 {len(members)} 个包，无法分层划分")
        rng = _stream(seed, STREAM_SPLIT, int(label))
        order = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for tag, count in zip(tags, largest_remainder(len(members), ratios)):
            for bag_id in order[start:start + count]:
                assignment[bag_id] = tag
            start += count
    return Dataset(list(dataset.bags), dataset.dim, assignment)


# ---------- 包文件读写 ----------

def write_bag(bag: Bag, path: Path):
    """写入二进制包文件（特征以 float32 存储）"""
    path = Path(path)
    n, d = bag.features.shape
    if n > 0xFFFFFFFF or d > 0xFFFFFFFF:
        raise InvalidArgumentError(f"包 {bag.id} 尺寸超出 u32 范围: {n}×{d}")
    header = BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, int(bag.label), int(bag.subsite), n, d)
    payload = np.ascontiguousarray(bag.features, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def decode_bag(raw: bytes, bag_id: str, source: Optional[str] = None) -> Bag:
    """解析包文件字节内容，出错时报告字节偏移"""
    if len(raw) < 4 or raw[:4] != BAG_MAGIC:
        raise FormatError(f"魔数错误: {raw[:4]!r}", 0, source)
    if len(raw) < BAG_HEADER.size:
        raise FormatError(f"文件头被截断 ({len(raw)} 字节)", len(raw), source)
    _, version, label, subsite, n, d = BAG_HEADER.unpack_from(raw, 0)
    if version != BAG_VERSION:
        raise FormatError(f"不支持的版本: {version}", 4, source)
    if label >= len(FineClass):
        raise FormatError(f"未知的类别编码: {label}", 6, source)
    if subsite >= len(Subsite):
        raise FormatError(f"未知的取材部位编码: {subsite}", 7, source)
    if n < 1 or d < 1:
        raise FormatError(f"包尺寸无效: n={n}, d={d}", 8, source)
    if n * d > 0xFFFFFFFF:
        raise FormatError(f"n·d 溢出: {n}×{d}", 8, source)
    expected = n * d * 4
    payload = raw[BAG_HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"数据被截断: 需要 {expected} 字节, 实际 {len(payload)} 字节", len(raw), source)
    if len(payload) > expected:
        raise FormatError(f"数据末尾有 {len(payload) - expected} 字节多余内容",
                          BAG_HEADER.size + expected, source)
    features = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float64)
    return Bag(id=bag_id, features=features, label=FineClass(label), subsite=Subsite(subsite))


def read_bag(path: Path, bag_id: Optional[str] = None) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id or path.stem, str(path))


# ---------- 清单 ----------

def write_manifest(dataset: Dataset, out_dir: Path) -> Path:
    """写出所有包文件和 manifest.jsonl（每行一个 JSON 对象）"""
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as f:
        for bag in dataset.bags:
            rel = Path("bags") / f"{bag.id}{BAG_SUFFIX}"
            write_bag(bag, out_dir / rel)
            tag = dataset.splits.get(bag.id)
            entry = {
                "id": bag.id,
                "path": rel.as_posix(),
                "label": bag.label.name,
                "subsite": bag.subsite.name,
                "split": tag.value if tag else None,
            }
            if bag.mixture is not None:
                entry["mixture"] = bag.mixture.to_dict()
            f.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return manifest_path


def read_manifest(manifest_path: Path) -> Dataset:
    """读取清单及其引用的所有包文件"""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"清单不存在: {manifest_path}")
    root = manifest_path.parent
    bags, splits = [], {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{manifest_path}:{line_no} 不是合法的 JSON: {e}")
            bag = read_bag(root / entry["path"], entry["id"])
            if bag.label is not parse_fine_class(entry["label"]) or bag.subsite is not parse_subsite(entry["subsite"]):
                raise ConfigError(f"{manifest_path}:{line_no} 清单与包文件 {entry['path']} 的标签不一致")
            if entry.get("mixture"):
                bag.mixture = MixtureInfo.from_dict(entry["mixture"])
            bags.append(bag)
            if entry.get("split"):
                splits[bag.id] = SplitTag(entry["split"])
    if not bags:
        raise ConfigError(f"清单为空: {manifest_path}")
    return Dataset(bags, bags[0].dim, splits)
