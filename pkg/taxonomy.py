#!/usr/bin/env python3
"""
类别层级定义
两级层级（3个粗类 / 7个细类）、细类到粗类的父映射，以及同一层级内的诊断优先级
"""

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, InvalidArgumentError


class FineClass(IntEnum):
    """细粒度类别（H=2），整数编码固定"""
    TA = 0
    TVA = 1
    TSA = 2
    HP = 3
    SSL = 4
    IP = 5
    LP = 6


class CoarseClass(IntEnum):
    """粗粒度类别（H=1）"""
    ADENOMA = 0
    SERRATED = 1
    OTHERS = 2

    @property
    def display_name(self) -> str:
        return self.name.capitalize()


class Subsite(IntEnum):
    """取材部位"""
    PROXIMAL = 0
    DISTAL = 1
    UNKNOWN = 2

    @property
    def one_hot(self) -> np.ndarray:
        vec = np.zeros(len(Subsite), dtype=np.float64)
        vec[int(self)] = 1.0
        return vec


class HierarchyLevel(Enum):
    """层级"""
    COARSE = "coarse"   # H=1
    FINE = "fine"       # H=2

    @property
    def classes(self):
        return CoarseClass if self is HierarchyLevel.COARSE else FineClass


NUM_COARSE = len(CoarseClass)
NUM_FINE = len(FineClass)

DEFAULT_PARENT_MAP: Tuple[CoarseClass, ...] = (
    CoarseClass.ADENOMA,    # TA
    CoarseClass.ADENOMA,    # TVA
    CoarseClass.ADENOMA,    # TSA
    CoarseClass.SERRATED,   # HP
    CoarseClass.SERRATED,   # SSL
    CoarseClass.OTHERS,     # IP
    CoarseClass.OTHERS,     # LP
)

# 从最紧急到最不紧急；SSL 排在 HP 之前
DEFAULT_FINE_PRIORITY: Tuple[FineClass, ...] = (
    FineClass.TA, FineClass.TVA, FineClass.TSA,
    FineClass.SSL, FineClass.HP,
    FineClass.IP, FineClass.LP,
)
DEFAULT_COARSE_PRIORITY: Tuple[CoarseClass, ...] = (
    CoarseClass.ADENOMA, CoarseClass.SERRATED, CoarseClass.OTHERS,
)

ClassAtLevel = Union[FineClass, CoarseClass]


def parse_fine_class(value: Union[str, int, FineClass]) -> FineClass:
    """按名称或编码解析细类"""
    if isinstance(value, FineClass):
        return value
    try:
        if isinstance(value, str):
            return FineClass[value.strip().upper()]
        return FineClass(int(value))
    except (KeyError, ValueError):
        raise ConfigError(f"未知细类: {value!r}")


def parse_coarse_class(value: Union[str, int, CoarseClass]) -> CoarseClass:
    if isinstance(value, CoarseClass):
        return value
    try:
        if isinstance(value, str):
            return CoarseClass[value.strip().upper()]
        return CoarseClass(int(value))
    except (KeyError, ValueError):
        raise ConfigError(f"未知粗类: {value!r}")


def parse_subsite(value: Union[str, int, Subsite]) -> Subsite:
    if isinstance(value, Subsite):
        return value
    try:
        if isinstance(value, str):
            return Subsite[value.strip().upper()]
        return Subsite(int(value))
    except (KeyError, ValueError):
        raise ConfigError(f"未知取材部位: {value!r}")


@dataclass(frozen=True)
class Taxonomy:
    """
    两级类别层级

    fine_priority / coarse_priority 以"最紧急在前"的顺序给出，rank 即下标
    构造后不可变，可跨线程共享
    """
    fine_priority: Tuple[FineClass, ...] = DEFAULT_FINE_PRIORITY
    coarse_priority: Tuple[CoarseClass, ...] = DEFAULT_COARSE_PRIORITY
    parent_map: Tuple[CoarseClass, ...] = DEFAULT_PARENT_MAP
    _fine_rank: Dict[FineClass, int] = field(init=False, repr=False, compare=False)
    _coarse_rank: Dict[CoarseClass, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        fine = tuple(parse_fine_class(c) for c in self.fine_priority)
        coarse = tuple(parse_coarse_class(c) for c in self.coarse_priority)
        parents = tuple(parse_coarse_class(c) for c in self.parent_map)
        object.__setattr__(self, "fine_priority", fine)
        object.__setattr__(self, "coarse_priority", coarse)
        object.__setattr__(self, "parent_map", parents)

        if len(parents) != NUM_FINE:
            raise ConfigError(f"父映射必须覆盖全部 {NUM_FINE} 个细类")
        if sorted(fine) != list(FineClass):
            raise ConfigError(f"细类优先级必须是全部细类的一个排列: {[c.name for c in fine]}")
        if sorted(coarse) != list(CoarseClass):
            raise ConfigError(f"粗类优先级必须是全部粗类的一个排列: {[c.name for c in coarse]}")
        for parent in CoarseClass:
            if parent not in parents:
                raise ConfigError(f"粗类 {parent.display_name} 没有子类")

        fine_rank = {c: i for i, c in enumerate(fine)}
        coarse_rank = {c: i for i, c in enumerate(coarse)}
        if not (coarse_rank[CoarseClass.ADENOMA] < coarse_rank[CoarseClass.SERRATED]
                < coarse_rank[CoarseClass.OTHERS]):
            raise ConfigError("粗类优先级必须为 Adenoma > Serrated > Others")

        # 细类优先级须与父类优先级一致
        for a in FineClass:
            for b in FineClass:
                if coarse_rank[parents[a]] < coarse_rank[parents[b]] and not fine_rank[a] < fine_rank[b]:
                    raise ConfigError(
                        f"细类优先级与粗类优先级不一致: {a.name} 应排在 {b.name} 之前")

        object.__setattr__(self, "_fine_rank", fine_rank)
        object.__setattr__(self, "_coarse_rank", coarse_rank)

    def parent(self, c: FineClass) -> CoarseClass:
        return self.parent_map[FineClass(c)]

    def children(self, c: CoarseClass) -> FrozenSet[FineClass]:
        c = CoarseClass(c)
        return frozenset(f for f in FineClass if self.parent_map[f] is c)

    def rank(self, c: ClassAtLevel) -> int:
        if isinstance(c, FineClass):
            return self._fine_rank[c]
        if isinstance(c, CoarseClass):
            return self._coarse_rank[c]
        raise InvalidArgumentError(f"无法确定 {c!r} 所属层级")

    def higher_priority(self, a: ClassAtLevel, b: ClassAtLevel, level: HierarchyLevel) -> bool:
        """a 的优先级是否严格高于 b（rank 更小）"""
        level = HierarchyLevel(level)
        expected = level.classes
        if not isinstance(a, expected) or not isinstance(b, expected):
            raise InvalidArgumentError(
                f"优先级比较要求同一层级 ({level.value}): {a!r} vs {b!r}")
        return self.rank(a) < self.rank(b)

    def lower_priority_classes(self, c: FineClass) -> List[FineClass]:
        """所有优先级严格低于 c 的细类"""
        return [f for f in self.fine_priority if self._fine_rank[f] > self._fine_rank[c]]

    @property
    def aggregation_matrix(self) -> np.ndarray:
        """7×3 指示矩阵：p_fine @ M 得到按父类求和的粗类分布"""
        m = np.zeros((NUM_FINE, NUM_COARSE), dtype=np.float64)
        for f in FineClass:
            m[int(f), int(self.parent_map[f])] = 1.0
        return m

    @property
    def expansion_matrix(self) -> np.ndarray:
        """3×7 矩阵：p_coarse @ M 得到每个细类对应父类的概率"""
        return self.aggregation_matrix.T.copy()

    def is_adenoma(self, c: FineClass) -> bool:
        return self.parent(c) is CoarseClass.ADENOMA

    def to_dict(self) -> Dict[str, List[str]]:
        return {
            "fine_priority": [c.name for c in self.fine_priority],
            "coarse_priority": [c.name for c in self.coarse_priority],
        }


def create_taxonomy(fine_priority: Iterable[Union[str, int]] = None,
                    coarse_priority: Iterable[Union[str, int]] = None) -> Taxonomy:
    """按配置覆盖项创建层级（父映射固定）"""
    kwargs = {}
    if fine_priority is not None:
        kwargs["fine_priority"] = tuple(parse_fine_class(c) for c in fine_priority)
    if coarse_priority is not None:
        kwargs["coarse_priority"] = tuple(parse_coarse_class(c) for c in coarse_priority)
    return Taxonomy(**kwargs)


def taxonomy_from_dict(data: Dict[str, Sequence]) -> Taxonomy:
    unknown = set(data or {}) - {"fine_priority", "coarse_priority"}
    if unknown:
        raise ConfigError(f"未知的层级配置项: {sorted(unknown)}")
    data = data or {}
    return create_taxonomy(data.get("fine_priority"), data.get("coarse_priority"))


DEFAULT_TAXONOMY = Taxonomy()
