#!/usr/bin/env python3
"""
层级损失函数
L = L_CE（两层联合交叉熵）+ L_IHA（层间对齐，JS 散度）+ L_UHD（上层依赖的概率调整 + KL）

所有函数既接受 numpy 数组也接受梯度带节点；log 内部概率下限截断为 1e-12，归一化处不截断
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional

import numpy as np

import numkernel as nk
from bag_data import SoftLabel
from errors import ConfigError, NumericError, ShapeError
from mil_model import ProbPair
from numkernel import LOG_FLOOR, Operand
from taxonomy import NUM_COARSE, NUM_FINE, Taxonomy

LABEL_CLAMP = 1e-8      # 字面方向 KL(p̃‖y) 下对标签的截断


class KLDirection(Enum):
    """UHD 项中 KL 的方向"""
    TARGET_TO_PRED = "target_to_pred"   # KL(y ‖ p̃)，默认
    PRED_TO_TARGET = "pred_to_target"   # KL(p̃ ‖ y)，标签截断到 1e-8


@dataclass
class LossSettings:
    """损失开关（消融用）"""
    use_iha: bool = True
    use_uhd: bool = True
    kl_direction: KLDirection = KLDirection.TARGET_TO_PRED

    def __post_init__(self):
        try:
            self.kl_direction = KLDirection(self.kl_direction)
        except ValueError:
            raise ConfigError(f"未知的 KL 方向: {self.kl_direction}")


@dataclass
class LossBreakdown:
    """三项损失及其和"""
    ce: float
    iha: float
    uhd: float
    total: float
    node: Optional[Operand] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict[str, float]:
        return {"ce": self.ce, "iha": self.iha, "uhd": self.uhd, "total": self.total}

    @classmethod
    def mean(cls, items: Iterable["LossBreakdown"]) -> "LossBreakdown":
        """与顺序无关的均值（math.fsum）"""
        items = list(items)
        if not items:
            return cls(0.0, 0.0, 0.0, 0.0)
        n = len(items)
        ce = math.fsum(x.ce for x in items) / n
        iha = math.fsum(x.iha for x in items) / n
        uhd = math.fsum(x.uhd for x in items) / n
        return cls(ce, iha, uhd, ce + iha + uhd)


def _check_len(x: Operand, size: int, name: str):
    shape = nk.value_of(x).shape
    if shape != (size,):
        raise ShapeError(f"{name} 长度应为 {size}, 实际 {shape}")


def _kl(p: Operand, q: Operand) -> Operand:
    """KL(p‖q)，0·log 0 = 0"""
    return nk.reduce_sum(nk.sub(nk.xlogy(p, p), nk.xlogy(p, q)))


def cross_entropy_hier(probs: ProbPair, targets: SoftLabel) -> Operand:
    """−½ Σ_h Σ_c y_c^h log p̂_c^h"""
    _check_len(probs.coarse, NUM_COARSE, "粗类概率")
    _check_len(probs.fine, NUM_FINE, "细类概率")
    coarse = nk.reduce_sum(nk.xlogy(targets.coarse, probs.coarse, LOG_FLOOR))
    fine = nk.reduce_sum(nk.xlogy(targets.fine, probs.fine, LOG_FLOOR))
    return nk.mul(-0.5, nk.add(coarse, fine))


def aggregate_fine_to_coarse(p_fine: Operand, taxonomy: Taxonomy) -> Operand:
    """ṗ_c = Σ_{c'⊂c} p̂_{c'}"""
    _check_len(p_fine, NUM_FINE, "细类概率")
    return nk.matmul(p_fine, taxonomy.aggregation_matrix)


def iha_loss(p_coarse: Operand, p_fine: Operand, taxonomy: Taxonomy) -> Operand:
    """JS(p̂^{H=1} ‖ ṗ^{H=1})，取值在 [0, ln 2]"""
    _check_len(p_coarse, NUM_COARSE, "粗类概率")
    aggregated = aggregate_fine_to_coarse(p_fine, taxonomy)
    mean = nk.mul(0.5, nk.add(p_coarse, aggregated))
    return nk.mul(0.5, nk.add(_kl(p_coarse, mean), _kl(aggregated, mean)))


def uhd_adjust(p_fine: Operand, p_coarse: Operand, taxonomy: Taxonomy) -> Operand:
    """p̃_c ∝ p̂_c^{H=2} · p̂_{parent(c)}^{H=1}，L1 归一化"""
    _check_len(p_fine, NUM_FINE, "细类概率")
    _check_len(p_coarse, NUM_COARSE, "粗类概率")
    product = nk.mul(p_fine, nk.matmul(p_coarse, taxonomy.expansion_matrix))
    norm = nk.reduce_sum(product)
    if not float(nk.value_of(norm)) > 0.0:
        raise NumericError("UHD 调整后的概率全为零，无法归一化")
    return nk.div(product, norm)


def uhd_loss(p_adjusted: Operand, target_fine: np.ndarray,
             direction: KLDirection = KLDirection.TARGET_TO_PRED) -> Operand:
    """调整后细类分布与目标之间的 KL"""
    _check_len(p_adjusted, NUM_FINE, "调整后概率")
    target = np.asarray(target_fine, dtype=np.float64)
    if target.shape != (NUM_FINE,):
        raise ShapeError(f"细类目标长度应为 {NUM_FINE}, 实际 {target.shape}")
    if KLDirection(direction) is KLDirection.TARGET_TO_PRED:
        return _kl(target, p_adjusted)
    clamped = np.maximum(target, LABEL_CLAMP)
    clamped = clamped / clamped.sum()
    return _kl(p_adjusted, clamped)


def _non_negative(x: Operand) -> float:
    """舍入造成的微小负值截为 0；NaN 原样保留以便上层发现"""
    value = float(nk.value_of(x))
    return 0.0 if value < 0.0 else value


def total_loss(probs: ProbPair, targets: SoftLabel, taxonomy: Taxonomy,
               settings: Optional[LossSettings] = None) -> LossBreakdown:
    """
    在同一个 ProbPair 上计算三项损失并求和；被关闭的项恰为 0 且不进入梯度
    返回值的 node 为可回传的总损失节点
    """
    settings = settings or LossSettings()
    ce = cross_entropy_hier(probs, targets)
    node = ce
    iha_value = uhd_value = 0.0
    if settings.use_iha:
        iha = iha_loss(probs.coarse, probs.fine, taxonomy)
        iha_value = _non_negative(iha)
        node = nk.add(node, iha)
    if settings.use_uhd:
        adjusted = uhd_adjust(probs.fine, probs.coarse, taxonomy)
        uhd = uhd_loss(adjusted, targets.fine, settings.kl_direction)
        uhd_value = _non_negative(uhd)
        node = nk.add(node, uhd)
    ce_value = _non_negative(ce)
    return LossBreakdown(ce_value, iha_value, uhd_value, ce_value + iha_value + uhd_value, node)
