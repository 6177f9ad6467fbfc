#!/usr/bin/env python3
"""
隐式特征重混（intra-hierarchy 优先级训练）
从高优先级包 B_i 抽取 β 比例实例、从低优先级包 B_j 抽取 1−β 比例实例拼成新包，
并用指数 1/τ 与 τ 做标签软化，使高优先级类别占主导
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np

from bag_data import Bag, Provenance, SoftLabel, TrainSample
from errors import BagSizeError, ConfigError, InvalidArgumentError
from taxonomy import NUM_COARSE, NUM_FINE, FineClass, HierarchyLevel, Taxonomy

logger = logging.getLogger(__name__)

LOW_SUCCESS_THRESHOLD = 0.99
STREAM_PAIRS = 0x5041
STREAM_REMIX = 0x524D


class PartnerMode(Enum):
    """低优先级搭配包的抽样方式"""
    UNIFORM_BAG = "uniform_bag"       # 在所有更低优先级的包中均匀抽取
    UNIFORM_CLASS = "uniform_class"   # 先均匀抽类别，再在该类中均匀抽包


@dataclass
class RemixConfig:
    """重混配置"""
    beta_min: float = 0.4
    beta_max: float = 0.8
    min_bag_size: int = 150             # B_i 至少要有的实例数
    tau: float = 15.0                   # 软化因子
    remix_probability: float = 0.3      # 每个 epoch 每个合格样本被重混的概率
    partner_mode: PartnerMode = PartnerMode.UNIFORM_BAG
    replace_source: bool = True         # True: 重混样本替换 B_i；False: 额外追加

    def __post_init__(self):
        try:
            self.partner_mode = PartnerMode(self.partner_mode)
        except ValueError:
            raise ConfigError(f"未知的搭配抽样方式: {self.partner_mode}")

    def validate(self):
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ConfigError(f"β 范围无效: [{self.beta_min}, {self.beta_max}]")
        if self.min_bag_size < 1:
            raise ConfigError(f"min_bag_size 至少为 1: {self.min_bag_size}")
        if self.tau < 1:
            raise ConfigError(f"τ 至少为 1: {self.tau}")
        if not (0.0 <= self.remix_probability <= 1.0):
            raise ConfigError(f"remix_probability 必须在 [0, 1] 内: {self.remix_probability}")


@dataclass(frozen=True)
class RemixPair:
    i: int          # 训练集中高优先级包的下标
    j: int          # 低优先级包的下标
    beta: float


@dataclass
class RemixOutcome:
    bag: Bag
    targets: SoftLabel
    r: float
    counts: Tuple[int, int]
    provenance: Provenance

    def to_sample(self) -> TrainSample:
        return TrainSample(self.bag, self.targets, self.provenance)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------- 重混成功概率 ----------

def remix_success_prob(n: int, alpha: float, beta: float) -> float:
    """
    P(E^c)：从 n 个实例（其中 ⌊nα⌉ 个有症状）中无放回抽取 ⌊nβ⌉ 个，至少抽到一个有症状实例的概率

    α+β ≥ 1 时恰为 1；否则 1 − C(n−⌊nα⌉, ⌊nβ⌉) / C(n, ⌊nβ⌉)，用大整数精确计算
    """
    if n < 1:
        raise InvalidArgumentError(f"n 至少为 1: {n}")
    if not (0.0 < alpha <= 1.0):
        raise InvalidArgumentError(f"α 必须在 (0, 1] 内: {alpha}")
    if not (0.0 < beta < 1.0):
        raise InvalidArgumentError(f"β 必须在 (0, 1) 内: {beta}")
    if alpha + beta >= 1.0 - 1e-12:
        return 1.0
    symptomatic = _round_half_up(n * alpha)
    drawn = _round_half_up(n * beta)
    if drawn > n - symptomatic:
        return 1.0
    miss = Fraction(math.comb(n - symptomatic, drawn), math.comb(n, drawn))
    return float(1 - miss)


def simulate_success_prob(n: int, alpha: float, beta: float, draws: int = 100_000,
                          seed: int = 0) -> Tuple[float, float]:
    """
    蒙特卡洛估计 P(E^c)，返回 (估计值, 标准误)

    每次抽样给 n 个实例分配随机键，取键最小的 ⌊nβ⌉ 个即为一次无放回抽取；
    有症状实例记在前 ⌊nα⌉ 个位置
    """
    if draws < 1:
        raise InvalidArgumentError(f"draws 至少为 1: {draws}")
    symptomatic = min(n, _round_half_up(n * alpha))
    drawn = min(n, _round_half_up(n * beta))
    if symptomatic == 0 or drawn == 0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, min(draws, 2_000_000 // n))
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        keys = rng.random((m, n))
        kth = np.partition(keys, drawn - 1, axis=1)[:, drawn - 1]
        hits += int(np.count_nonzero(keys[:, :symptomatic].min(axis=1) <= kth))
        done += m
    p = hits / draws
    return p, math.sqrt(p * (1.0 - p) / draws)


def success_grid(n_values: Sequence[int], alphas: Sequence[float],
                 betas: Sequence[float]) -> List[Dict[str, float]]:
    """在 (n, α, β) 网格上逐点计算 P(E^c)"""
    if not n_values or not alphas or not betas:
        raise InvalidArgumentError("网格不能为空")
    rows = []
    for n in n_values:
        for alpha in alphas:
            for beta in betas:
                rows.append({"n": int(n), "alpha": float(alpha), "beta": float(beta),
                             "p_success": remix_success_prob(int(n), float(alpha), float(beta))})
    return rows


def low_success_fraction(rows: Sequence[Dict[str, float]], n: int,
                         threshold: float = LOW_SUCCESS_THRESHOLD) -> Tuple[int, int, float]:
    """
    给定 n，可行格点（α+β<1）中 P(E^c) ≤ threshold 的个数与比例
    返回 (可行格点数, 低概率格点数, 比例)
    """
    feasible = [r for r in rows if r["n"] == n and r["alpha"] + r["beta"] < 1.0 - 1e-12]
    low = sum(1 for r in feasible if r["p_success"] <= threshold)
    return len(feasible), low, (low / len(feasible) if feasible else 0.0)


# ---------- 标签软化 ----------

def mix_ratio(k_i: int, k_j: int) -> float:
    """r = k_i / (k_i + k_j)，使用实际抽取的实例数"""
    if k_i < 1 or k_j < 1:
        raise InvalidArgumentError(f"实例数必须为正: k_i={k_i}, k_j={k_j}")
    return k_i / (k_i + k_j)


def _soften_pair(r: float, tau: float) -> Tuple[float, float]:
    r_i = r ** (1.0 / tau)
    r_j = (1.0 - r) ** tau
    # 先算较小的一项，另一项取 1 减之，使两项之和恰为 1
    if r_i >= r_j:
        y_j = r_j / (r_i + r_j)
        return 1.0 - y_j, y_j
    y_i = r_i / (r_i + r_j)
    return y_i, 1.0 - y_i


def soften_labels(r: float, tau: float, class_i: FineClass, class_j: FineClass,
                  taxonomy: Taxonomy) -> SoftLabel:
    """
    r̃_i = r^{1/τ}, r̃_j = (1−r)^τ, 归一化后作为两个类别的目标概率
    粗类层级对父类应用同样的公式；父类相同时为该父类的 one-hot
    """
    if not (0.0 < r < 1.0):
        raise InvalidArgumentError(f"r 必须在 (0, 1) 内: {r}")
    if tau < 1:
        raise InvalidArgumentError(f"τ 至少为 1: {tau}")
    if not taxonomy.higher_priority(class_i, class_j, HierarchyLevel.FINE):
        raise InvalidArgumentError(f"{class_i.name} 的优先级必须严格高于 {class_j.name}")

    y_i, y_j = _soften_pair(r, tau)
    fine = np.zeros(NUM_FINE)
    fine[int(class_i)] = y_i
    fine[int(class_j)] = y_j

    coarse = np.zeros(NUM_COARSE)
    parent_i, parent_j = taxonomy.parent(class_i), taxonomy.parent(class_j)
    if parent_i is parent_j:
        coarse[int(parent_i)] = 1.0
    else:
        coarse[int(parent_i)] = y_i
        coarse[int(parent_j)] = y_j
    return SoftLabel(coarse=coarse, fine=fine)


# ---------- 包重混 ----------

def remix_bags(bag_i: Bag, bag_j: Bag, beta: float, taxonomy: Taxonomy,
               config: RemixConfig, seed) -> RemixOutcome:
    """
    从 bag_i 无放回抽取 round(β|B_i|) 个实例，从 bag_j 抽取 round((1−β)|B_j|) 个，拼接后打乱
    新包的取材部位继承 bag_i
    """
    if bag_i.n < config.min_bag_size:
        raise BagSizeError(f"包 {bag_i.id} 只有 {bag_i.n} 个实例，少于 {config.min_bag_size}")
    if bag_i.label is bag_j.label:
        raise InvalidArgumentError(f"重混对的标签相同: {bag_i.label.name}")
    if not taxonomy.higher_priority(bag_i.label, bag_j.label, HierarchyLevel.FINE):
        raise InvalidArgumentError(
            f"重混对无效: {bag_i.label.name} 的优先级不高于 {bag_j.label.name}")
    if not (0.0 < beta < 1.0):
        raise InvalidArgumentError(f"β 必须在 (0, 1) 内: {beta}")
    if bag_i.dim != bag_j.dim:
        raise InvalidArgumentError(f"两个包的特征宽度不同: {bag_i.dim} vs {bag_j.dim}")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    k_i = min(bag_i.n, max(1, _round_half_up(beta * bag_i.n)))
    k_j = min(bag_j.n, max(1, _round_half_up((1.0 - beta) * bag_j.n)))
    take_i = rng.choice(bag_i.n, size=k_i, replace=False)
    take_j = rng.choice(bag_j.n, size=k_j, replace=False)
    stacked = np.concatenate([bag_i.features[take_i], bag_j.features[take_j]], axis=0)
    features = stacked[rng.permutation(stacked.shape[0])]

    r = mix_ratio(k_i, k_j)
    targets = soften_labels(r, config.tau, bag_i.label, bag_j.label, taxonomy)
    bag = Bag(id=f"{bag_i.id}+{bag_j.id}", features=features,
              label=bag_i.label, subsite=bag_i.subsite)
    return RemixOutcome(bag=bag, targets=targets, r=r, counts=(k_i, k_j),
                        provenance=Provenance.remixed(bag_i.id, bag_j.id, beta))


def select_remix_pairs(train_bags: Sequence[Bag], config: RemixConfig, taxonomy: Taxonomy,
                       seed: int, epoch: int) -> List[RemixPair]:
    """
    为每个合格样本 i（实例数足够且存在更低优先级的包）以 remix_probability 的概率选出 (i, j, β)
    结果由 (seed, epoch) 唯一确定
    """
    config.validate()
    if config.remix_probability <= 0.0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_PAIRS, int(epoch)]))

    by_class: Dict[FineClass, List[int]] = {c: [] for c in FineClass}
    for idx, bag in enumerate(train_bags):
        by_class[bag.label].append(idx)

    pairs = []
    for i, bag in enumerate(train_bags):
        if bag.n < config.min_bag_size:
            continue
        lower_classes = [c for c in taxonomy.lower_priority_classes(bag.label) if by_class[c]]
        if not lower_classes:
            continue
        # 每个合格样本固定消耗三个随机数，保证可复现
        u, pick, beta_u = rng.random(3)
        if u >= config.remix_probability:
            continue
        if config.partner_mode is PartnerMode.UNIFORM_CLASS:
            cls = lower_classes[min(int(pick * len(lower_classes)), len(lower_classes) - 1)]
            members = by_class[cls]
            j = members[int(rng.integers(len(members)))]
        else:
            candidates = [idx for c in lower_classes for idx in by_class[c]]
            j = candidates[min(int(pick * len(candidates)), len(candidates) - 1)]
        beta = config.beta_min + (config.beta_max - config.beta_min) * beta_u
        pairs.append(RemixPair(i, j, float(beta)))
    logger.debug("epoch %d 选出 %d 个重混对", epoch, len(pairs))
    return pairs


def build_epoch_samples(train_bags: Sequence[Bag], config: RemixConfig, taxonomy: Taxonomy,
                        seed: int, epoch: int, enabled: bool = True) -> List[TrainSample]:
    """一个 epoch 的样本列表：原始样本，其中被选中的按配置替换为（或追加）重混样本"""
    samples = [TrainSample.pure(bag, taxonomy) for bag in train_bags]
    if not enabled:
        return samples
    extra = []
    for pair in select_remix_pairs(train_bags, config, taxonomy, seed, epoch):
        outcome = remix_bags(train_bags[pair.i], train_bags[pair.j], pair.beta, taxonomy, config,
                             [int(seed), STREAM_REMIX, int(epoch), pair.i])
        if config.replace_source:
            samples[pair.i] = outcome.to_sample()
        else:
            extra.append(outcome.to_sample())
    return samples + extra
