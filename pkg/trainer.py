#!/usr/bin/env python3
"""
训练与评估
Adam 优化、逐包（batch size 1）端到端训练循环、验证集指标与运行历史
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata
from tqdm import tqdm

import numkernel as nk
from bag_data import Bag, Dataset, SoftLabel, SplitTag
from errors import ConfigError, InputError, InvalidArgumentError, NumericError, ShapeError
from hierloss import KLDirection, LossBreakdown, LossSettings, iha_loss, total_loss
from mil_model import ModelParams, forward, init_params, predict
from numkernel import GradTape
from remix import RemixConfig, build_epoch_samples
from taxonomy import CoarseClass, FineClass, HierarchyLevel, Taxonomy

logger = logging.getLogger(__name__)

STREAM_SHUFFLE = 0x5348


@dataclass
class TrainerConfig:
    """训练配置"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    attn_dim: int = 16                  # 门控注意力隐藏维度
    gate_during_training: bool = True   # False: 训练时按真实粗类标签开门
    kl_direction: KLDirection = KLDirection.TARGET_TO_PRED

    def __post_init__(self):
        try:
            self.kl_direction = KLDirection(self.kl_direction)
        except ValueError:
            raise ConfigError(f"未知的 KL 方向: {self.kl_direction}")

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"学习率必须为正: {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas 必须在 [0, 1) 内: ({self.beta1}, {self.beta2})")
        if not self.eps > 0:
            raise ConfigError(f"eps 必须为正: {self.eps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs 至少为 1: {self.epochs}")
        if self.attn_dim < 1:
            raise ConfigError(f"attn_dim 至少为 1: {self.attn_dim}")


@dataclass(frozen=True)
class AblationFlags:
    """消融开关，任意子集都可以关闭"""
    use_iha: bool = True
    use_uhd: bool = True
    use_subsite: bool = True
    use_remix: bool = True

    def loss_settings(self, kl_direction: KLDirection = KLDirection.TARGET_TO_PRED) -> LossSettings:
        return LossSettings(use_iha=self.use_iha, use_uhd=self.use_uhd, kl_direction=kl_direction)


# 消融实验的六种配置
ABLATION_PRESETS: Dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "no-iha": AblationFlags(use_iha=False),
    "no-uhd": AblationFlags(use_uhd=False),
    "no-subsite": AblationFlags(use_subsite=False),
    "no-remix": AblationFlags(use_remix=False),
    "none": AblationFlags(False, False, False, False),
}


def create_trainer_config(**kwargs) -> TrainerConfig:
    """创建训练配置，未知键报错"""
    config = TrainerConfig()
    for key, value in kwargs.items():
        if not hasattr(config, key):
            raise ConfigError(f"未知的训练配置项: {key}")
        setattr(config, key, value)
    config.__post_init__()
    config.validate()
    return config


# ---------- Adam ----------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray], config: Optional[TrainerConfig] = None) -> "AdamState":
        config = config or TrainerConfig()
        return cls(
            m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            t=0, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """带偏差修正的 Adam 一步；不修改输入，返回新的参数与状态"""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError(f"参数与梯度的名称不一致: {sorted(params)} vs {sorted(grads)}")
    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError(f"参数 {name} 形状 {value.shape} 与梯度形状 {g.shape} 不一致")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


# ---------- 指标 ----------

def auroc(scores: Sequence[float], positives: Sequence[bool]) -> Optional[float]:
    """
    Mann–Whitney 秩统计量形式的 AUROC，平分秩给并列记 0.5
    正类或负类为空时返回 None
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    rank_sum = math.fsum(ranks[positives])
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class LevelMetrics:
    """单个层级的指标"""
    accuracy: float
    macro_auroc: Optional[float]
    per_class_auroc: Dict[str, Optional[float]]
    absent_classes: List[str]           # 不计入宏平均的类别
    confusion: List[List[int]]          # 行: 真实, 列: 预测
    counts: Dict[str, int]


def _level_metrics(probs: np.ndarray, labels: np.ndarray, classes) -> LevelMetrics:
    k = len(classes)
    predicted = np.argmax(probs, axis=1)
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (labels, predicted), 1)

    per_class, absent = {}, []
    for c in classes:
        value = auroc(probs[:, int(c)], labels == int(c))
        per_class[c.name] = value
        if value is None:
            absent.append(c.name)
    defined = [v for v in per_class.values() if v is not None]
    if absent:
        logger.warning("以下类别在该划分中缺少正例或负例，不计入宏平均 AUROC: %s", ", ".join(absent))
    return LevelMetrics(
        accuracy=float(np.mean(predicted == labels)),
        macro_auroc=(math.fsum(defined) / len(defined)) if defined else None,
        per_class_auroc=per_class,
        absent_classes=absent,
        confusion=confusion.tolist(),
        counts={c.name: int(np.sum(labels == int(c))) for c in classes},
    )


@dataclass
class MetricsReport:
    """一个划分上的评估结果"""
    n: int
    coarse: LevelMetrics
    fine: LevelMetrics
    adenoma_recall: Optional[float]
    adenoma_precision: Optional[float]
    loss: LossBreakdown
    mean_iha_gap: float                 # 粗类预测与细类聚合之间 JS 的均值

    def level(self, level: HierarchyLevel) -> LevelMetrics:
        return self.coarse if HierarchyLevel(level) is HierarchyLevel.COARSE else self.fine

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["loss"] = self.loss.to_dict()
        return data


@dataclass(frozen=True)
class _Scored:
    coarse: np.ndarray
    fine: np.ndarray
    loss: LossBreakdown
    iha_gap: float


def _score_bag(params: ModelParams, bag: Bag, taxonomy: Taxonomy, settings: LossSettings,
               use_subsite: bool) -> _Scored:
    pred = predict(params, bag, use_subsite=use_subsite)
    loss = total_loss(pred.probs, SoftLabel.one_hot(bag.label, taxonomy), taxonomy, settings)
    loss.node = None
    gap = float(nk.value_of(iha_loss(pred.probs.coarse, pred.probs.fine, taxonomy)))
    return _Scored(pred.probs.coarse, pred.probs.fine, loss, max(gap, 0.0))


def _score_all(params: ModelParams, bags: Sequence[Bag], taxonomy: Taxonomy,
               settings: LossSettings, use_subsite: bool, threads: int) -> List[_Scored]:
    def work(bag: Bag) -> _Scored:
        return _score_bag(params, bag, taxonomy, settings, use_subsite)

    if threads <= 1:
        return [work(bag) for bag in bags]
    # map 保持输入顺序，归约顺序因此确定
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, bags))


def evaluate(params: ModelParams, bags: Sequence[Bag], taxonomy: Taxonomy,
             settings: Optional[LossSettings] = None, use_subsite: bool = True,
             threads: int = 1) -> MetricsReport:
    """
    计算一个划分上的指标

    准确率为 argmax 命中率；宏 AUROC 为各类一对其余 AUROC 的不加权均值；
    召回与精确率以 Adenoma（任一子类）为正类
    """
    bags = list(bags)
    if not bags:
        raise InvalidArgumentError("评估划分为空")
    settings = settings or LossSettings()
    scored = _score_all(params, bags, taxonomy, settings, use_subsite, threads)

    fine_probs = np.stack([s.fine for s in scored])
    coarse_probs = np.stack([s.coarse for s in scored])
    fine_labels = np.array([int(b.label) for b in bags])
    coarse_labels = np.array([int(taxonomy.parent(b.label)) for b in bags])

    adenoma = np.array([taxonomy.is_adenoma(FineClass(i)) for i in range(len(FineClass))])
    actual_pos = adenoma[fine_labels]
    predicted_pos = adenoma[np.argmax(fine_probs, axis=1)]
    tp = int(np.sum(actual_pos & predicted_pos))
    fn = int(np.sum(actual_pos & ~predicted_pos))
    fp = int(np.sum(~actual_pos & predicted_pos))

    return MetricsReport(
        n=len(bags),
        coarse=_level_metrics(coarse_probs, coarse_labels, list(CoarseClass)),
        fine=_level_metrics(fine_probs, fine_labels, list(FineClass)),
        adenoma_recall=(tp / (tp + fn)) if tp + fn else None,
        adenoma_precision=(tp / (tp + fp)) if tp + fp else None,
        loss=LossBreakdown.mean(s.loss for s in scored),
        mean_iha_gap=math.fsum(s.iha_gap for s in scored) / len(scored),
    )


@dataclass
class PriorityRow:
    id: str
    urgent: str
    other: str
    p_urgent: float
    p_other: float
    predicted: str
    win: bool


@dataclass
class PriorityReport:
    """混合病变包上的优先级评估"""
    n: int
    win_rate: float
    mean_gap: float                     # p̂(urgent) − p̂(other) 的均值
    rows: List[PriorityRow] = field(default_factory=list)

    def to_dict(self, include_rows: bool = False) -> Dict[str, object]:
        data = {"n": self.n, "win_rate": self.win_rate, "mean_gap": self.mean_gap}
        if include_rows:
            data["rows"] = [asdict(r) for r in self.rows]
        return data


def evaluate_priority(params: ModelParams, bags: Sequence[Bag], taxonomy: Taxonomy,
                      use_subsite: bool = True, threads: int = 1) -> PriorityReport:
    """对每个混合包记录细类 argmax 是否为优先级更高的成分"""
    bags = list(bags)
    if not bags:
        raise InputError("混合测试划分为空")
    missing = [b.id for b in bags if b.mixture is None]
    if missing:
        raise InputError(f"{len(missing)} 个包缺少混合信息, 例如 {missing[0]}")

    scored = _score_all(params, bags, taxonomy, LossSettings(), use_subsite, threads)
    rows = []
    for bag, s in zip(bags, scored):
        urgent, other = bag.mixture.urgent, bag.mixture.other
        predicted = FineClass(int(np.argmax(s.fine)))
        rows.append(PriorityRow(
            id=bag.id, urgent=urgent.name, other=other.name,
            p_urgent=float(s.fine[int(urgent)]), p_other=float(s.fine[int(other)]),
            predicted=predicted.name, win=predicted is urgent,
        ))
    return PriorityReport(
        n=len(rows),
        win_rate=sum(r.win for r in rows) / len(rows),
        mean_gap=math.fsum(r.p_urgent - r.p_other for r in rows) / len(rows),
        rows=rows,
    )


# ---------- 运行历史 ----------

@dataclass
class EpochRecord:
    epoch: int
    seed: int
    train_loss: LossBreakdown
    val: Dict[str, object]
    provenance: Dict[str, int]          # 本 epoch 训练样本来源计数

    def to_dict(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "seed": self.seed,
            "train_loss": self.train_loss.to_dict(),
            "val": self.val,
            "provenance": self.provenance,
        }


class RunHistory:
    """逐 epoch 的训练记录；配置快照在构造时序列化，之后不可修改"""

    def __init__(self, seed: int, config: Dict[str, object]):
        self.seed = int(seed)
        self._config_json = json.dumps(config, ensure_ascii=False, sort_keys=True)
        self.epochs: List[EpochRecord] = []
        self.best_epoch: Optional[int] = None

    @property
    def config(self) -> Dict[str, object]:
        return json.loads(self._config_json)

    def append(self, record: EpochRecord):
        if self.epochs and record.epoch <= self.epochs[-1].epoch:
            raise InvalidArgumentError(f"epoch 必须严格递增: {self.epochs[-1].epoch} -> {record.epoch}")
        self.epochs.append(record)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_lines(self) -> List[str]:
        return [json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) for r in self.epochs]


def _config_snapshot(config: TrainerConfig, remix_config: RemixConfig, flags: AblationFlags,
                     taxonomy: Taxonomy) -> Dict[str, object]:
    trainer = asdict(config)
    trainer["kl_direction"] = config.kl_direction.value
    remix = asdict(remix_config)
    remix["partner_mode"] = remix_config.partner_mode.value
    return {"trainer": trainer, "remix": remix, "ablation": asdict(flags), "taxonomy": taxonomy.to_dict()}


def _training_gate(config: TrainerConfig, flags: AblationFlags, bag: Bag,
                   taxonomy: Taxonomy) -> Optional[bool]:
    if not flags.use_subsite or config.gate_during_training:
        return None
    return taxonomy.parent(bag.label) is CoarseClass.SERRATED


def train(config: TrainerConfig, dataset: Dataset, taxonomy: Taxonomy, seed: int,
          remix_config: Optional[RemixConfig] = None, flags: Optional[AblationFlags] = None,
          threads: int = 1, progress: bool = True,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[ModelParams, RunHistory]:
    """
    端到端训练，返回验证集最佳参数与运行历史

    最佳 epoch 按细类验证准确率选择，平局时取验证总损失更低者，再平局取更早的 epoch
    """
    config.validate()
    flags = flags or AblationFlags()
    remix_config = remix_config or RemixConfig()
    if not flags.use_remix:
        remix_config = replace(remix_config, remix_probability=0.0)
    remix_config.validate()

    train_bags = dataset.subset(SplitTag.TRAIN)
    val_bags = dataset.subset(SplitTag.VAL)
    if not train_bags:
        raise ConfigError("训练划分为空")
    if not val_bags:
        raise ConfigError("验证划分为空")

    settings = flags.loss_settings(config.kl_direction)
    params = init_params(dataset.dim, config.attn_dim, seed)
    state = AdamState.fresh(params.tensors, config)
    history = RunHistory(seed, _config_snapshot(config, remix_config, flags, taxonomy))
    best_params, best_key = params.copy(), None
    logger.info("开始训练: %d 个训练包, %d 个验证包, %d 个 epoch", len(train_bags), len(val_bags), config.epochs)

    for epoch in tqdm(range(1, config.epochs + 1), desc="训练", disable=not progress):
        samples = build_epoch_samples(train_bags, remix_config, taxonomy, seed, epoch,
                                      enabled=flags.use_remix)
        order = np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_SHUFFLE, epoch])) \
            .permutation(len(samples))

        losses = []
        for idx in order:
            sample = samples[int(idx)]
            tape = GradTape()
            result = forward(params, sample.bag, tape=tape, use_subsite=flags.use_subsite,
                             gate=_training_gate(config, flags, sample.bag, taxonomy))
            loss = total_loss(result.probs, sample.targets, taxonomy, settings)
            if not math.isfinite(loss.total) or not np.isfinite(nk.value_of(loss.node)):
                raise NumericError(f"epoch {epoch} 样本 {sample.bag.id} 的损失非有限", sample_id=sample.bag.id)
            grads = tape.grad(loss.node)
            tensors, state = adam_step(params.tensors, grads, state)
            params = ModelParams(params.dim, params.attn_dim, tensors)
            loss.node = None
            losses.append(loss)

        val = evaluate(params, val_bags, taxonomy, settings, use_subsite=flags.use_subsite, threads=threads)
        remixed = sum(1 for s in samples if s.provenance.kind == "remixed")
        record = EpochRecord(
            epoch=epoch, seed=int(seed), train_loss=LossBreakdown.mean(losses), val=val.to_dict(),
            provenance={"pure": len(samples) - remixed, "remixed": remixed},
        )
        history.append(record)

        key = (val.fine.accuracy, -val.loss.total)
        if best_key is None or key > best_key:
            best_key, best_params = key, params.copy()
            history.best_epoch = epoch
        if progress:
            tqdm.write(f"📊 epoch {epoch}: loss {record.train_loss.total:.4f} "
                       f"(ce {record.train_loss.ce:.4f}, iha {record.train_loss.iha:.4f}, "
                       f"uhd {record.train_loss.uhd:.4f}) | val fine acc {val.fine.accuracy:.3f}, "
                       f"coarse acc {val.coarse.accuracy:.3f} | 重混 {remixed}")
        if on_epoch is not None:
            on_epoch(record)

    logger.info("训练结束, 最佳 epoch %s", history.best_epoch)
    return best_params, history


# ---------- 多次运行汇总 ----------

def summarize_runs(results: Dict[str, List[Dict[str, float]]]) -> List[Dict[str, object]]:
    """
    每个配置在多个种子上的均值与标准差

    参数:
        results: 配置名 -> 每个种子一条 {指标名: 数值}
    """
    rows = []
    for name, runs in results.items():
        row: Dict[str, object] = {"config": name, "runs": len(runs)}
        metrics = sorted({k for run in runs for k in run})
        for metric in metrics:
            values = np.array([run[metric] for run in runs if run.get(metric) is not None], dtype=np.float64)
            if values.size == 0:
                row[f"{metric}_mean"] = row[f"{metric}_std"] = None
                continue
            row[f"{metric}_mean"] = float(math.fsum(values) / values.size)
            row[f"{metric}_std"] = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        rows.append(row)
    return rows
