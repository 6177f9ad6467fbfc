#!/usr/bin/env python3
"""
两阶段 MIL 预测模型
粗类头 f_θ1（3 类）与细类头 f_θ2（7 类）各有一个门控注意力 MIL 编码器，输入同一个包；
仅当粗类 argmax 为 Serrated 时，细类头的 3 个取材部位输入槽才填入 one-hot，否则置零
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

import numkernel as nk
from bag_data import Bag
from errors import ConfigError, FormatError, NumericError, ShapeError
from numkernel import GradTape, Operand
from taxonomy import NUM_COARSE, NUM_FINE, CoarseClass, HierarchyLevel, Subsite

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HMP1"
SUBSITE_SLOTS = len(Subsite)
LEVEL_PREFIX = {HierarchyLevel.COARSE: "coarse", HierarchyLevel.FINE: "fine"}


def expected_shapes(dim: int, attn_dim: int) -> Dict[str, Tuple[int, ...]]:
    """参数名到形状的映射（顺序即检查点中的写入顺序）"""
    shapes = {}
    for level, prefix in LEVEL_PREFIX.items():
        head_in = dim if level is HierarchyLevel.COARSE else dim + SUBSITE_SLOTS
        n_out = NUM_COARSE if level is HierarchyLevel.COARSE else NUM_FINE
        shapes[f"{prefix}.V"] = (dim, attn_dim)
        shapes[f"{prefix}.U"] = (dim, attn_dim)
        shapes[f"{prefix}.w"] = (attn_dim,)
        shapes[f"{prefix}.W"] = (head_in, n_out)
        shapes[f"{prefix}.b"] = (n_out,)
    return shapes


@dataclass
class ModelParams:
    """模型参数：每个层级的注意力参数 (V, U, w) 与分类头 (W, b)"""
    dim: int
    attn_dim: int
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        shapes = expected_shapes(self.dim, self.attn_dim)
        if set(self.tensors) != set(shapes):
            raise ShapeError(f"参数名不匹配: {sorted(self.tensors)}")
        ordered = {}
        for name, shape in shapes.items():
            value = np.asarray(self.tensors[name], dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"参数 {name} 形状应为 {shape}, 实际 {value.shape}")
            if not np.all(np.isfinite(value)):
                raise NumericError(f"参数 {name} 含有非有限值")
            ordered[name] = value
        self.tensors = ordered

    def level(self, level: HierarchyLevel) -> Dict[str, np.ndarray]:
        prefix = LEVEL_PREFIX[HierarchyLevel(level)] + "."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "ModelParams":
        return ModelParams(self.dim, self.attn_dim, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def subsite_weights(self) -> np.ndarray:
        """细类头中取材部位输入槽对应的权重 (3×7)"""
        return self.tensors["fine.W"][-SUBSITE_SLOTS:, :]


@dataclass
class ProbPair:
    """两个层级的 softmax 输出（数组或梯度带节点）"""
    coarse: Operand
    fine: Operand

    def values(self) -> "ProbPair":
        return ProbPair(np.array(nk.value_of(self.coarse)), np.array(nk.value_of(self.fine)))


@dataclass
class EncodeResult:
    """池化特征与注意力权重（注意力按输入实例顺序排列）"""
    pooled: np.ndarray
    attention: np.ndarray


@dataclass
class ForwardResult:
    probs: ProbPair
    coarse: EncodeResult
    fine: EncodeResult
    gate_open: bool
    subsite_block: np.ndarray
    param_vars: Dict[str, Operand] = field(default_factory=dict, repr=False)


@dataclass
class Prediction:
    """predict 的输出：概率对以及两个编码器的中间结果"""
    probs: ProbPair
    coarse: EncodeResult
    fine: EncodeResult
    gate_open: bool
    subsite_block: np.ndarray


def init_params(dim: int, attn_dim: int, seed: int) -> ModelParams:
    """权重取自 U(-1/√fan_in, 1/√fan_in)，偏置为零"""
    if dim < 2 or attn_dim < 1:
        raise ConfigError(f"模型维度无效: d={dim}, a={attn_dim}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D494C]))
    tensors = {}
    for name, shape in expected_shapes(dim, attn_dim).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        bound = 1.0 / np.sqrt(shape[0])
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(dim, attn_dim, tensors)


def canonical_order(features: np.ndarray) -> np.ndarray:
    """实例的字典序排列；先按它重排可使池化结果与输入顺序完全无关"""
    return np.lexsort(features.T[::-1])


def _encode(level_params: Dict[str, Operand], z: np.ndarray):
    V, U, w = level_params["V"], level_params["U"], level_params["w"]
    if z.shape[1] != nk.value_of(V).shape[0]:
        raise ShapeError(f"包特征宽度 {z.shape[1]} 与模型维度 {nk.value_of(V).shape[0]} 不一致")
    hidden = nk.tanh(nk.matmul(z, V)) * nk.sigmoid(nk.matmul(z, U))
    scores = nk.reshape(nk.matmul(hidden, nk.reshape(w, (-1, 1))), (-1,))
    attention = nk.softmax(scores)
    pooled = nk.matmul(attention, z)
    return pooled, attention


def _inspect(pooled: Operand, attention: Operand, order: np.ndarray) -> EncodeResult:
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return EncodeResult(pooled=np.array(nk.value_of(pooled)),
                        attention=np.array(nk.value_of(attention))[inverse])


def encode(level_params: Dict[str, np.ndarray], bag: Bag) -> EncodeResult:
    """门控注意力池化：e_k = wᵀ(tanh(V z_k) ⊙ sigmoid(U z_k))，attention = softmax(e)"""
    order = canonical_order(bag.features)
    pooled, attention = _encode(level_params, bag.features[order])
    return _inspect(pooled, attention, order)


def forward(params: ModelParams, bag: Bag, tape: Optional[GradTape] = None,
            use_subsite: bool = True, gate: Optional[bool] = None) -> ForwardResult:
    """
    前向计算

    参数:
        tape: 给定时把参数登记到梯度带上，返回的概率为 Var
        use_subsite: False 时门控始终关闭
        gate: 显式指定门控状态（梯度检验、训练时按标签开门），None 表示按本次粗类 argmax
    """
    if bag.dim != params.dim:
        raise ShapeError(f"包 {bag.id} 特征宽度 {bag.dim} 与模型维度 {params.dim} 不一致")
    if tape is not None:
        operands = {name: tape.parameter(name, value) for name, value in params.tensors.items()}
    else:
        operands = dict(params.tensors)
    return forward_operands(operands, bag, use_subsite=use_subsite, gate=gate)


def forward_operands(operands: Dict[str, Operand], bag: Bag,
                     use_subsite: bool = True, gate: Optional[bool] = None) -> ForwardResult:
    """以任意参数操作数（数组或 Var）做前向，供 forward 与梯度检验共用"""
    order = canonical_order(bag.features)
    z = bag.features[order]

    coarse_p = {k.split(".", 1)[1]: v for k, v in operands.items() if k.startswith("coarse.")}
    fine_p = {k.split(".", 1)[1]: v for k, v in operands.items() if k.startswith("fine.")}

    pooled_c, attn_c = _encode(coarse_p, z)
    p_coarse = nk.softmax(nk.linear(pooled_c, coarse_p["W"], coarse_p["b"]))

    # 门控在一次前向内视为常量，不参与求导
    if not use_subsite:
        gate_open = False
    elif gate is not None:
        gate_open = bool(gate)
    else:
        gate_open = int(np.argmax(nk.value_of(p_coarse))) == int(CoarseClass.SERRATED)
    block = bag.subsite.one_hot if gate_open else np.zeros(SUBSITE_SLOTS)

    pooled_f, attn_f = _encode(fine_p, z)
    fine_in = nk.concat([pooled_f, block])
    p_fine = nk.softmax(nk.linear(fine_in, fine_p["W"], fine_p["b"]))

    return ForwardResult(
        probs=ProbPair(p_coarse, p_fine),
        coarse=_inspect(pooled_c, attn_c, order),
        fine=_inspect(pooled_f, attn_f, order),
        gate_open=gate_open,
        subsite_block=block,
        param_vars=operands,
    )


def predict(params: ModelParams, bag: Bag, use_subsite: bool = True) -> Prediction:
    result = forward(params, bag, tape=None, use_subsite=use_subsite)
    return Prediction(result.probs.values(), result.coarse, result.fine,
                      result.gate_open, result.subsite_block)


# ---------- 检查点 ----------

def save_checkpoint(params: ModelParams, path: Path):
    """magic "HMP1", d, a, 然后每个张量 (名称长度, 名称, rows, cols, float64 数据)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", params.dim, params.attn_dim)]
    for name, value in params.tensors.items():
        matrix = value.reshape(1, -1) if value.ndim == 1 else value
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<II", *matrix.shape))
        chunks.append(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path: Path) -> ModelParams:
    path = Path(path)
    raw = path.read_bytes()
    source = str(path)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"检查点魔数错误: {raw[:4]!r}", 0, source)
    if len(raw) < 12:
        raise FormatError("检查点头部被截断", len(raw), source)
    dim, attn_dim = struct.unpack_from("<II", raw, 4)
    shapes = expected_shapes(dim, attn_dim)
    offset = 12
    tensors = {}
    while offset < len(raw):
        start = offset
        if offset + 2 > len(raw):
            raise FormatError("张量名长度被截断", offset, source)
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8", errors="replace")
        offset += name_len
        if offset + 8 > len(raw):
            raise FormatError(f"张量 {name} 的形状被截断", offset, source)
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        size = rows * cols * 8
        if offset + size > len(raw):
            raise FormatError(f"张量 {name} 的数据被截断", len(raw), source)
        if name not in shapes or int(np.prod(shapes[name])) != rows * cols:
            raise FormatError(f"未知或形状不符的张量 {name} ({rows}×{cols})", start, source)
        if name in tensors:
            raise FormatError(f"张量 {name} 重复出现", start, source)
        tensors[name] = np.frombuffer(raw[offset:offset + size], dtype="<f8").reshape(shapes[name]).copy()
        offset += size
    missing = [name for name in shapes if name not in tensors]
    if missing:
        raise FormatError(f"检查点缺少张量: {', '.join(missing)}", len(raw), source)
    return ModelParams(dim, attn_dim, tensors)
