#!/usr/bin/env python3
"""
数值内核 - 最小可微分计算库
提供线性映射、逐元素非线性、softmax、归约等算子，并以反向模式梯度带（GradTape）求梯度

所有算子既可作用于 numpy 数组（纯前向计算），也可作用于 Var（记录到梯度带上）
全程使用 64 位浮点
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InvalidArgumentError, NumericError, ShapeError, TapeStateError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12       # log 内部的下限截断


def as_tensor2(data, name: str = "tensor") -> np.ndarray:
    """转换为行优先的 2 维 float64 数组并检查有限性"""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} 必须是二维张量, 实际维度 {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} 含有非有限值")
    return np.ascontiguousarray(arr)


class Var:
    """梯度带上的一个节点"""
    __slots__ = ("value", "tape", "index", "name")

    def __init__(self, value: np.ndarray, tape: "GradTape", index: int, name: Optional[str] = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = self.name or f"#{self.index}"
        return f"Var({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


Operand = Union[Var, np.ndarray, float, int]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class GradTape:
    """
    反向模式梯度带

    前向时按顺序记录每个原语及其反向函数（闭包中保存所需的中间量），
    grad() 逆序回放一次得到每个参数的梯度；同一条带只能回放一次
    """

    def __init__(self):
        self._values: List[np.ndarray] = []
        self._parents: List[Tuple[Optional[int], ...]] = []
        self._backward: List[Optional[Backward]] = []
        self._params: Dict[str, int] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._values)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _append(self, value: np.ndarray, parents: Tuple[Optional[int], ...],
                backward: Optional[Backward], name: Optional[str] = None) -> Var:
        if self._consumed:
            raise TapeStateError("梯度带已回放, 不能继续记录")
        self._values.append(value)
        self._parents.append(parents)
        self._backward.append(backward)
        return Var(value, self, len(self._values) - 1, name)

    def parameter(self, name: str, value) -> Var:
        """登记一个需要梯度的参数（叶节点）"""
        if name in self._params:
            raise InvalidArgumentError(f"参数重复登记: {name}")
        var = self._append(np.array(value, dtype=np.float64), (), None, name)
        self._params[name] = var.index
        return var

    def constant(self, value) -> Var:
        return self._append(np.array(value, dtype=np.float64), (), None)

    def record(self, value: np.ndarray, inputs: Sequence[Operand], backward: Backward) -> Var:
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        return self._append(value, parents, backward)

    def grad(self, output: Var, seed=None) -> Dict[str, np.ndarray]:
        """
        回放梯度带，返回 seed 与 ∂output/∂参数 的收缩

        参数:
            output: 前向输出节点
            seed: 与输出同形的种子，默认全 1
        """
        if self._consumed:
            raise TapeStateError("梯度带已被回放过一次")
        if output.tape is not self:
            raise TapeStateError("输出节点不属于这条梯度带")

        out_value = self._values[output.index]
        if seed is None:
            seed = np.ones_like(out_value)
        seed = np.array(seed, dtype=np.float64)
        if seed.shape != out_value.shape:
            raise ShapeError(f"seed 形状 {seed.shape} 与输出形状 {out_value.shape} 不一致")

        self._consumed = True
        adjoints: List[Optional[np.ndarray]] = [None] * len(self._values)
        adjoints[output.index] = seed

        for idx in range(output.index, -1, -1):
            g = adjoints[idx]
            backward = self._backward[idx]
            if g is None or backward is None:
                continue
            for parent, pg in zip(self._parents[idx], backward(g)):
                if parent is None or pg is None:
                    continue
                if adjoints[parent] is None:
                    adjoints[parent] = np.array(pg, dtype=np.float64)
                else:
                    adjoints[parent] = adjoints[parent] + pg

        grads = {}
        for name, idx in self._params.items():
            g = adjoints[idx]
            grads[name] = np.zeros_like(self._values[idx]) if g is None else g.reshape(self._values[idx].shape)
        return grads


# ---------- 内部工具 ----------

def _val(x: Operand) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(inputs: Sequence[Operand]) -> Optional[GradTape]:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeStateError("算子的输入来自不同的梯度带")
    return tape


def _apply(value: np.ndarray, inputs: Sequence[Operand], backward: Backward):
    tape = _tape_of(inputs)
    if tape is None:
        return value
    return tape.record(value, inputs, backward)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------- 原语 ----------

def add(a: Operand, b: Operand):
    av, bv = _val(a), _val(b)
    return _apply(av + bv, (a, b),
                  lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a: Operand, b: Operand):
    av, bv = _val(a), _val(b)
    return _apply(av - bv, (a, b),
                  lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def neg(a: Operand):
    return _apply(-_val(a), (a,), lambda g: (-g,))


def mul(a: Operand, b: Operand):
    av, bv = _val(a), _val(b)
    return _apply(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Operand, b: Operand):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _apply(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a: Operand, b: Operand):
    """a (n×k 或 k) @ b (k×m)"""
    av, bv = _val(a), _val(b)
    if bv.ndim != 2 or av.ndim not in (1, 2):
        raise ShapeError(f"matmul 仅支持 (n×k|k) @ (k×m), 实际 {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul 内维不匹配: {av.shape} @ {bv.shape}")
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    out2 = a2 @ bv

    def backward(g):
        g2 = g.reshape(out2.shape)
        return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

    return _apply(out2.reshape(-1) if av.ndim == 1 else out2, (a, b), backward)


def linear(x: Operand, W: Operand, b: Operand):
    """xW + b，b 按行广播"""
    xv, Wv, bv = _val(x), _val(W), _val(b)
    if Wv.ndim != 2:
        raise ShapeError(f"权重必须是二维, 实际 {Wv.shape}")
    if xv.ndim not in (1, 2) or xv.shape[-1] != Wv.shape[0]:
        raise ShapeError(f"输入宽度 {xv.shape} 与权重行数 {Wv.shape[0]} 不一致")
    if bv.shape != (Wv.shape[1],):
        raise ShapeError(f"偏置长度 {bv.shape} 与权重列数 {Wv.shape[1]} 不一致")
    return add(matmul(x, W), b)


def tanh(x: Operand):
    out = np.tanh(_val(x))
    return _apply(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Operand):
    xv = _val(x)
    # 分段计算避免 exp 溢出
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _apply(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Operand):
    out = np.exp(_val(x))
    return _apply(out, (x,), lambda g: (g * out,))


def log(x: Operand, floor: Optional[float] = None):
    """自然对数；floor 给定时对输入做下限截断，被截断处梯度为 0"""
    xv = _val(x)
    if floor is None:
        return _apply(np.log(xv), (x,), lambda g: (g / xv,))
    clamped = np.maximum(xv, floor)
    active = xv > floor
    return _apply(np.log(clamped), (x,), lambda g: (np.where(active, g / clamped, 0.0),))


def xlogy(x: Operand, y: Operand, floor: float = LOG_FLOOR):
    """x·log(y)，约定 0·log 0 = 0；y 在 log 内截断到 floor"""
    xv, yv = _val(x), _val(y)
    logy = np.log(np.maximum(yv, floor))
    out = np.where(xv == 0.0, 0.0, xv * logy)

    def backward(g):
        gx = g * logy
        gy = np.where(yv > floor, g * xv / np.maximum(yv, floor), 0.0)
        return _unbroadcast(gx, xv.shape), _unbroadcast(gy, yv.shape)

    return _apply(out, (x, y), backward)


def softmax(x: Operand, axis: int = -1):
    """数值稳定的 softmax（先减去最大值）"""
    xv = _val(x)
    if xv.size == 0:
        raise InvalidArgumentError("softmax 输入为空")
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax 输入含有非有限值")
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _apply(out, (x,),
                  lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def reduce_sum(x: Operand, axis: Optional[int] = None):
    xv = _val(x)
    out = np.sum(xv, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _apply(np.asarray(out, dtype=np.float64), (x,), backward)


def concat(xs: Sequence[Operand], axis: int = 0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _apply(out, tuple(xs), backward)


def reshape(x: Operand, shape: Tuple[int, ...]):
    xv = _val(x)
    return _apply(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def value_of(x: Operand) -> np.ndarray:
    """取出节点或数组的数值"""
    return _val(x)


# ---------- 梯度检验 ----------

def numeric_gradient(fn: Callable[[Dict[str, np.ndarray]], float],
                     params: Dict[str, np.ndarray], eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """中心差分数值梯度"""
    grads = {}
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            minus = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (fn(plus) - fn(minus)) / (2.0 * eps)
        grads[name] = g
    return grads


def check_gradients(build: Callable[[Dict[str, Operand]], Operand],
                    params: Dict[str, np.ndarray],
                    eps: float = 1e-5, abs_floor: float = 1e-8) -> float:
    """
    比较梯度带梯度与中心差分，返回最大相对误差

    build 接收参数字典（Var 或数组）并返回标量输出；差值不超过 abs_floor 视为一致
    """
    tape = GradTape()
    variables = {k: tape.parameter(k, v) for k, v in params.items()}
    analytic = tape.grad(build(variables))
    numeric = numeric_gradient(lambda p: float(_val(build(p))), params, eps)

    worst = 0.0
    for name in params:
        diff = np.abs(analytic[name] - numeric[name])
        scale = np.maximum(np.abs(analytic[name]), np.abs(numeric[name]))
        rel = np.where(diff <= abs_floor, 0.0, diff / np.maximum(scale, abs_floor))
        if rel.size:
            worst = max(worst, float(np.max(rel)))
    logger.debug("梯度检验最大相对误差 %.3e", worst)
    return worst
