"""
最小全连接网络
前向传播、反向传播、带动量与权重衰减的 SGD、有限差分梯度校验与检查点读写
"""

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")
CHECKPOINT_FORMAT = "hierfuse-checkpoint v1"


class TensorNetError(Exception):
    """网络计算相关异常"""

    pass


class ShapeMismatchError(TensorNetError):
    """张量形状不匹配"""

    pass


class NonFiniteInputError(TensorNetError):
    """输入包含 NaN 或无穷"""

    pass


class TapeMismatchError(TensorNetError):
    """反向传播使用的记录与网络不对应"""

    pass


class NonFiniteLossError(TensorNetError):
    """损失值不是有限数"""

    pass


class CheckpointError(TensorNetError):
    """检查点读写失败"""

    pass


@dataclass
class Layer:
    """一层：weight (out×in), bias (out), 激活函数"""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class Mlp:
    """多层感知机；uid 用于核对前向记录"""

    _uids = itertools.count()

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeMismatchError("网络至少需要一层")

        for k, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise TensorNetError(f"未知激活函数: {layer.activation}")
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeMismatchError(
                    f"第 {k} 层形状无效: W{layer.weight.shape}, b{layer.bias.shape}"
                )
            if k > 0 and layers[k - 1].out_dim != layer.in_dim:
                raise ShapeMismatchError(
                    f"第 {k - 1} 层输出 {layers[k - 1].out_dim} 与第 {k} 层输入 {layer.in_dim} 不一致"
                )
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NonFiniteInputError(f"第 {k} 层参数包含非有限值")

        self.layers = [
            Layer(
                weight=np.ascontiguousarray(layer.weight, dtype=np.float64),
                bias=np.ascontiguousarray(layer.bias, dtype=np.float64),
                activation=layer.activation,
            )
            for layer in layers
        ]
        self.uid = next(Mlp._uids)

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "Mlp":
        """
        Kaiming 风格均匀初始化

        权重 ~ U(-gain*sqrt(3/fan_in), +gain*sqrt(3/fan_in))，relu 层 gain=sqrt(2)，
        identity 层 gain=1；偏置 ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in))

        Args:
            dims: 各层维度 [d_0, ..., d_L]
            activations: L 个激活函数名
            rng: 随机数生成器

        Returns:
            Mlp: 初始化后的网络
        """
        if len(dims) != len(activations) + 1:
            raise ShapeMismatchError(f"维度数 {len(dims)} 应比激活函数数 {len(activations)} 多一")

        layers = []
        for fan_in, fan_out, activation in zip(dims[:-1], dims[1:], activations):
            gain = np.sqrt(2.0) if activation == "relu" else 1.0
            bound = gain * np.sqrt(3.0 / fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            bias_bound = 1.0 / np.sqrt(fan_in)
            bias = rng.uniform(-bias_bound, bias_bound, size=fan_out)
            layers.append(Layer(weight=weight, bias=bias, activation=activation))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[np.ndarray]:
        """参数张量引用，顺序为 [W0, b0, W1, b1, ...]"""
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in self.layers]
        )

    def architecture(self) -> List[Dict[str, Any]]:
        """层结构描述（写入检查点头部）"""
        return [
            {"in": layer.in_dim, "out": layer.out_dim, "activation": layer.activation}
            for layer in self.layers
        ]


@dataclass
class Tape:
    """前向传播记录：每层输入与激活前的值"""

    uid: int
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


@dataclass
class Grads:
    """与网络参数一一对应的梯度"""

    tensors: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: Mlp) -> "Grads":
        return cls([np.zeros_like(p) for p in net.parameters()])

    def add(self, other: "Grads") -> "Grads":
        _check_congruent(self.tensors, other.tensors)
        return Grads([a + b for a, b in zip(self.tensors, other.tensors)])

    def scaled(self, factor: float) -> "Grads":
        return Grads([factor * g for g in self.tensors])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.tensors])


@dataclass
class OptimState:
    """SGD 状态：每个参数一个速度缓冲"""

    velocities: List[np.ndarray]
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    @classmethod
    def for_net(cls, net: Mlp, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> "OptimState":
        if min(lr, momentum, weight_decay) < 0:
            raise TensorNetError(f"优化器超参数必须非负: lr={lr}, momentum={momentum}, wd={weight_decay}")
        return cls([np.zeros_like(p) for p in net.parameters()], lr, momentum, weight_decay)


def _check_congruent(a: Sequence[np.ndarray], b: Sequence[np.ndarray]):
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ShapeMismatchError("梯度与参数形状不一致")


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward(net: Mlp, batch: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """
    前向传播

    Args:
        net: 网络
        batch: n×in_dim 输入

    Returns:
        (n×out_dim 输出, 前向记录)
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 1 or batch.shape[1] != net.in_dim:
        raise ShapeMismatchError(f"输入形状 {batch.shape} 与网络输入维度 {net.in_dim} 不匹配")
    if not np.all(np.isfinite(batch)):
        raise NonFiniteInputError("输入包含 NaN 或无穷")

    tape = Tape(uid=net.uid)
    h = batch
    for layer in net.layers:
        tape.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        tape.pre_activations.append(z)
        h = _relu(z) if layer.activation == "relu" else z
    return h, tape


def backward(net: Mlp, tape: Tape, output_grad: np.ndarray) -> Tuple[Grads, np.ndarray]:
    """
    反向传播

    Args:
        net: 产生 tape 的网络
        tape: 前向记录
        output_grad: 损失对输出的梯度 (n×out_dim)

    Returns:
        (参数梯度, 对输入的梯度 n×in_dim)
    """
    if tape.uid != net.uid or len(tape.inputs) != len(net.layers):
        raise TapeMismatchError(f"前向记录 (uid={tape.uid}) 与网络 (uid={net.uid}) 不对应")

    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.pre_activations[-1].shape:
        raise ShapeMismatchError(
            f"输出梯度形状 {g.shape} 与输出形状 {tape.pre_activations[-1].shape} 不一致"
        )

    tensors: List[Optional[np.ndarray]] = [None] * (2 * len(net.layers))
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        if layer.activation == "relu":
            # 激活前为 0 处取次梯度 0
            g = g * (tape.pre_activations[k] > 0)
        tensors[2 * k] = g.T @ tape.inputs[k]
        tensors[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.weight
    return Grads(tensors), g


def sgd_step(net: Mlp, grads: Grads, state: OptimState):
    """
    一步 SGD：v <- momentum*v + grad + weight_decay*param；param <- param - lr*v

    Args:
        net: 原地更新的网络
        grads: 参数梯度
        state: 优化器状态（原地更新）
    """
    params = net.parameters()
    _check_congruent(params, grads.tensors)
    _check_congruent(params, state.velocities)

    for p, g, v in zip(params, grads.tensors, state.velocities):
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.lr * v


def finite_diff_check(
    loss: Callable[[Mlp], Tuple[float, Grads]],
    net: Mlp,
    eps: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
    skip_params: Sequence[int] = (),
) -> float:
    """
    用中心差分校验解析梯度

    Args:
        loss: 接收网络并返回 (损失值, 参数梯度) 的确定性函数
        net: 被校验的网络（参数被临时扰动后恢复）
        eps: 差分步长
        n_coords: 抽查的坐标数；参数总数更少时全部检查
        seed: 坐标抽样种子
        skip_params: 跳过的参数张量下标（按 parameters() 顺序），
            用于解析梯度恒为零、数值差分只剩舍入噪声的张量

    Returns:
        float: 最大相对误差，分母为 max(|解析|, |数值|, 1e-8)
    """
    if eps <= 0:
        raise TensorNetError(f"差分步长必须为正: {eps}")

    value, grads = loss(net)
    if not np.isfinite(value):
        raise NonFiniteLossError(f"损失值非有限: {value}")
    analytic = grads.flat()

    params = net.parameters()
    sizes = [p.size for p in params]
    offsets = np.cumsum([0] + sizes)
    skipped = set(int(t) for t in skip_params)
    if any(t < 0 or t >= len(params) for t in skipped):
        raise TensorNetError(f"跳过的参数下标越界: {sorted(skipped)}，共 {len(params)} 个张量")
    candidates = np.concatenate(
        [np.arange(offsets[t], offsets[t + 1]) for t in range(len(params)) if t not in skipped]
        or [np.zeros(0, dtype=int)]
    ).astype(int)

    rng = np.random.default_rng(seed)
    if len(candidates) <= n_coords:
        coords = candidates
    else:
        coords = np.sort(rng.choice(candidates, size=n_coords, replace=False))

    worst = 0.0
    for coord in coords:
        t = int(np.searchsorted(offsets, coord, side="right") - 1)
        flat_param = params[t].reshape(-1)
        local = int(coord - offsets[t])
        original = flat_param[local]

        flat_param[local] = original + eps
        plus, _ = loss(net)
        flat_param[local] = original - eps
        minus, _ = loss(net)
        flat_param[local] = original

        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteLossError(f"扰动坐标 {coord} 后损失非有限")

        numeric = (plus - minus) / (2 * eps)
        a = analytic[coord]
        error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, float(error))

    logger.debug(f"有限差分校验: {len(coords)} 个坐标, 最大相对误差 {worst:.3e}")
    return worst


def _format_values(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values.ravel())


def save_checkpoint(
    path: Union[str, Path],
    nets: Dict[str, Mlp],
    seed: int = 0,
    epoch: int = 0,
    extra: Optional[Dict[str, Any]] = None,
):
    """
    写出文本检查点

    首行为 JSON 头部（格式、结构、种子、轮数），之后每个张量一行：
    `name|shape|v0 v1 ...`，行优先，17 位有效数字

    Args:
        path: 输出路径
        nets: 名称 -> 网络
        seed: 训练种子
        epoch: 已完成轮数
        extra: 附加头部信息
    """
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {name: net.architecture() for name, net in nets.items()},
        "seed": seed,
        "epoch": epoch,
        **(extra or {}),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name, net in nets.items():
        for k, layer in enumerate(net.layers):
            for kind, tensor in (("weight", layer.weight), ("bias", layer.bias)):
                shape = ",".join(str(s) for s in tensor.shape)
                lines.append(f"{name}.{k}.{kind}|{shape}|{_format_values(tensor)}")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise CheckpointError(f"写入检查点失败 {path}: {e}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, Mlp]]:
    """
    读取文本检查点

    Args:
        path: 检查点路径

    Returns:
        (头部字典, 名称 -> 网络)，前向输出与保存前逐位一致
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CheckpointError(f"读取检查点失败 {path}: {e}")

    try:
        header = json.loads(lines[0])
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"检查点格式不匹配: {header.get('format')!r}")

        tensors: Dict[str, np.ndarray] = {}
        for line in lines[1:]:
            if not line:
                continue
            name, shape_text, values_text = line.split("|")
            shape = tuple(int(s) for s in shape_text.split(",") if s)
            values = np.array([float(v) for v in values_text.split()], dtype=np.float64)
            tensors[name] = values.reshape(shape)

        nets = {}
        for name, layers in header["architecture"].items():
            nets[name] = Mlp(
                [
                    Layer(
                        weight=tensors[f"{name}.{k}.weight"],
                        bias=tensors[f"{name}.{k}.bias"],
                        activation=spec["activation"],
                    )
                    for k, spec in enumerate(layers)
                ]
            )
    except CheckpointError:
        raise
    except (IndexError, KeyError, ValueError, TensorNetError) as e:
        raise CheckpointError(f"检查点内容损坏 {path}: {e}")

    return header, nets
