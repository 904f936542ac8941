"""
训练流程
三个分层特征提取器 G1-G3 分别以各自层级的标签计算三元组损失，并以 MMD 缩小源域/目标域差距；
分类器 C 在拼接后的融合特征上以交叉熵训练细类预测
"""

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import VARIANT_LEVELS, TrainConfig
from core.datagen import MaskedLabelAccessError, Splits, stack_features, stack_labels
from core.hierarchy import HierarchyTree
from core.losses import (
    KernelBank,
    cross_entropy,
    kernel_bank,
    median_bandwidth,
    mine_all_triplets,
    mine_hard_triplets,
    mmd_loss,
    triplet_loss,
)
from core.tensornet import (
    CheckpointError,
    Grads,
    Mlp,
    OptimState,
    ShapeMismatchError,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from monitor.history_monitor import EpochRecord, HistoryMonitor, read_history, write_history

logger = logging.getLogger(__name__)

EXTRACTOR_NAMES = ("G1", "G2", "G3")
CLASSIFIER_NAME = "C"

CONFIG_ECHO = "config.echo"
CHECKPOINT_FILE = "checkpoint.final"
HISTORY_FILE = "history.csv"


class PipelineError(Exception):
    """训练流程相关异常"""

    pass


class UnknownVariantError(PipelineError):
    """未知的模型变体"""

    pass


class ConfigSplitMismatchError(PipelineError):
    """训练配置与数据集不匹配"""

    pass


def make_variant(name: str) -> Tuple[int, int, int]:
    """
    变体名 -> 各提取器使用的标签层级

    Args:
        name: ours / baseline / baseline_w_coarse / baseline_w_middle

    Returns:
        Tuple[int, int, int]: (L1, L2, L3)
    """
    try:
        return VARIANT_LEVELS[name]
    except KeyError:
        raise UnknownVariantError(f"未知变体: {name!r}，可选 {list(VARIANT_LEVELS)}")


def with_variant(cfg: TrainConfig, name: str, **overrides) -> TrainConfig:
    """复制训练配置并切换到指定变体"""
    return dataclasses.replace(cfg, variant=name, level_assignment=make_variant(name), **overrides)


@dataclass
class TrainedModel:
    """训练结果：三个提取器、分类器、配置回显与训练历史"""

    extractors: List[Mlp]
    classifier: Mlp
    config: TrainConfig
    history: List[EpochRecord] = field(default_factory=list)

    def __post_init__(self):
        if len(self.extractors) != 3:
            raise ShapeMismatchError(f"需要三个特征提取器: {len(self.extractors)}")
        out_dims = {g.out_dim for g in self.extractors}
        in_dims = {g.in_dim for g in self.extractors}
        if len(out_dims) != 1 or len(in_dims) != 1:
            raise ShapeMismatchError(f"提取器维度不一致: in={in_dims}, out={out_dims}")
        if self.classifier.in_dim != 3 * self.d_feat:
            raise ShapeMismatchError(
                f"分类器输入维度 {self.classifier.in_dim} 应为 3*{self.d_feat}"
            )

    @property
    def d_in(self) -> int:
        return self.extractors[0].in_dim

    @property
    def d_feat(self) -> int:
        return self.extractors[0].out_dim

    @property
    def n_fine(self) -> int:
        return self.classifier.out_dim

    def nets(self) -> Dict[str, Mlp]:
        """名称 -> 网络，顺序固定为 G1, G2, G3, C"""
        return {**dict(zip(EXTRACTOR_NAMES, self.extractors)), CLASSIFIER_NAME: self.classifier}

    def fuse(self, x: np.ndarray) -> np.ndarray:
        """融合特征 [G1(x) | G2(x) | G3(x)]"""
        return fuse(self, x)

    def logits(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.classifier, self.fuse(x))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self, x)

    def parameter_count(self) -> int:
        return parameter_count(self)


def fuse(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """
    按固定顺序拼接三个提取器的输出

    Args:
        model: 模型
        x: n×D_in 输入

    Returns:
        np.ndarray: n×3·d_feat 融合特征
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeMismatchError(f"输入形状 {x.shape} 与模型输入维度 {model.d_in} 不匹配")
    return np.concatenate([forward(g, x)[0] for g in model.extractors], axis=1)


def predict(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """细类预测：logits 的 argmax，并列时取最小类别编号"""
    return np.argmax(model.logits(x), axis=1)


def parameter_count(model: TrainedModel) -> int:
    """四个网络的参数总数"""
    return sum(net.num_parameters() for net in model.nets().values())


def init_model(cfg: TrainConfig, d_in: int, n_fine: int) -> TrainedModel:
    """
    按种子初始化四个网络；每个网络使用独立的随机流，与变体无关

    Args:
        cfg: 训练配置
        d_in: 输入维度
        n_fine: 细类数

    Returns:
        TrainedModel: 未训练的模型
    """
    dims = [d_in, *cfg.hidden_dims, cfg.d_feat]
    activations = ["relu"] * len(cfg.hidden_dims) + ["identity"]
    extractors = [
        Mlp.init(dims, activations, np.random.default_rng([cfg.seed, i])) for i in range(3)
    ]
    classifier = Mlp.init([3 * cfg.d_feat, n_fine], ["identity"], np.random.default_rng([cfg.seed, 3]))
    return TrainedModel(extractors=extractors, classifier=classifier, config=cfg)


class PKSampler:
    """PK 采样：每批随机取 P 个细类，每类 K 个样本"""

    def __init__(self, labels: np.ndarray, n_classes: int, n_samples: int, rng: np.random.Generator):
        self.rng = rng
        self.n_classes = n_classes
        self.n_samples = n_samples
        self.classes = np.unique(labels)
        self.members = {int(c): np.flatnonzero(labels == c) for c in self.classes}

        if len(self.classes) < n_classes:
            raise ConfigSplitMismatchError(
                f"源域只有 {len(self.classes)} 个类别，少于 PK 采样的 P={n_classes}"
            )

    def sample(self) -> np.ndarray:
        """一个批次的样本索引（P*K 个）"""
        chosen = self.rng.choice(self.classes, size=self.n_classes, replace=False)
        batch = []
        for c in chosen:
            members = self.members[int(c)]
            batch.append(
                self.rng.choice(members, size=self.n_samples, replace=len(members) < self.n_samples)
            )
        return np.concatenate(batch)


@dataclass
class BatchResult:
    """单批次的各项损失与四个网络的梯度"""

    triplet: Tuple[float, float, float]
    mmd: Tuple[float, float, float]
    ce: float
    extractor_grads: List[Grads]
    classifier_grads: Grads
    n_triplets: Tuple[int, int, int]
    mmd_lambda: float
    ce_to_extractors: bool

    def extractor_objective(self, i: int) -> float:
        """第 i 个提取器实际优化的标量目标"""
        value = self.triplet[i] + self.mmd_lambda * self.mmd[i]
        if self.ce_to_extractors:
            value += self.ce
        return value


def batch_objectives(
    model: TrainedModel,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: Optional[np.ndarray],
    tree: HierarchyTree,
    cfg: TrainConfig,
    banks: Optional[Sequence[KernelBank]] = None,
) -> BatchResult:
    """
    计算一个批次的全部目标及梯度（不更新参数）

    提取器 i：triplet_i（层级 L_i 的标签）+ λ·MMD(源域特征_i, 目标域特征_i)；
    分类器：融合特征上的交叉熵。ce_backprop_to_extractors 开启时交叉熵梯度也流向提取器。

    Args:
        model: 模型
        xs: 源域批次
        ys: 源域细类标签
        xt: 目标域批次（不使用域适应时为 None）
        tree: 类别层级
        cfg: 训练配置
        banks: 固定核族（None 表示按批次中位数启发式估计）

    Returns:
        BatchResult: 损失与梯度
    """
    use_da = cfg.use_da and xt is not None
    miner = mine_all_triplets if cfg.mining == "all" else mine_hard_triplets

    source = [forward(g, xs) for g in model.extractors]
    target = [forward(g, xt) for g in model.extractors] if use_da else None

    triplet_values, mmd_values, counts = [], [], []
    feat_grads_s, feat_grads_t = [], []
    for i, level in enumerate(cfg.level_assignment):
        feats, _ = source[i]
        labels = tree.labels_at_level(ys, level)
        triplets = miner(feats, labels)
        lt, g_s = triplet_loss(feats, triplets, cfg.alpha)
        triplet_values.append(lt)
        counts.append(len(triplets))

        g_t = None
        mmd_value = 0.0
        if use_da:
            feats_t, _ = target[i]
            if banks is not None:
                bank = banks[i]
            else:
                bank = kernel_bank(median_bandwidth(np.vstack([feats, feats_t])).sigma)
            mmd_value, gm_s, gm_t = mmd_loss(feats, feats_t, bank)
            g_s = g_s + cfg.mmd_lambda * gm_s
            g_t = cfg.mmd_lambda * gm_t
        mmd_values.append(mmd_value)
        feat_grads_s.append(g_s)
        feat_grads_t.append(g_t)

    fused = np.concatenate([out for out, _ in source], axis=1)
    logits, tape_c = forward(model.classifier, fused)
    ce, g_logits = cross_entropy(logits, ys)
    classifier_grads, g_fused = backward(model.classifier, tape_c, g_logits)

    d = model.d_feat
    extractor_grads = []
    for i, g in enumerate(model.extractors):
        g_s = feat_grads_s[i]
        if cfg.ce_backprop_to_extractors:
            g_s = g_s + g_fused[:, i * d : (i + 1) * d]
        grads, _ = backward(g, source[i][1], g_s)
        if feat_grads_t[i] is not None:
            grads_t, _ = backward(g, target[i][1], feat_grads_t[i])
            grads = grads.add(grads_t)
        extractor_grads.append(grads)

    return BatchResult(
        triplet=tuple(triplet_values),
        mmd=tuple(mmd_values),
        ce=ce,
        extractor_grads=extractor_grads,
        classifier_grads=classifier_grads,
        n_triplets=tuple(counts),
        mmd_lambda=cfg.mmd_lambda,
        ce_to_extractors=cfg.ce_backprop_to_extractors,
    )


def _check_inputs(cfg: TrainConfig, splits: Splits, tree: HierarchyTree) -> Tuple[np.ndarray, np.ndarray]:
    if not splits.train_source:
        raise ConfigSplitMismatchError("源域训练集为空")

    xs = stack_features(splits.train_source)
    ys = stack_labels(splits.train_source, 3)
    if ys.min() < 0 or ys.max() >= tree.n_fine:
        raise ConfigSplitMismatchError(f"源域标签超出层级的细类范围 [0, {tree.n_fine})")
    if len(xs) < cfg.batch_size:
        raise ConfigSplitMismatchError(f"源域样本数 {len(xs)} 少于批大小 {cfg.batch_size}")

    if cfg.use_da:
        if len(splits.train_target) < 2:
            raise ConfigSplitMismatchError("启用域适应时目标域训练集至少需要 2 个样本")
        if splits.train_target.features().shape[1] != xs.shape[1]:
            raise ConfigSplitMismatchError("目标域与源域特征维度不一致")

    if splits.val_target and stack_features(splits.val_target).shape[1] != xs.shape[1]:
        raise ConfigSplitMismatchError("验证集与源域特征维度不一致")
    return xs, ys


def accuracy(model: TrainedModel, samples) -> float:
    """样本列表上的 top-1 准确率；空列表返回 NaN"""
    if not samples:
        return math.nan
    return float(np.mean(model.predict(stack_features(samples)) == stack_labels(samples, 3)))


def train(
    cfg: TrainConfig,
    splits: Splits,
    tree: HierarchyTree,
    run_name: Optional[str] = None,
) -> TrainedModel:
    """
    训练完整系统

    每轮迭代 n_source // batch_size 个 PK 源域批次，每批配一个同样大小的无标签目标域批次；
    四个网络各自维护优化器状态并逐批更新。目标域训练集标签从不读取。

    Args:
        cfg: 训练配置
        splits: 数据集划分
        tree: 类别层级
        run_name: 日志前缀

    Returns:
        TrainedModel: 最后一轮的模型（含训练历史）

    Raises:
        ConfigSplitMismatchError: 配置与数据不匹配
        MaskedLabelAccessError: 训练期间读取了目标域训练集标签
        DivergenceError: 损失非有限
    """
    cfg.validate()
    xs_all, ys_all = _check_inputs(cfg, splits, tree)
    reads_before = splits.train_target.label_reads
    xt_all = splits.train_target.features() if cfg.use_da else None

    run_name = run_name or f"{cfg.variant}-s{cfg.seed}"
    model = init_model(cfg, xs_all.shape[1], tree.n_fine)
    nets = list(model.nets().values())
    states = [OptimState.for_net(net, cfg.lr, cfg.momentum, cfg.weight_decay) for net in nets]

    sampler = PKSampler(ys_all, cfg.pk_classes, cfg.pk_samples, np.random.default_rng([cfg.seed, 100]))
    target_rng = np.random.default_rng([cfg.seed, 101])
    batches_per_epoch = len(xs_all) // cfg.batch_size
    monitor = HistoryMonitor(run_name)

    logger.info(
        f"[{run_name}] 开始训练: 层级分配 {cfg.level_assignment}, λ={cfg.mmd_lambda}, "
        f"域适应={'开' if cfg.use_da else '关'}, {cfg.epochs} 轮 × {batches_per_epoch} 批"
    )

    for epoch in range(1, cfg.epochs + 1):
        for b in range(batches_per_epoch):
            idx = sampler.sample()
            xt = None
            if xt_all is not None:
                t_idx = target_rng.choice(len(xt_all), size=cfg.batch_size, replace=len(xt_all) < cfg.batch_size)
                xt = xt_all[t_idx]

            result = batch_objectives(model, xs_all[idx], ys_all[idx], xt, tree, cfg)
            monitor.record_batch(result.triplet, result.mmd, result.ce)

            for net, grads, state in zip(nets, [*result.extractor_grads, result.classifier_grads], states):
                sgd_step(net, grads, state)

            logger.debug(
                f"[{run_name}] 轮 {epoch} 批 {b + 1}: 三元组数 {result.n_triplets}, ce={result.ce:.4f}"
            )

        monitor.close_epoch(accuracy(model, splits.val_target))

    if splits.train_target.label_reads != reads_before:
        raise MaskedLabelAccessError(
            f"训练期间读取了 {splits.train_target.label_reads - reads_before} 次目标域训练集标签"
        )

    model.history = list(monitor.records)
    summary = monitor.get_monitoring_summary()
    logger.info(f"[{run_name}] 训练完成: 最终 ce={summary['final_ce']:.4f}, 验证集准确率={summary['final_val_acc']:.4f}")
    return model


def _config_echo(cfg: TrainConfig) -> Dict[str, Any]:
    echo = dataclasses.asdict(cfg)
    return {key: list(value) if isinstance(value, tuple) else value for key, value in echo.items()}


def write_run(model: TrainedModel, run_dir: Union[str, Path], extra: Optional[Dict[str, Any]] = None):
    """
    写出运行目录：config.echo, checkpoint.final, history.csv

    Args:
        model: 训练好的模型
        run_dir: 运行目录
        extra: 附加到 config.echo 的信息（如数据集路径）
    """
    run_dir = Path(run_dir)
    echo = {"train": _config_echo(model.config), "d_in": model.d_in, "n_fine": model.n_fine, **(extra or {})}
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / CONFIG_ECHO).write_text(json.dumps(echo, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        write_history(model.history, run_dir / HISTORY_FILE)
    except OSError as e:
        raise CheckpointError(f"写入运行目录失败 {run_dir}: {e}")

    save_checkpoint(
        run_dir / CHECKPOINT_FILE,
        model.nets(),
        seed=model.config.seed,
        epoch=len(model.history),
        extra={"config": _config_echo(model.config)},
    )
    logger.info(f"运行目录已写入 {run_dir}")


def load_run(run_dir: Union[str, Path]) -> TrainedModel:
    """从运行目录恢复模型（训练历史缺失时为空）"""
    run_dir = Path(run_dir)
    header, nets = load_checkpoint(run_dir / CHECKPOINT_FILE)

    try:
        cfg = TrainConfig(**header["config"])
        extractors = [nets[name] for name in EXTRACTOR_NAMES]
        classifier = nets[CLASSIFIER_NAME]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"检查点缺少模型信息 {run_dir}: {e}")

    history: List[EpochRecord] = []
    history_path = run_dir / HISTORY_FILE
    if history_path.exists():
        try:
            history = read_history(history_path)
        except (OSError, ValueError) as e:
            logger.warning(f"读取训练历史失败 {history_path}: {e}")

    return TrainedModel(extractors=extractors, classifier=classifier, config=cfg, history=history)
