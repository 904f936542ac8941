"""
损失函数
分层三元组损失（batch-hard 挖掘）、多核 MMD 与交叉熵，均返回对输入特征的解析梯度
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# 多核 MMD 的带宽倍数
KERNEL_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


class LossError(Exception):
    """损失计算相关异常"""

    pass


class IndexOutOfRangeError(LossError):
    """三元组索引越界"""

    pass


class BatchTooSmallError(LossError):
    """批内样本过少"""

    pass


class LabelOutOfRangeError(LossError):
    """标签超出类别范围"""

    pass


@dataclass(frozen=True)
class Triplet:
    """批内索引三元组 (anchor, positive, negative)"""

    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class KernelBank:
    """高斯核族：k(u,v) = exp(-|u-v|^2 / (2 sigma^2))，权重非负且和为 1"""

    bandwidths: Tuple[float, ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        if not self.bandwidths or len(self.bandwidths) != len(self.weights):
            raise LossError("核族至少需要一个核，且带宽与权重数量一致")
        if not all(np.isfinite(s) and s > 0 for s in self.bandwidths):
            raise LossError(f"带宽必须为正的有限值: {self.bandwidths}")
        if min(self.weights) < 0 or not np.isclose(sum(self.weights), 1.0):
            raise LossError(f"核权重必须非负且和为 1: {self.weights}")


@dataclass(frozen=True)
class Bandwidth:
    """中位数启发式结果；degenerate 表示批内点全部重合，已回退为 sigma=1"""

    sigma: float
    degenerate: bool = False


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    """非平方欧氏距离矩阵 n×n"""
    features = np.asarray(features, dtype=np.float64)
    return np.sqrt(_sq_dists(features, features))


def _validate_batch(features: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise LossError(f"特征形状 {features.shape} 与标签长度 {labels.shape} 不匹配")
    return features, labels


def mine_hard_triplets(features: np.ndarray, labels: Sequence[int]) -> List[Triplet]:
    """
    batch-hard 三元组挖掘

    对每个同时拥有同类与异类样本的锚点，取距离最远的正样本与最近的负样本；
    缺少正样本或负样本的锚点跳过。距离相同时取索引最小者。

    Args:
        features: n×d 特征
        labels: 挖掘层级上的标签

    Returns:
        List[Triplet]: 按锚点顺序的三元组，可能为空
    """
    features, labels = _validate_batch(features, labels)
    n = features.shape[0]
    if n < 2:
        return []

    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)

    return [
        Triplet(int(a), int(hardest_pos[a]), int(hardest_neg[a])) for a in np.flatnonzero(valid)
    ]


def mine_all_triplets(features: np.ndarray, labels: Sequence[int]) -> List[Triplet]:
    """穷举所有合法三元组（a != p，标签 a==p，a!=n）"""
    features, labels = _validate_batch(features, labels)
    n = len(labels)
    return [
        Triplet(a, p, q)
        for a in range(n)
        for p in range(n)
        if p != a and labels[p] == labels[a]
        for q in range(n)
        if labels[q] != labels[a]
    ]


def triplet_loss(
    features: np.ndarray, triplets: Sequence[Triplet], alpha: float
) -> Tuple[float, np.ndarray]:
    """
    三元组损失：mean_N max(|f_a - f_p| - |f_a - f_n| + alpha, 0)，距离不取平方

    Args:
        features: n×d 特征
        triplets: 挖掘得到的三元组，N = len(triplets)
        alpha: 间隔

    Returns:
        (损失值, n×d 特征梯度)；空三元组列表返回 0 和零梯度
    """
    features = np.asarray(features, dtype=np.float64)
    if alpha < 0:
        raise LossError(f"间隔必须非负: {alpha}")

    grad = np.zeros_like(features)
    if not triplets:
        return 0.0, grad

    idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64)
    n = features.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise IndexOutOfRangeError(f"三元组索引超出批大小 {n}")

    a, p, q = idx[:, 0], idx[:, 1], idx[:, 2]
    diff_ap = features[a] - features[p]
    diff_an = features[a] - features[q]
    d_ap = np.sqrt(np.sum(diff_ap * diff_ap, axis=1))
    d_an = np.sqrt(np.sum(diff_an * diff_an, axis=1))

    hinge = d_ap - d_an + alpha
    count = len(triplets)
    loss = float(np.sum(np.maximum(hinge, 0.0)) / count)

    active = hinge > 0
    if not active.any():
        return loss, grad

    # 距离为 0 时取次梯度 0
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_ap = np.where(d_ap[:, None] > 0, diff_ap / d_ap[:, None], 0.0)
        unit_an = np.where(d_an[:, None] > 0, diff_an / d_an[:, None], 0.0)

    unit_ap = unit_ap[active] / count
    unit_an = unit_an[active] / count
    np.add.at(grad, a[active], unit_ap - unit_an)
    np.add.at(grad, p[active], -unit_ap)
    np.add.at(grad, q[active], unit_an)
    return loss, grad


def median_bandwidth(features_joint: np.ndarray) -> Bandwidth:
    """
    中位数启发式：sigma^2 = median(成对平方距离, i<j) / 2

    Args:
        features_joint: 源域与目标域特征堆叠后的 m×d 矩阵

    Returns:
        Bandwidth: 带宽；所有点重合时回退 sigma=1 并标记 degenerate
    """
    features_joint = np.asarray(features_joint, dtype=np.float64)
    m = features_joint.shape[0]
    if m < 2:
        raise BatchTooSmallError(f"估计带宽至少需要 2 个样本: {m}")

    sq = _sq_dists(features_joint, features_joint)[np.triu_indices(m, k=1)]
    sigma = float(np.sqrt(np.median(sq) / 2.0))
    if not np.isfinite(sigma) or sigma == 0.0:
        logger.debug("批内特征全部重合，带宽回退为 1")
        return Bandwidth(sigma=1.0, degenerate=True)
    return Bandwidth(sigma=sigma)


def kernel_bank(sigma_base: float, scales: Sequence[float] = KERNEL_SCALES) -> KernelBank:
    """以 sigma_base 为中心的均匀权重高斯核族"""
    return KernelBank(
        bandwidths=tuple(float(sigma_base * s) for s in scales),
        weights=tuple(1.0 / len(scales) for _ in scales),
    )


def mmd_loss(
    source_feats: np.ndarray, target_feats: np.ndarray, bank: KernelBank
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    有偏（V 统计量）多核 MMD 估计

    sum_k w_k [mean k(s,s') + mean k(t,t') - 2 mean k(s,t)]

    Args:
        source_feats: n_s×d 源域特征
        target_feats: n_t×d 目标域特征
        bank: 核族

    Returns:
        (非负损失值, 源域特征梯度, 目标域特征梯度)
    """
    s = np.asarray(source_feats, dtype=np.float64)
    t = np.asarray(target_feats, dtype=np.float64)
    ns, nt = s.shape[0], t.shape[0]
    if ns < 2 or nt < 2:
        raise BatchTooSmallError(f"MMD 要求两侧至少各 2 个样本: n_s={ns}, n_t={nt}")
    if s.shape[1] != t.shape[1]:
        raise LossError(f"源域与目标域特征维度不一致: {s.shape[1]} != {t.shape[1]}")

    d_ss = _sq_dists(s, s)
    d_tt = _sq_dists(t, t)
    d_st = _sq_dists(s, t)

    value = 0.0
    grad_s = np.zeros_like(s)
    grad_t = np.zeros_like(t)
    for sigma, weight in zip(bank.bandwidths, bank.weights):
        scale = 2.0 * sigma * sigma
        k_ss = np.exp(-d_ss / scale)
        k_tt = np.exp(-d_tt / scale)
        k_st = np.exp(-d_st / scale)

        value += weight * (k_ss.mean() + k_tt.mean() - 2.0 * k_st.mean())

        coef = weight / (sigma * sigma)
        grad_s += coef * (
            -2.0 / (ns * ns) * (s * k_ss.sum(axis=1)[:, None] - k_ss @ s)
            + 2.0 / (ns * nt) * (s * k_st.sum(axis=1)[:, None] - k_st @ t)
        )
        grad_t += coef * (
            -2.0 / (nt * nt) * (t * k_tt.sum(axis=1)[:, None] - k_tt @ t)
            + 2.0 / (ns * nt) * (t * k_st.sum(axis=0)[:, None] - k_st.T @ s)
        )

    return max(float(value), 0.0), grad_s, grad_t


def cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """
    平均交叉熵（log-sum-exp 稳定化）

    Args:
        logits: n×C
        labels: 细类标签

    Returns:
        (损失值, logits 梯度 (softmax - onehot)/n)
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.shape
    if n < 1 or labels.shape != (n,):
        raise LossError(f"logits 形状 {logits.shape} 与标签长度 {labels.shape} 不匹配")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelOutOfRangeError(f"标签超出范围 [0, {n_classes})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels]))

    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n
