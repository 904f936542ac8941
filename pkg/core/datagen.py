"""
合成双域数据集
按类别层级生成分层高斯混合样本，目标域施加旋转+平移的协变量偏移，
并提供按类别比例的目标域划分与数据集文件读写
"""

import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.hierarchy import (
    COARSE,
    MIDDLE,
    HierarchyError,
    HierarchyTree,
    hierarchy_from_names,
)

logger = logging.getLogger(__name__)

DATASET_FORMAT = "hierfuse-dataset v1"

SOURCE = "source"
TARGET = "target"

SPLIT_NAMES = ("train_source", "train_target", "val_target", "test_target")


class DatagenError(Exception):
    """数据生成相关异常"""

    pass


class BadConfigError(DatagenError):
    """生成配置无效"""

    pass


class InfeasibleCountsError(DatagenError):
    """划分数量无法满足"""

    pass


class DatasetIOError(DatagenError):
    """数据集文件读写失败"""

    pass


class SchemaMismatchError(DatagenError):
    """数据集文件版本或列不匹配"""

    pass


class MaskedLabelAccessError(DatagenError):
    """训练代码读取了被屏蔽的目标域标签"""

    pass


@dataclass(frozen=True, eq=False)
class Sample:
    """单个样本：特征向量、域标记和三层标签"""

    x: np.ndarray
    domain: str
    y1: int
    y2: int
    y3: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.domain == other.domain
            and (self.y1, self.y2, self.y3) == (other.y1, other.y2, other.y3)
            and self.x.dtype == other.x.dtype
            and np.array_equal(self.x, other.x)
        )

    __hash__ = None


@dataclass(frozen=True)
class GenConfig:
    """解析后的生成配置（类对已映射为细类标签）"""

    tree: HierarchyTree
    d_in: int = 32
    per_class_source: int = 80
    per_class_target: int = 40
    target_class_counts: Optional[Tuple[int, ...]] = None
    coarse_spread: float = 6.0
    middle_spread: float = 3.0
    fine_spread: float = 1.5
    noise_sigma: float = 2.5
    shift_rotation_angle: float = 0.35
    shift_translation_norm: float = 10.0
    confusable_pairs: Tuple[Tuple[int, int, float], ...] = ()
    seed: int = 0

    @classmethod
    def from_settings(cls, settings, tree: HierarchyTree) -> "GenConfig":
        """
        由配置节（config.settings.DatagenConfig）构建，按名称解析易混淆类对

        Args:
            settings: datagen 配置节
            tree: 层级树

        Returns:
            GenConfig: 解析后的生成配置
        """
        pairs = []
        for name_a, name_b, proximity in settings.confusable_pairs:
            try:
                pairs.append((tree.fine_index(name_a), tree.fine_index(name_b), float(proximity)))
            except HierarchyError as e:
                raise BadConfigError(f"易混淆类对无法解析: {e}")

        counts = settings.target_class_counts
        cfg = cls(
            tree=tree,
            d_in=settings.d_in,
            per_class_source=settings.per_class_source,
            per_class_target=settings.per_class_target,
            target_class_counts=tuple(counts) if counts is not None else None,
            coarse_spread=float(settings.coarse_spread),
            middle_spread=float(settings.middle_spread),
            fine_spread=float(settings.fine_spread),
            noise_sigma=float(settings.noise_sigma),
            shift_rotation_angle=float(settings.shift_rotation_angle),
            shift_translation_norm=float(settings.shift_translation_norm),
            confusable_pairs=tuple(pairs),
            seed=settings.seed,
        )
        cfg.validate()
        return cfg

    def target_counts(self) -> List[int]:
        """每个细类的目标域样本数"""
        if self.target_class_counts is not None:
            return list(self.target_class_counts)
        return [self.per_class_target] * self.tree.n_fine

    def validate(self) -> bool:
        """校验生成配置，失败时抛出 BadConfigError"""
        if self.d_in < 2:
            raise BadConfigError(f"输入维度必须至少为2: {self.d_in}")
        if self.per_class_source < 1 or self.per_class_target < 1:
            raise BadConfigError("每类样本数必须至少为1")
        if self.target_class_counts is not None:
            if len(self.target_class_counts) != self.tree.n_fine:
                raise BadConfigError(
                    f"目标域每类样本数长度 {len(self.target_class_counts)} 与细类数 {self.tree.n_fine} 不一致"
                )
            if min(self.target_class_counts) < 1:
                raise BadConfigError("目标域每类样本数必须至少为1")
        for name in ("coarse_spread", "middle_spread", "fine_spread", "noise_sigma"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise BadConfigError(f"{name} 必须为正: {value}")
        if not np.isfinite(self.shift_rotation_angle) or not np.isfinite(self.shift_translation_norm):
            raise BadConfigError("域偏移参数必须为有限值")
        if self.shift_translation_norm < 0:
            raise BadConfigError(f"平移范数不能为负: {self.shift_translation_norm}")
        for fine_a, fine_b, proximity in self.confusable_pairs:
            if not (0 <= fine_a < self.tree.n_fine and 0 <= fine_b < self.tree.n_fine) or fine_a == fine_b:
                raise BadConfigError(f"易混淆类对无效: ({fine_a}, {fine_b})")
            if not 0 < proximity <= 1:
                raise BadConfigError(f"接近系数必须在 (0, 1] 之间: {proximity}")
        return True

    def to_dict(self) -> Dict[str, Any]:
        """可写入 JSON 的配置回显（含层级记录）"""
        return {
            "hierarchy": [list(record) for record in self.tree.to_records()],
            "d_in": self.d_in,
            "per_class_source": self.per_class_source,
            "per_class_target": self.per_class_target,
            "target_class_counts": (
                list(self.target_class_counts) if self.target_class_counts is not None else None
            ),
            "coarse_spread": self.coarse_spread,
            "middle_spread": self.middle_spread,
            "fine_spread": self.fine_spread,
            "noise_sigma": self.noise_sigma,
            "shift_rotation_angle": self.shift_rotation_angle,
            "shift_translation_norm": self.shift_translation_norm,
            "confusable_pairs": [
                [self.tree.fine_name(a), self.tree.fine_name(b), p] for a, b, p in self.confusable_pairs
            ],
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MixtureCenters:
    """生成时抽取的混合中心与域偏移参数"""

    coarse: np.ndarray
    middle: np.ndarray
    fine: np.ndarray
    translation: np.ndarray
    rotation_angle: float


def rotate_blockwise(x: np.ndarray, angle: float) -> np.ndarray:
    """
    在坐标平面 (0,1), (2,3), ... 上分别做同一角度的旋转；维度为奇数时最后一维不变

    Args:
        x: n×d 矩阵
        angle: 旋转角（弧度）

    Returns:
        np.ndarray: 旋转后的矩阵
    """
    out = np.array(x, dtype=np.float64, copy=True)
    c, s = np.cos(angle), np.sin(angle)
    even = x[:, 0 : x.shape[1] - 1 : 2]
    odd = x[:, 1 : x.shape[1] : 2]
    out[:, 0 : x.shape[1] - 1 : 2] = c * even - s * odd
    out[:, 1 : x.shape[1] : 2] = s * even + c * odd
    return out


def _draw_centers(cfg: GenConfig, rng: np.random.Generator) -> MixtureCenters:
    tree = cfg.tree
    f2m = np.asarray(tree.fine_to_middle)
    m2c = np.asarray(tree.middle_to_coarse)

    coarse = rng.normal(0.0, cfg.coarse_spread, size=(tree.n_coarse, cfg.d_in))
    middle = coarse[m2c] + rng.normal(0.0, cfg.middle_spread, size=(tree.n_middle, cfg.d_in))
    fine = middle[f2m] + rng.normal(0.0, cfg.fine_spread, size=(tree.n_fine, cfg.d_in))

    # 依次把 C2 的中心拉向 C1
    for fine_a, fine_b, proximity in cfg.confusable_pairs:
        fine[fine_b] = fine[fine_a] + proximity * (fine[fine_b] - fine[fine_a])

    direction = rng.normal(size=cfg.d_in)
    direction /= np.linalg.norm(direction)

    return MixtureCenters(
        coarse=coarse,
        middle=middle,
        fine=fine,
        translation=cfg.shift_translation_norm * direction,
        rotation_angle=cfg.shift_rotation_angle,
    )


def mixture_centers(cfg: GenConfig) -> MixtureCenters:
    """返回与 generate 相同种子下的混合中心（诊断用）"""
    cfg.validate()
    return _draw_centers(cfg, np.random.default_rng(cfg.seed))


def generate(cfg: GenConfig) -> List[Sample]:
    """
    生成源域与目标域样本

    源域样本 = 细类中心 + 各向同性噪声；目标域样本先从同一混合中独立抽取，
    再做分块旋转并平移。同一种子生成的数据完全一致。

    Args:
        cfg: 生成配置

    Returns:
        List[Sample]: 先全部源域样本（按细类顺序），后全部目标域样本
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers = _draw_centers(cfg, rng)
    tree = cfg.tree

    samples: List[Sample] = []

    def emit(x: np.ndarray, domain: str, fine: int):
        y1 = tree.ancestor(fine, COARSE)
        y2 = tree.ancestor(fine, MIDDLE)
        for row in x:
            samples.append(Sample(x=row, domain=domain, y1=y1, y2=y2, y3=fine))

    for fine in range(tree.n_fine):
        x = centers.fine[fine] + cfg.noise_sigma * rng.normal(size=(cfg.per_class_source, cfg.d_in))
        emit(x, SOURCE, fine)

    for fine, count in enumerate(cfg.target_counts()):
        z = centers.fine[fine] + cfg.noise_sigma * rng.normal(size=(count, cfg.d_in))
        emit(rotate_blockwise(z, centers.rotation_angle) + centers.translation, TARGET, fine)

    n_source = cfg.per_class_source * tree.n_fine
    logger.info(f"生成数据集: 源域 {n_source} 个样本, 目标域 {len(samples) - n_source} 个样本")
    return samples


class MaskedSplit:
    """
    标签被屏蔽的目标域训练集

    features() 可自由读取；masked 状态下调用 labels() 会计数并抛出 MaskedLabelAccessError。
    评估与序列化通过 unmasked() 上下文访问完整样本。
    """

    def __init__(self, samples: Sequence[Sample]):
        self._samples = tuple(samples)
        self._masked = True
        self._lock = threading.Lock()
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self._samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskedSplit):
            return NotImplemented
        return self._samples == other._samples

    __hash__ = None

    def features(self) -> np.ndarray:
        """n×d 特征矩阵（无标签）"""
        return stack_features(self._samples)

    def labels(self) -> np.ndarray:
        """细类标签；masked 状态下禁止访问"""
        with self._lock:
            if self._masked:
                self.label_reads += 1
                raise MaskedLabelAccessError("训练阶段禁止读取目标域训练集标签")
        return np.array([s.y3 for s in self._samples], dtype=np.int64)

    @contextmanager
    def unmasked(self) -> Iterator[Tuple[Sample, ...]]:
        """临时解除屏蔽，产出完整样本"""
        with self._lock:
            previous = self._masked
            self._masked = False
        try:
            yield self._samples
        finally:
            with self._lock:
                self._masked = previous


@dataclass
class Splits:
    """数据集划分"""

    train_source: List[Sample]
    train_target: MaskedSplit
    val_target: List[Sample]
    test_target: List[Sample]
    seed: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)

    def tree(self) -> HierarchyTree:
        """从元数据恢复生成所用的层级树"""
        records = self.meta.get("gen", {}).get("hierarchy")
        if not records:
            raise SchemaMismatchError("数据集元数据中缺少层级信息")
        return hierarchy_from_names(records)

    @property
    def d_in(self) -> int:
        return int(self.train_source[0].x.shape[0]) if self.train_source else 0


def stack_features(samples: Sequence[Sample]) -> np.ndarray:
    """把样本特征堆叠成 n×d 矩阵"""
    if not samples:
        return np.zeros((0, 0), dtype=np.float64)
    return np.stack([s.x for s in samples]).astype(np.float64, copy=False)


def stack_labels(samples: Sequence[Sample], level: int = 3) -> np.ndarray:
    """样本在指定层级的标签"""
    attr = {1: "y1", 2: "y2", 3: "y3"}[level]
    return np.array([getattr(s, attr) for s in samples], dtype=np.int64)


def _proportional_quota(
    counts: np.ndarray, capacity: np.ndarray, total: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """按类别比例向下取整分配 n 个名额，余数按随机顺序逐类补 1"""
    if total == 0:
        quota = np.zeros_like(counts)
    else:
        quota = np.minimum((n * counts) // total, capacity)
    remainder = n - int(quota.sum())
    order = rng.permutation(len(counts))

    while remainder > 0:
        progressed = False
        for c in order:
            if remainder == 0:
                break
            if quota[c] < capacity[c]:
                quota[c] += 1
                remainder -= 1
                progressed = True
        if not progressed:
            raise InfeasibleCountsError(f"无法分配剩余的 {remainder} 个名额")

    return quota


def split(samples: Sequence[Sample], counts: Tuple[int, int], seed: int = 0, meta: Optional[Dict[str, Any]] = None) -> Splits:
    """
    按细类比例划分目标域

    Args:
        samples: generate 的输出
        counts: (n_train_target, n_val_target)；其余目标域样本进入测试集
        seed: 划分种子
        meta: 附加元数据（通常为生成配置回显）

    Returns:
        Splits: 划分结果，各划分内保持原始样本顺序

    Raises:
        InfeasibleCountsError: 名额为负或超过目标域样本总数
    """
    n_train, n_val = counts
    source = [s for s in samples if s.domain == SOURCE]
    target = [s for s in samples if s.domain == TARGET]

    if n_train < 0 or n_val < 0:
        raise InfeasibleCountsError(f"划分数量不能为负: {counts}")
    if n_train + n_val > len(target):
        raise InfeasibleCountsError(
            f"划分数量 {n_train}+{n_val} 超过目标域样本数 {len(target)}"
        )

    classes = sorted({s.y3 for s in target})
    by_class = {c: [i for i, s in enumerate(target) if s.y3 == c] for c in classes}
    class_counts = np.array([len(by_class[c]) for c in classes], dtype=np.int64)

    rng = np.random.default_rng(seed)
    train_quota = _proportional_quota(class_counts, class_counts, len(target), n_train, rng)
    val_quota = _proportional_quota(
        class_counts, class_counts - train_quota, len(target), n_val, rng
    )

    train_idx: List[int] = []
    val_idx: List[int] = []
    test_idx: List[int] = []
    for k, c in enumerate(classes):
        members = np.asarray(by_class[c])[rng.permutation(len(by_class[c]))]
        t, v = int(train_quota[k]), int(val_quota[k])
        train_idx.extend(members[:t].tolist())
        val_idx.extend(members[t : t + v].tolist())
        test_idx.extend(members[t + v :].tolist())

    splits = Splits(
        train_source=source,
        train_target=MaskedSplit([target[i] for i in sorted(train_idx)]),
        val_target=[target[i] for i in sorted(val_idx)],
        test_target=[target[i] for i in sorted(test_idx)],
        seed=seed,
        meta=json.loads(json.dumps({**(meta or {}), "counts": [n_train, n_val]})),
    )
    logger.info(
        f"目标域划分: train={len(splits.train_target)}, val={len(splits.val_target)}, "
        f"test={len(splits.test_target)}"
    )
    return splits


def summary(splits: Splits) -> Dict[str, Any]:
    """数据集计数摘要"""
    with splits.train_target.unmasked() as train_target:
        target = list(train_target) + splits.val_target + splits.test_target
    per_class: Dict[int, int] = {}
    for s in target:
        per_class[s.y3] = per_class.get(s.y3, 0) + 1
    return {
        "source": len(splits.train_source),
        "target": len(target),
        "train_target": len(splits.train_target),
        "val_target": len(splits.val_target),
        "test_target": len(splits.test_target),
        "target_per_class": dict(sorted(per_class.items())),
    }


def save_dataset(splits: Splits, path: Union[str, Path]):
    """
    写出数据集文件

    文件以 # 开头的头部行记录格式版本、种子与元数据，
    正文为 CSV：split,domain,y1,y2,y3,x_0,...,x_{D-1}，浮点数保留 17 位有效数字

    Args:
        splits: 数据集划分
        path: 输出路径

    Raises:
        DatasetIOError: 写入失败
    """
    path = Path(path)
    with splits.train_target.unmasked() as train_target:
        groups = zip(SPLIT_NAMES, (splits.train_source, train_target, splits.val_target, splits.test_target))
        rows = [(name, s) for name, members in groups for s in members]

    d_in = splits.d_in
    columns = ["split", "domain", "y1", "y2", "y3"] + [f"x_{j}" for j in range(d_in)]
    frame = pd.DataFrame(
        [[name, s.domain, s.y1, s.y2, s.y3, *s.x.tolist()] for name, s in rows],
        columns=columns,
    )

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# format: {DATASET_FORMAT}\n")
            f.write(f"# seed: {splits.seed}\n")
            f.write(f"# meta: {json.dumps(splits.meta, sort_keys=True)}\n")
            frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"写入数据集失败 {path}: {e}")

    logger.info(f"数据集已写入 {path} ({len(rows)} 行)")


def _read_header(path: Path) -> Dict[str, str]:
    header: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(":")
            header[key.strip()] = value.strip()
    return header


def load_dataset(path: Union[str, Path]) -> Splits:
    """
    读取数据集文件

    Args:
        path: 数据集路径

    Returns:
        Splits: 与写出时逐位相同的划分

    Raises:
        DatasetIOError: 文件不存在或无法读取
        SchemaMismatchError: 格式版本或列不匹配
    """
    path = Path(path)
    try:
        header = _read_header(path)
        if header.get("format") != DATASET_FORMAT:
            raise SchemaMismatchError(
                f"数据集格式不匹配: 期望 {DATASET_FORMAT!r}, 实际 {header.get('format')!r}"
            )
        frame = pd.read_csv(
            path,
            comment="#",
            float_precision="round_trip",
            dtype={"split": str, "domain": str},
        )
    except OSError as e:
        raise DatasetIOError(f"读取数据集失败 {path}: {e}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaMismatchError(f"数据集正文无法解析 {path}: {e}")

    fixed = ["split", "domain", "y1", "y2", "y3"]
    x_columns = [c for c in frame.columns if c not in fixed]
    if list(frame.columns[: len(fixed)]) != fixed or x_columns != [f"x_{j}" for j in range(len(x_columns))]:
        raise SchemaMismatchError(f"数据集列不匹配: {list(frame.columns)[:8]}...")

    try:
        seed = int(header.get("seed", "0"))
        meta = json.loads(header.get("meta", "{}"))
    except ValueError as e:
        raise SchemaMismatchError(f"数据集头部无法解析: {e}")

    x = frame[x_columns].to_numpy(dtype=np.float64)
    labels = frame[["y1", "y2", "y3"]].to_numpy(dtype=np.int64)
    groups: Dict[str, List[Sample]] = {name: [] for name in SPLIT_NAMES}
    for i, (name, domain) in enumerate(zip(frame["split"], frame["domain"])):
        if name not in groups:
            raise SchemaMismatchError(f"未知划分名: {name}")
        y1, y2, y3 = (int(v) for v in labels[i])
        groups[name].append(Sample(x=x[i].copy(), domain=domain, y1=y1, y2=y2, y3=y3))

    logger.info(f"已读取数据集 {path} ({len(frame)} 行)")
    return Splits(
        train_source=groups["train_source"],
        train_target=MaskedSplit(groups["train_target"]),
        val_target=groups["val_target"],
        test_target=groups["test_target"],
        seed=seed,
        meta=meta,
    )
