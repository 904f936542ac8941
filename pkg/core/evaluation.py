"""
模型评估
top-1 准确率、类原型、余弦相似度指示函数、混淆倾向指标 M，以及实验汇总表输出
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config.settings import VARIANT_LEVELS
from core.datagen import Sample, stack_features, stack_labels
from core.hierarchy import HierarchyTree
from core.pipeline import TrainedModel

logger = logging.getLogger(__name__)

EVAL_FILE = "eval.json"
FLOAT_FORMAT = "%.6g"

ABLATION_COLUMNS = ["variant", "levels", "n_seeds", "top1_mean", "top1_std"]
MAIN_COLUMNS = ["method", "n_seeds", "top1_mean", "top1_std"]
DA_COLUMNS = ["method", "use_da", "n_seeds", "top1_mean", "top1_std"]
M_COLUMNS = ["method", "c1", "c2", "n_seeds", "m_self", "m_confused"]
SWEEP_COLUMNS = [
    "lambda",
    "ours_top1_mean",
    "ours_top1_std",
    "baseline_top1_mean",
    "baseline_top1_std",
    "n_seeds",
]
PROJECTION_COLUMNS = ["pc1", "pc2", "y3", "name"]

MAIN_METHODS = ("baseline", "ours")
STUDY_PRIORITY = {"train": 0, "ablate": 1}
RUN_IDENTITY = ["variant", "seed", "use_da", "mmd_lambda"]


class EvalError(Exception):
    """评估相关异常"""

    pass


class EmptySplitError(EvalError):
    """评估集为空"""

    pass


class MissingClassError(EvalError):
    """参考集缺少某个细类"""

    pass


class DegeneratePrototypeError(EvalError):
    """类原型范数为零"""

    pass


class ZeroVectorError(EvalError):
    """特征向量范数为零，余弦相似度无定义"""

    pass


class NoSamplesOfClassError(EvalError):
    """评估集中没有该类样本"""

    pass


class ReportIOError(EvalError):
    """报告文件读写失败"""

    pass


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """每个细类一个原型向量（融合特征空间）"""

    prototypes: np.ndarray
    source_split_id: str = "train_source"

    def __post_init__(self):
        norms = np.linalg.norm(self.prototypes, axis=1)
        degenerate = np.flatnonzero(norms == 0)
        if degenerate.size:
            raise DegeneratePrototypeError(f"类原型范数为零: {degenerate.tolist()}")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def width(self) -> int:
        return self.prototypes.shape[1]


def top1(model: TrainedModel, split: Sequence[Sample]) -> float:
    """
    top-1 准确率

    Args:
        model: 模型
        split: 评估样本

    Returns:
        float: 正确数 / 总数
    """
    if not split:
        raise EmptySplitError("评估集为空")
    correct = int(np.sum(model.predict(stack_features(split)) == stack_labels(split, 3)))
    return correct / len(split)


def class_prototypes(
    model: TrainedModel,
    reference_split: Sequence[Sample],
    n_classes: Optional[int] = None,
    source_split_id: str = "train_source",
) -> PrototypeSet:
    """
    类原型：参考集上每个细类融合特征的均值

    Args:
        model: 模型
        reference_split: 带标签的参考集（源域训练集）
        n_classes: 细类数，默认取分类器输出维度
        source_split_id: 参考集来源标记

    Returns:
        PrototypeSet: 原型集合
    """
    n_classes = n_classes or model.n_fine
    if not reference_split:
        raise MissingClassError("参考集为空")

    features = model.fuse(stack_features(reference_split))
    labels = stack_labels(reference_split, 3)

    missing = [c for c in range(n_classes) if not np.any(labels == c)]
    if missing:
        raise MissingClassError(f"参考集缺少细类: {missing}")

    prototypes = np.stack([features[labels == c].mean(axis=0) for c in range(n_classes)])
    return PrototypeSet(prototypes=prototypes, source_split_id=source_split_id)


def cosine_similarities(features: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """n×C 余弦相似度矩阵"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError("特征向量范数为零")
    unit = features / norms[:, None]
    proto_unit = protos.prototypes / np.linalg.norm(protos.prototypes, axis=1)[:, None]
    return unit @ proto_unit.T


def prototype_winners(features: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """
    每个样本余弦相似度严格最大的原型类别；最大值并列时为 -1

    Args:
        features: n×W 融合特征
        protos: 原型集合

    Returns:
        np.ndarray: 长度 n 的类别编号
    """
    sims = cosine_similarities(features, protos)
    best = np.argmax(sims, axis=1)
    top = sims[np.arange(len(sims)), best]
    unique = np.sum(sims == top[:, None], axis=1) == 1
    return np.where(unique, best, -1)


def indicator(f: np.ndarray, protos: PrototypeSet, i: int) -> int:
    """f 与 P_i 的余弦相似度是否严格大于与其他所有原型的相似度"""
    return int(prototype_winners(np.asarray(f)[None, :], protos)[0] == i)


def _m_from_winners(winners: np.ndarray, labels: np.ndarray, c1: int, c2: int) -> float:
    members = labels == c1
    if not np.any(members):
        raise NoSamplesOfClassError(f"评估集中没有细类 {c1} 的样本")
    return float(np.sum(winners[members] == c2)) / int(np.sum(members))


def m_metric(
    model: TrainedModel, split: Sequence[Sample], protos: PrototypeSet, c1: int, c2: int
) -> float:
    """
    混淆倾向 M(C1, C2)：C1 类样本中指示函数对 C2 触发的比例

    Args:
        model: 模型
        split: 评估集
        protos: 原型集合
        c1: 真实类别
        c2: 被比较的类别

    Returns:
        float: [0, 1] 内的比例
    """
    labels = stack_labels(split, 3)
    if not np.any(labels == c1):
        raise NoSamplesOfClassError(f"评估集中没有细类 {c1} 的样本")
    winners = prototype_winners(model.fuse(stack_features(split)), protos)
    return _m_from_winners(winners, labels, c1, c2)


def m_table(
    model: TrainedModel,
    split: Sequence[Sample],
    protos: PrototypeSet,
    pairs: Iterable[Tuple[int, int]],
) -> Dict[Tuple[int, int], Tuple[float, float]]:
    """
    一组类对的 (M(C1,C1), M(C1,C2))

    Returns:
        Dict: (C1, C2) -> (m_self, m_confused)
    """
    labels = stack_labels(split, 3)
    winners = prototype_winners(model.fuse(stack_features(split)), protos)
    return {
        (c1, c2): (_m_from_winners(winners, labels, c1, c1), _m_from_winners(winners, labels, c1, c2))
        for c1, c2 in pairs
    }


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """行为真实类别、列为预测类别的计数矩阵"""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> Dict[int, float]:
    """每个出现过的类别的准确率"""
    totals = cm.sum(axis=1)
    return {c: float(cm[c, c]) / int(totals[c]) for c in range(len(cm)) if totals[c] > 0}


def top_confused_pairs(cm: np.ndarray, k: int = 5) -> List[Tuple[int, int, int]]:
    """
    非对角元最大的 k 个 (真实, 预测, 次数)，次数相同时按类别编号升序

    Returns:
        List[Tuple[int, int, int]]: 仅包含次数大于 0 的类对
    """
    pairs = [
        (int(cm[i, j]), i, j)
        for i in range(cm.shape[0])
        for j in range(cm.shape[1])
        if i != j and cm[i, j] > 0
    ]
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    return [(i, j, count) for count, i, j in pairs[:k]]


def pca_2d(features: np.ndarray) -> np.ndarray:
    """
    中心化后投影到前两个主成分；每个主成分的最大绝对分量取正号

    Args:
        features: n×W

    Returns:
        np.ndarray: n×2 坐标（秩不足时补零）
    """
    features = np.asarray(features, dtype=np.float64)
    centered = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    signs = np.sign(components[np.arange(len(components)), np.argmax(np.abs(components), axis=1)])
    signs[signs == 0] = 1.0
    projected = centered @ (components * signs[:, None]).T
    if projected.shape[1] < 2:
        projected = np.hstack([projected, np.zeros((len(projected), 2 - projected.shape[1]))])
    return projected


@dataclass
class EvalReport:
    """单次运行的评估结果"""

    top1: float
    per_class_accuracy: Dict[str, float] = field(default_factory=dict)
    m_table: List[Dict[str, Any]] = field(default_factory=list)
    confused_pairs: List[Dict[str, Any]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "top1": self.top1,
            "per_class_accuracy": self.per_class_accuracy,
            "m_table": self.m_table,
            "confused_pairs": self.confused_pairs,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            top1=float(data["top1"]),
            per_class_accuracy=dict(data.get("per_class_accuracy", {})),
            m_table=list(data.get("m_table", [])),
            confused_pairs=list(data.get("confused_pairs", [])),
            metadata=dict(data.get("metadata", {})),
        )

    def write_json(self, path: Union[str, Path]):
        """写出 eval.json（键排序，便于逐字节比较）"""
        try:
            Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        except OSError as e:
            raise ReportIOError(f"写入评估报告失败 {path}: {e}")

    @classmethod
    def read_json(cls, path: Union[str, Path]) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ReportIOError(f"读取评估报告失败 {path}: {e}")
        except (ValueError, KeyError) as e:
            raise ReportIOError(f"评估报告格式错误 {path}: {e}")


def evaluate_model(
    model: TrainedModel,
    train_source: Sequence[Sample],
    test_split: Sequence[Sample],
    tree: HierarchyTree,
    m_pairs: Sequence[Tuple[Any, Any]] = (),
    top_k: int = 5,
    metadata: Optional[Dict[str, Any]] = None,
) -> EvalReport:
    """
    完整评估：top-1、每类准确率、配置类对与经验混淆最多的 top_k 类对的 M 值

    原型由带标签的源域训练集构建，目标域标签只在测试集上使用。

    Args:
        model: 模型
        train_source: 源域训练集（构建原型）
        test_split: 目标域测试集
        tree: 类别层级（类名解析）
        m_pairs: 以名称或编号给出的 (C1, C2) 类对
        top_k: 追加的经验混淆类对数量
        metadata: 写入报告的元数据

    Returns:
        EvalReport: 评估报告
    """
    if not test_split:
        raise EmptySplitError("测试集为空")

    x = stack_features(test_split)
    labels = stack_labels(test_split, 3)
    preds = model.predict(x)
    cm = confusion_matrix(labels, preds, tree.n_fine)
    accuracy = int(np.trace(cm)) / len(test_split)

    confused = top_confused_pairs(cm, top_k)
    pairs: List[Tuple[int, int]] = []
    for c1, c2 in [(tree.fine_index(a), tree.fine_index(b)) for a, b in m_pairs] + [
        (i, j) for i, j, _ in confused
    ]:
        if (c1, c2) not in pairs:
            pairs.append((c1, c2))

    protos = class_prototypes(model, train_source, tree.n_fine)
    winners = prototype_winners(model.fuse(x), protos)
    m_rows = []
    present = set(labels.tolist())
    for c1, c2 in pairs:
        if c1 not in present:
            logger.warning(f"测试集中没有类别 {tree.fine_name(c1)}，跳过 M 指标")
            continue
        m_rows.append(
            {
                "c1": tree.fine_name(c1),
                "c2": tree.fine_name(c2),
                "m_self": _m_from_winners(winners, labels, c1, c1),
                "m_confused": _m_from_winners(winners, labels, c1, c2),
            }
        )

    report = EvalReport(
        top1=accuracy,
        per_class_accuracy={tree.fine_name(c): acc for c, acc in per_class_accuracy(cm).items()},
        m_table=m_rows,
        confused_pairs=[
            {"c1": tree.fine_name(i), "c2": tree.fine_name(j), "count": count} for i, j, count in confused
        ],
        metadata={**(metadata or {}), "n_test": len(test_split)},
    )
    logger.info(f"评估完成: top-1={accuracy:.4f} ({int(np.trace(cm))}/{len(test_split)})")
    return report


def load_reports(root: Union[str, Path]) -> List[EvalReport]:
    """收集 root 下所有运行目录中的 eval.json（按路径排序）"""
    return [EvalReport.read_json(path) for path in sorted(Path(root).glob(f"*/{EVAL_FILE}"))]


def _frame(results: Sequence[EvalReport]) -> pd.DataFrame:
    rows = []
    for r in results:
        meta = r.metadata
        rows.append(
            {
                "variant": meta.get("variant"),
                "use_da": bool(meta.get("use_da", True)),
                "mmd_lambda": float(meta.get("mmd_lambda", 1.0)),
                "seed": meta.get("seed"),
                "study": meta.get("study", "train"),
                "top1": r.top1,
            }
        )
    return pd.DataFrame(rows, columns=["variant", "use_da", "mmd_lambda", "seed", "study", "top1"])


def _summarize(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    grouped = frame.groupby(keys, sort=False)["top1"]
    out = grouped.agg(n_seeds="count", top1_mean="mean", top1_std=lambda s: s.std(ddof=0))
    return out.reset_index()


def _ablation_table(frame: pd.DataFrame) -> pd.DataFrame:
    rows = frame[frame["study"] == "ablate"]
    if rows.empty:
        return pd.DataFrame(columns=ABLATION_COLUMNS)
    table = _summarize(rows, ["variant"])
    order = {name: k for k, name in enumerate(VARIANT_LEVELS)}
    table = table.sort_values("variant", key=lambda s: s.map(order))
    table["levels"] = table["variant"].map(lambda v: "-".join(str(l) for l in VARIANT_LEVELS[v]))
    return table[ABLATION_COLUMNS]


def _one_per_run(frame: pd.DataFrame) -> pd.DataFrame:
    """train 与 ablate 研究中同一 (变体, 种子, DA, λ) 只保留一行，train 优先；保持原行序"""
    rows = frame[frame["study"].isin(STUDY_PRIORITY)]
    priority = rows["study"].map(STUDY_PRIORITY)
    kept = rows.loc[priority.sort_values(kind="stable").index].drop_duplicates(RUN_IDENTITY, keep="first")
    return kept.sort_index()


def _main_table(frame: pd.DataFrame) -> pd.DataFrame:
    rows = _one_per_run(frame)
    rows = rows[rows["use_da"] & rows["variant"].isin(MAIN_METHODS)]
    if rows.empty:
        return pd.DataFrame(columns=MAIN_COLUMNS)
    table = _summarize(rows, ["variant"]).rename(columns={"variant": "method"})
    table = table.sort_values("method", key=lambda s: s.map(MAIN_METHODS.index))
    return table[MAIN_COLUMNS]


def _da_table(frame: pd.DataFrame) -> pd.DataFrame:
    rows = _one_per_run(frame)
    rows = rows[rows["variant"].isin(MAIN_METHODS)]
    if rows.empty:
        return pd.DataFrame(columns=DA_COLUMNS)
    table = _summarize(rows, ["variant", "use_da"]).rename(columns={"variant": "method"})
    table = table.sort_values(["method", "use_da"], key=lambda s: s.map(MAIN_METHODS.index) if s.name == "method" else s)
    return table[DA_COLUMNS]


def _m_table(results: Sequence[EvalReport], frame: pd.DataFrame) -> pd.DataFrame:
    runs = _one_per_run(frame)
    rows = []
    # frame 的行号与 results 的下标一一对应
    for k in runs.index[runs["use_da"].to_numpy(dtype=bool)]:
        for row in results[k].m_table:
            rows.append({"method": results[k].metadata.get("variant"), **row})
    if not rows:
        return pd.DataFrame(columns=M_COLUMNS)

    m_frame = pd.DataFrame(rows)
    table = (
        m_frame.groupby(["method", "c1", "c2"], sort=False)
        .agg(n_seeds=("m_self", "count"), m_self=("m_self", "mean"), m_confused=("m_confused", "mean"))
        .reset_index()
    )
    order = {name: k for k, name in enumerate(VARIANT_LEVELS)}
    table = table.sort_values("method", key=lambda s: s.map(order), kind="stable")
    return table[M_COLUMNS]


def _sweep_table(frame: pd.DataFrame) -> pd.DataFrame:
    rows = frame[(frame["study"] == "sweep") & frame["variant"].isin(MAIN_METHODS)]
    if rows.empty:
        return pd.DataFrame(columns=SWEEP_COLUMNS)

    summary = _summarize(rows, ["mmd_lambda", "variant"])
    table = pd.DataFrame({"lambda": sorted(summary["mmd_lambda"].unique())})
    for method in ("ours", "baseline"):
        part = summary[summary["variant"] == method].set_index("mmd_lambda")
        table[f"{method}_top1_mean"] = table["lambda"].map(part["top1_mean"])
        table[f"{method}_top1_std"] = table["lambda"].map(part["top1_std"])
    table["n_seeds"] = table["lambda"].map(summary.groupby("mmd_lambda")["n_seeds"].min())
    return table[SWEEP_COLUMNS]


def emit_report(
    results: Sequence[EvalReport],
    path: Union[str, Path],
    projection: Optional[pd.DataFrame] = None,
) -> Dict[str, Path]:
    """
    写出实验汇总表

    table_ablation.csv / table_main.csv / table_da.csv / table_m.csv / lambda_sweep.csv /
    features_2d.csv；没有适用结果的表只写表头

    Args:
        results: 评估报告列表
        path: 输出目录
        projection: 融合特征的二维 PCA 投影（列 pc1, pc2, y3, name）

    Returns:
        Dict[str, Path]: 文件名 -> 路径
    """
    out_dir = Path(path)
    frame = _frame(results)
    tables = {
        "table_ablation.csv": _ablation_table(frame),
        "table_main.csv": _main_table(frame),
        "table_da.csv": _da_table(frame),
        "table_m.csv": _m_table(results, frame),
        "lambda_sweep.csv": _sweep_table(frame),
        "features_2d.csv": (
            projection[PROJECTION_COLUMNS] if projection is not None else pd.DataFrame(columns=PROJECTION_COLUMNS)
        ),
    }

    written = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, table in tables.items():
            target = out_dir / name
            table.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            written[name] = target
    except OSError as e:
        raise ReportIOError(f"写入报告失败 {out_dir}: {e}")

    logger.info(f"报告已写入 {out_dir}: {', '.join(f'{n}({len(t)})' for n, t in tables.items())}")
    return written


def projection_frame(model: TrainedModel, split: Sequence[Sample], tree: HierarchyTree) -> pd.DataFrame:
    """测试集融合特征的二维 PCA 投影表"""
    points = pca_2d(model.fuse(stack_features(split)))
    labels = stack_labels(split, 3)
    return pd.DataFrame(
        {
            "pc1": points[:, 0],
            "pc2": points[:, 1],
            "y3": labels,
            "name": [tree.fine_name(int(c)) for c in labels],
        }
    )
