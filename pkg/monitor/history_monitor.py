"""
训练历史监控模块
逐批累计各项损失，按轮汇总，检测训练发散并提示交叉熵停滞
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
import pandas as pd

HISTORY_COLUMNS = ["epoch", "lt1", "lt2", "lt3", "mmd1", "mmd2", "mmd3", "ce", "val_acc"]


class DivergenceError(Exception):
    """训练发散（损失出现 NaN 或无穷）"""

    pass


@dataclass
class EpochRecord:
    """单轮训练记录：三个提取器的三元组/MMD 损失、分类交叉熵与验证集准确率"""

    epoch: int
    lt1: float
    lt2: float
    lt3: float
    mmd1: float
    mmd2: float
    mmd3: float
    ce: float
    val_acc: float

    def to_row(self) -> List:
        return [getattr(self, name) for name in HISTORY_COLUMNS]


class HistoryMonitor:
    """训练历史监控器"""

    def __init__(self, run_name: str = "run", plateau_patience: int = 5, plateau_tol: float = 1e-4):
        """
        初始化监控器

        Args:
            run_name: 运行名称（日志前缀）
            plateau_patience: 交叉熵连续多少轮无改善时发出警告
            plateau_tol: 视为改善的最小下降量
        """
        self.run_name = run_name
        self.plateau_patience = plateau_patience
        self.plateau_tol = plateau_tol
        self.logger = logging.getLogger(__name__)

        self.records: List[EpochRecord] = []
        self._batch_losses: List[List[float]] = []
        self._best_ce = math.inf
        self._stale_epochs = 0

    @property
    def epoch(self) -> int:
        """当前（未结束）轮次，从 1 开始"""
        return len(self.records) + 1

    def record_batch(self, triplet_losses: Sequence[float], mmd_losses: Sequence[float], ce: float):
        """
        记录一个批次的损失

        Args:
            triplet_losses: 三个提取器的三元组损失
            mmd_losses: 三个提取器的 MMD 损失
            ce: 分类交叉熵

        Raises:
            DivergenceError: 任一损失非有限
        """
        values = [float(v) for v in (*triplet_losses, *mmd_losses, ce)]
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(
                f"[{self.run_name}] 第 {self.epoch} 轮第 {len(self._batch_losses) + 1} 批损失非有限: {values}"
            )
        self._batch_losses.append(values)

    def close_epoch(self, val_acc: float = math.nan) -> EpochRecord:
        """
        结束当前轮，汇总批均值

        Args:
            val_acc: 验证集 top-1 准确率（无验证集时为 NaN）

        Returns:
            EpochRecord: 本轮记录
        """
        if self._batch_losses:
            means = np.mean(np.asarray(self._batch_losses, dtype=np.float64), axis=0).tolist()
        else:
            means = [math.nan] * 7

        record = EpochRecord(self.epoch, *means, val_acc=float(val_acc))
        self.records.append(record)
        self._batch_losses = []

        self.logger.info(
            f"[{self.run_name}] 轮 {record.epoch}: "
            f"triplet=({record.lt1:.4f}, {record.lt2:.4f}, {record.lt3:.4f}) "
            f"mmd=({record.mmd1:.4f}, {record.mmd2:.4f}, {record.mmd3:.4f}) "
            f"ce={record.ce:.4f} val_acc={record.val_acc:.4f}"
        )
        self._check_plateau(record)
        return record

    def _check_plateau(self, record: EpochRecord):
        """交叉熵停滞检查"""
        if record.ce < self._best_ce - self.plateau_tol:
            self._best_ce = record.ce
            self._stale_epochs = 0
            return

        self._stale_epochs += 1
        if self._stale_epochs == self.plateau_patience:
            self.logger.warning(
                f"[{self.run_name}] 交叉熵已连续 {self._stale_epochs} 轮未下降 (最佳 {self._best_ce:.4f})"
            )

    def get_monitoring_summary(self) -> Dict:
        """
        获取监控摘要

        Returns:
            Dict: 轮数、最终/最佳损失与准确率
        """
        if not self.records:
            return {"epochs": 0}

        last = self.records[-1]
        return {
            "epochs": len(self.records),
            "final_ce": last.ce,
            "best_ce": min(r.ce for r in self.records),
            "final_val_acc": last.val_acc,
            "stale_epochs": self._stale_epochs,
        }


def write_history(records: Sequence[EpochRecord], path: Union[str, Path]):
    frame = pd.DataFrame([r.to_row() for r in records], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.6g", lineterminator="\n")


def read_history(path: Union[str, Path]) -> List[EpochRecord]:
    """读取 history.csv"""
    frame = pd.read_csv(path)
    if list(frame.columns) != HISTORY_COLUMNS:
        raise ValueError(f"history.csv 列不匹配: {list(frame.columns)}")
    return [
        EpochRecord(int(row[0]), *(float(v) for v in row[1:]))
        for row in frame.itertuples(index=False, name=None)
    ]
