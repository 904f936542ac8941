"""
层级特征融合核心模块
"""

from .hierarchy import HierarchyTree, build_hierarchy, lego15_default, load_hierarchy
from .datagen import GenConfig, Splits, generate, load_dataset, save_dataset, split
from .pipeline import TrainedModel, fuse, predict, train, load_run, write_run
from .evaluation import EvalReport, class_prototypes, emit_report, evaluate_model, m_metric, top1
from .storage import RunStore, Run
from .grid import GridRunner, RunRequest, grid_requests

__all__ = [
    "HierarchyTree",
    "build_hierarchy",
    "lego15_default",
    "load_hierarchy",
    "GenConfig",
    "Splits",
    "generate",
    "load_dataset",
    "save_dataset",
    "split",
    "TrainedModel",
    "fuse",
    "predict",
    "train",
    "load_run",
    "write_run",
    "EvalReport",
    "class_prototypes",
    "emit_report",
    "evaluate_model",
    "m_metric",
    "top1",
    "RunStore",
    "Run",
    "GridRunner",
    "RunRequest",
    "grid_requests",
]
