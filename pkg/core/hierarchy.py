"""
三层类别层级
表示并校验 粗/中/细 三层类别树，回答三元组挖掘与数据生成所需的祖先查询
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# 层级编号：1 = 粗, 2 = 中, 3 = 细
COARSE = 1
MIDDLE = 2
FINE = 3
LEVELS = (COARSE, MIDDLE, FINE)


class HierarchyError(Exception):
    """类别层级相关异常"""

    pass


class ConflictingParentError(HierarchyError):
    """同一标签被分配了两个不同的父类"""

    pass


class EmptyLevelError(HierarchyError):
    """某一层没有任何标签"""

    pass


class NonDenseLabelsError(HierarchyError):
    """某层标签不是 0..n-1 的稠密整数"""

    pass


class UnknownLabelError(HierarchyError):
    """标签或类名不在层级中"""

    pass


class BadLevelError(HierarchyError):
    """层级编号不是 1/2/3"""

    pass


@dataclass(frozen=True)
class HierarchyTree:
    """
    三层类别树

    fine_to_middle[f] 给出细类 f 的中层父类，middle_to_coarse[m] 给出中类 m 的粗层父类。
    名称表与标签一一对应，用于按砖块编号（如 "85080"）查找。
    """

    fine_to_middle: Tuple[int, ...]
    middle_to_coarse: Tuple[int, ...]
    level_sizes: Tuple[int, int, int]
    fine_names: Tuple[str, ...] = ()
    middle_names: Tuple[str, ...] = ()
    coarse_names: Tuple[str, ...] = ()

    @property
    def n_fine(self) -> int:
        return self.level_sizes[2]

    @property
    def n_middle(self) -> int:
        return self.level_sizes[1]

    @property
    def n_coarse(self) -> int:
        return self.level_sizes[0]

    def ancestor(self, fine: int, level: int) -> int:
        """细类在指定层级上的标签"""
        return ancestor(self, fine, level)

    def labels_at_level(self, fine_labels: Union[Sequence[int], np.ndarray], level: int) -> np.ndarray:
        """
        批量映射细类标签到指定层级

        Args:
            fine_labels: 细类标签序列
            level: 目标层级 {1,2,3}

        Returns:
            np.ndarray: 对应层级的整数标签
        """
        _check_level(level)
        fine = np.asarray(fine_labels, dtype=np.int64)
        if fine.size and (fine.min() < 0 or fine.max() >= self.n_fine):
            raise UnknownLabelError(f"细类标签越界: 范围应为 [0, {self.n_fine})")

        if level == FINE:
            return fine.copy()

        middle = np.asarray(self.fine_to_middle, dtype=np.int64)[fine]
        if level == MIDDLE:
            return middle
        return np.asarray(self.middle_to_coarse, dtype=np.int64)[middle]

    def fine_index(self, name: Union[str, int]) -> int:
        """按名称查找细类标签；整数原样校验后返回"""
        if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
            if not 0 <= int(name) < self.n_fine:
                raise UnknownLabelError(f"未知细类标签: {name}")
            return int(name)

        try:
            return self.fine_names.index(str(name))
        except ValueError:
            raise UnknownLabelError(f"未知细类名称: {name}")

    def fine_name(self, fine: int) -> str:
        """细类名称，无名称表时返回数字字符串"""
        if self.fine_names:
            return self.fine_names[fine]
        return str(fine)

    def children(self, level: int, label: int) -> List[int]:
        """
        某个粗类或中类的直接子类

        Args:
            level: 父类所在层级（1 或 2）
            label: 父类标签

        Returns:
            List[int]: 下一层的子类标签（升序）
        """
        if level == COARSE:
            parents = self.middle_to_coarse
        elif level == MIDDLE:
            parents = self.fine_to_middle
        else:
            raise BadLevelError(f"只有粗层和中层有子类: level={level}")

        if not 0 <= label < self.level_sizes[level - 1]:
            raise UnknownLabelError(f"层级 {level} 上不存在标签 {label}")

        return [child for child, parent in enumerate(parents) if parent == label]

    def validate(self) -> bool:
        """重新校验树的不变量"""
        _validate_maps(self.fine_to_middle, self.middle_to_coarse)
        expected = (max(self.middle_to_coarse) + 1, len(self.middle_to_coarse), len(self.fine_to_middle))
        if tuple(self.level_sizes) != expected:
            raise NonDenseLabelsError(f"层级大小 {self.level_sizes} 与映射不一致 {expected}")
        return True

    def to_records(self) -> List[Tuple[str, str, str]]:
        """按细类顺序导出 (细类名, 中类名, 粗类名) 记录"""
        records = []
        for fine in range(self.n_fine):
            middle = self.fine_to_middle[fine]
            coarse = self.middle_to_coarse[middle]
            records.append(
                (
                    self.fine_names[fine] if self.fine_names else str(fine),
                    self.middle_names[middle] if self.middle_names else str(middle),
                    self.coarse_names[coarse] if self.coarse_names else str(coarse),
                )
            )
        return records

    def describe(self) -> str:
        """用于日志的单行摘要"""
        n_coarse, n_middle, n_fine = self.level_sizes
        return f"粗类 {n_coarse} / 中类 {n_middle} / 细类 {n_fine}"


def _check_level(level: int):
    if level not in LEVELS:
        raise BadLevelError(f"层级必须是 1(粗)/2(中)/3(细): {level!r}")


def _is_label(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, (bool, np.bool_))


def _validate_maps(fine_to_middle: Sequence[int], middle_to_coarse: Sequence[int]):
    if not fine_to_middle or not middle_to_coarse:
        raise EmptyLevelError("层级中存在空层")

    for level_name, labels, size in (
        ("中", fine_to_middle, len(middle_to_coarse)),
        ("粗", middle_to_coarse, None),
    ):
        used = set(labels)
        n = size if size is not None else max(labels) + 1
        if used != set(range(n)):
            raise NonDenseLabelsError(f"{level_name}层标签不是稠密的 0..{n - 1}: {sorted(used)}")

    n_coarse = max(middle_to_coarse) + 1
    n_middle = len(middle_to_coarse)
    n_fine = len(fine_to_middle)
    if not n_coarse <= n_middle <= n_fine:
        raise NonDenseLabelsError(
            f"层级大小必须满足 粗 <= 中 <= 细: ({n_coarse}, {n_middle}, {n_fine})"
        )


def build_hierarchy(
    fine_assignments: Iterable[Tuple[int, int, int]],
    names: Optional[Tuple[Sequence[str], Sequence[str], Sequence[str]]] = None,
) -> HierarchyTree:
    """
    由 (细类, 中类, 粗类) 分配列表构建并校验层级树

    Args:
        fine_assignments: 每个细类一条 (fine, middle, coarse) 整数记录
        names: 可选的 (细类名, 中类名, 粗类名) 名称表

    Returns:
        HierarchyTree: 校验后的层级树

    Raises:
        ConflictingParentError: 同一细类指向两个中类，或同一中类指向两个粗类
        EmptyLevelError: 分配列表为空
        NonDenseLabelsError: 某层标签不稠密或层级大小不满足单调
    """
    assignments = list(fine_assignments)
    if not assignments:
        raise EmptyLevelError("类别分配列表为空")

    fine_parent: Dict[int, int] = {}
    middle_parent: Dict[int, int] = {}

    for record in assignments:
        if len(record) != 3 or not all(_is_label(v) for v in record):
            raise NonDenseLabelsError(f"类别分配必须是三个整数: {record!r}")
        fine, middle, coarse = (int(v) for v in record)
        if min(fine, middle, coarse) < 0:
            raise NonDenseLabelsError(f"标签不能为负: {record!r}")

        if fine_parent.setdefault(fine, middle) != middle:
            raise ConflictingParentError(
                f"细类 {fine} 同时属于中类 {fine_parent[fine]} 和 {middle}"
            )
        if middle_parent.setdefault(middle, coarse) != coarse:
            raise ConflictingParentError(
                f"中类 {middle} 同时属于粗类 {middle_parent[middle]} 和 {coarse}"
            )

    for level_name, parents in (("细", fine_parent), ("中", middle_parent)):
        if set(parents) != set(range(len(parents))):
            raise NonDenseLabelsError(f"{level_name}层标签不是稠密的 0..{len(parents) - 1}")

    fine_to_middle = tuple(fine_parent[f] for f in range(len(fine_parent)))
    middle_to_coarse = tuple(middle_parent[m] for m in range(len(middle_parent)))
    _validate_maps(fine_to_middle, middle_to_coarse)

    level_sizes = (max(middle_to_coarse) + 1, len(middle_to_coarse), len(fine_to_middle))

    fine_names: Tuple[str, ...] = ()
    middle_names: Tuple[str, ...] = ()
    coarse_names: Tuple[str, ...] = ()
    if names is not None:
        fine_names, middle_names, coarse_names = (tuple(str(n) for n in level) for level in names)
        if (len(coarse_names), len(middle_names), len(fine_names)) != level_sizes:
            raise NonDenseLabelsError(f"名称表大小与层级大小 {level_sizes} 不一致")
        if len(set(fine_names)) != len(fine_names):
            raise ConflictingParentError("细类名称重复")

    return HierarchyTree(
        fine_to_middle=fine_to_middle,
        middle_to_coarse=middle_to_coarse,
        level_sizes=level_sizes,
        fine_names=fine_names,
        middle_names=middle_names,
        coarse_names=coarse_names,
    )


def ancestor(tree: HierarchyTree, fine: int, level: int) -> int:
    """
    细类在指定层级上的祖先标签

    Args:
        tree: 层级树
        fine: 细类标签
        level: 1=粗, 2=中, 3=细

    Returns:
        int: 该层级的标签；level 3 返回 fine 本身
    """
    _check_level(level)
    if not _is_label(fine) or not 0 <= fine < tree.n_fine:
        raise UnknownLabelError(f"未知细类标签: {fine!r}")

    if level == FINE:
        return int(fine)
    middle = tree.fine_to_middle[fine]
    if level == MIDDLE:
        return middle
    return tree.middle_to_coarse[middle]


def hierarchy_from_names(records: Iterable[Tuple[str, str, str]]) -> HierarchyTree:
    """
    由 (细类名, 中类名, 粗类名) 记录构建层级，各层按首次出现顺序分配稠密编号

    Args:
        records: 名称记录

    Returns:
        HierarchyTree: 层级树
    """
    indices: Tuple[Dict[str, int], Dict[str, int], Dict[str, int]] = ({}, {}, {})
    assignments = []

    for record in records:
        if len(record) != 3:
            raise NonDenseLabelsError(f"层级记录必须有三列: {record!r}")
        fine, middle, coarse = (str(name).strip() for name in record)
        if fine in indices[0]:
            raise ConflictingParentError(f"细类 {fine} 重复出现")
        assignments.append(
            tuple(table.setdefault(name, len(table)) for table, name in zip(indices, (fine, middle, coarse)))
        )

    fine_names, middle_names, coarse_names = (tuple(table) for table in indices)
    return build_hierarchy(assignments, names=(fine_names, middle_names, coarse_names))


def load_hierarchy(path: Union[str, Path]) -> HierarchyTree:
    """
    读取层级文件：每行 `fine_name,middle_name,coarse_name`，忽略空行与 # 注释

    Args:
        path: 文件路径

    Returns:
        HierarchyTree: 层级树
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise HierarchyError(f"读取层级文件失败 {path}: {e}")

    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [part.strip() for part in line.split(",")]
        if len(parts) != 3 or not all(parts):
            raise NonDenseLabelsError(f"{path}:{line_no} 格式应为 fine,middle,coarse: {line!r}")
        records.append(tuple(parts))

    tree = hierarchy_from_names(records)
    logger.info(f"已加载层级文件 {path}: {tree.describe()}")
    return tree


def save_hierarchy(tree: HierarchyTree, path: Union[str, Path]):
    """按层级文件格式写出"""
    path = Path(path)
    lines = [",".join(record) for record in tree.to_records()]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise HierarchyError(f"写入层级文件失败 {path}: {e}")


# 15 个细类（砖块编号）-> 10 个中类 -> 3 个粗类。
# 85080 与 3062b 同属 "bricks round"，该中类与 "bricks special" 同属 "bricks"。
LEGO15_RECORDS: Tuple[Tuple[str, str, str], ...] = (
    ("85080", "bricks round", "bricks"),
    ("3062b", "bricks round", "bricks"),
    ("87087", "bricks special", "bricks"),
    ("3001", "bricks", "bricks"),
    ("3003", "bricks", "bricks"),
    ("6141", "plates round", "plates"),
    ("4032", "plates round", "plates"),
    ("3020", "plates", "plates"),
    ("3023", "plates", "plates"),
    ("44728", "plates special", "plates"),
    ("3068b", "tiles", "plates"),
    ("3298", "slopes", "slopes"),
    ("3040", "slopes", "slopes"),
    ("6564", "slopes corner", "slopes"),
    ("15068", "slopes curved", "slopes"),
)


def lego15_default() -> HierarchyTree:
    """Lego-15 的固定层级：(3, 10, 15)"""
    return hierarchy_from_names(LEGO15_RECORDS)
