"""
配置文件管理器
提供实验配置的加载、验证和管理功能
"""

import copy
import json
import math
from dataclasses import dataclass, asdict, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple


class ConfigError(Exception):
    """配置相关异常"""

    pass


class LogLevel(str, Enum):
    """日志级别枚举"""

    DEBUG = "debug"
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"


# 每个特征提取器使用的标签层级（1=粗, 2=中, 3=细），行顺序与消融表一致
VARIANT_LEVELS: Dict[str, Tuple[int, int, int]] = {
    "baseline": (3, 3, 3),
    "baseline_w_coarse": (1, 3, 3),
    "baseline_w_middle": (3, 2, 3),
    "ours": (1, 2, 3),
}

# 易混淆细类对 (C1, C2)：C1 的样本最容易被错分为 C2
DEFAULT_CONFUSABLE_PAIRS: List[Tuple[str, str]] = [
    ("3068b", "6564"),
    ("44728", "3298"),
    ("6564", "3020"),
    ("85080", "6141"),
    ("87087", "85080"),
]

MINING_MODES = ("batch_hard", "all")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass
class DatagenConfig:
    """合成双域数据生成配置"""

    hierarchy_file: Optional[str] = None
    d_in: int = 32
    per_class_source: int = 80
    per_class_target: int = 40
    target_class_counts: Optional[List[int]] = None
    coarse_spread: float = 6.0
    middle_spread: float = 3.0
    fine_spread: float = 1.5
    noise_sigma: float = 2.5
    shift_rotation_angle: float = 0.35
    shift_translation_norm: float = 10.0
    # [C1, C2, 接近系数]；C2 的中心被拉向 C1
    confusable_pairs: List[List[Any]] = field(
        default_factory=lambda: [
            ["87087", "85080", 0.25],
            ["85080", "6141", 0.25],
            ["3068b", "6564", 0.25],
            ["6564", "3020", 0.25],
            ["44728", "3298", 0.25],
        ]
    )
    seed: int = 0

    def validate(self):
        """验证生成配置"""
        for name in ("d_in", "per_class_source", "per_class_target", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} 必须为整数: {value!r}")

        if self.d_in < 2:
            raise ConfigError(f"输入维度必须至少为2: {self.d_in}")

        if self.per_class_source < 1 or self.per_class_target < 1:
            raise ConfigError("每类样本数必须大于0")

        if self.target_class_counts is not None:
            if not all(
                isinstance(c, int) and not isinstance(c, bool) and c >= 1
                for c in self.target_class_counts
            ):
                raise ConfigError(f"目标域每类样本数必须为正整数: {self.target_class_counts}")

        for name in ("coarse_spread", "middle_spread", "fine_spread", "noise_sigma"):
            value = getattr(self, name)
            if not _is_number(value) or not value > 0 or not math.isfinite(value):
                raise ConfigError(f"{name} 必须为正数: {value!r}")

        for name in ("shift_rotation_angle", "shift_translation_norm"):
            value = getattr(self, name)
            if not _is_number(value) or not math.isfinite(value):
                raise ConfigError(f"{name} 必须为有限实数: {value!r}")

        if self.shift_translation_norm < 0:
            raise ConfigError(f"平移范数不能为负: {self.shift_translation_norm}")

        for pair in self.confusable_pairs:
            if not isinstance(pair, (list, tuple)) or len(pair) != 3:
                raise ConfigError(f"易混淆类对格式应为 [C1, C2, 接近系数]: {pair!r}")
            proximity = pair[2]
            if not _is_number(proximity) or not 0 < proximity <= 1:
                raise ConfigError(f"接近系数必须在 (0, 1] 之间: {pair!r}")

        return True


@dataclass
class SplitConfig:
    """目标域划分配置"""

    n_train_target: int = 150
    n_val_target: int = 30
    seed: int = 0

    def validate(self):
        """验证划分配置"""
        for name in ("n_train_target", "n_val_target", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError(f"{name} 必须为非负整数: {value!r}")
        return True


@dataclass
class TrainConfig:
    """训练配置（变体、损失权重、优化器与采样设置）"""

    variant: str = "ours"
    level_assignment: Tuple[int, int, int] = (1, 2, 3)
    mmd_lambda: float = 1.0
    alpha: float = 0.3
    use_da: bool = True
    epochs: int = 30
    batch_size: int = 8
    pk_classes: int = 4
    pk_samples: int = 2
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    d_feat: int = 16
    hidden_dims: Tuple[int, ...] = (64, 64)
    ce_backprop_to_extractors: bool = False
    mining: str = "batch_hard"

    def __post_init__(self):
        # JSON 中读出的是列表
        self.level_assignment = tuple(self.level_assignment)
        self.hidden_dims = tuple(self.hidden_dims)

    def validate(self):
        """验证训练配置"""
        if len(self.level_assignment) != 3 or any(
            level not in (1, 2, 3) for level in self.level_assignment
        ):
            raise ConfigError(f"层级分配必须是三个 {{1,2,3}} 中的值: {self.level_assignment}")

        expected = VARIANT_LEVELS.get(self.variant)
        if expected is not None and expected != self.level_assignment:
            raise ConfigError(
                f"变体 {self.variant} 的层级分配应为 {expected}，实际为 {self.level_assignment}"
            )
        if expected is None and self.variant != "custom":
            raise ConfigError(f"未知变体: {self.variant}")

        for name in ("epochs", "batch_size", "pk_classes", "pk_samples", "d_feat", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{name} 必须为整数: {value!r}")

        if self.epochs < 1:
            raise ConfigError(f"训练轮数必须至少为1: {self.epochs}")

        if self.pk_classes < 2 or self.pk_samples < 2:
            raise ConfigError(
                f"PK采样要求 P>=2 且 K>=2: P={self.pk_classes}, K={self.pk_samples}"
            )

        if self.batch_size != self.pk_classes * self.pk_samples:
            raise ConfigError(
                f"批大小必须等于 P*K: {self.batch_size} != {self.pk_classes}*{self.pk_samples}"
            )

        if self.d_feat < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("网络维度必须为正")

        for name in ("mmd_lambda", "alpha", "lr", "momentum", "weight_decay"):
            value = getattr(self, name)
            if not _is_number(value) or value < 0 or not math.isfinite(value):
                raise ConfigError(f"{name} 必须为非负有限实数: {value!r}")

        if self.mining not in MINING_MODES:
            raise ConfigError(f"三元组挖掘方式必须是 {MINING_MODES} 之一: {self.mining}")

        return True


@dataclass
class EvalConfig:
    """评估配置"""

    m_pairs: List[List[str]] = field(
        default_factory=lambda: [list(pair) for pair in DEFAULT_CONFUSABLE_PAIRS]
    )
    top_confused: int = 5
    pca_export: bool = True

    def validate(self):
        """验证评估配置"""
        for pair in self.m_pairs:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ConfigError(f"M 指标类对格式应为 [C1, C2]: {pair!r}")

        if not isinstance(self.top_confused, int) or self.top_confused < 0:
            raise ConfigError(f"top_confused 必须为非负整数: {self.top_confused!r}")

        return True


@dataclass
class GridConfig:
    """实验网格配置"""

    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    jobs: int = 1
    lambdas: List[float] = field(default_factory=lambda: [0.2, 0.5, 1.0, 2.0, 4.0])
    variants: List[str] = field(default_factory=lambda: list(VARIANT_LEVELS))

    def validate(self):
        """验证网格配置"""
        if not self.seeds:
            raise ConfigError("随机种子列表不能为空")

        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError(f"并行任务数必须大于0: {self.jobs!r}")

        for lam in self.lambdas:
            if not _is_number(lam) or not lam > 0:
                raise ConfigError(f"λ 扫描值必须为正: {lam!r}")

        for variant in self.variants:
            if variant not in VARIANT_LEVELS:
                raise ConfigError(f"未知变体: {variant}")

        return True


@dataclass
class LogConfig:
    """日志配置"""

    debug_mode: bool = False
    log_file: str = "logs/hierfuse.log"
    log_level: LogLevel = LogLevel.INFO

    def validate(self):
        """验证日志配置"""
        if not self.log_file:
            raise ConfigError("日志文件路径不能为空")

        if not self.log_file.endswith(".log"):
            self.log_file = f"{self.log_file}.log"

        return True

    def get_effective_log_level(self) -> int:
        """获取实际生效的日志级别（考虑debug_mode）"""
        if self.debug_mode:
            return 10  # logging.DEBUG
        return {
            LogLevel.DEBUG: 10,
            LogLevel.INFO: 20,
            LogLevel.WARNING: 30,
            LogLevel.ERROR: 40,
        }.get(self.log_level, 20)


@dataclass
class DatabaseConfig:
    """网格任务登记数据库配置"""

    db_file: str = "runs.db"

    def validate(self):
        """验证数据库配置"""
        if not self.db_file:
            raise ConfigError("数据库文件路径不能为空")

        if not self.db_file.endswith(".db"):
            self.db_file = f"{self.db_file}.db"

        return True


@dataclass
class Config:
    """
    主配置类
    整合所有子配置并提供统一接口
    """

    datagen: DatagenConfig
    split: SplitConfig
    train: TrainConfig
    eval: EvalConfig
    grid: GridConfig
    log: LogConfig
    database: DatabaseConfig

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> "Config":
        """
        从字典创建配置对象

        Args:
            config_dict: 配置字典（按模块分节）

        Returns:
            Config: 配置对象
        """
        if not isinstance(config_dict, dict):
            raise ConfigError("配置文件顶层必须是对象")

        unknown = set(config_dict) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"未知配置节: {sorted(unknown)}")

        return cls(
            datagen=cls._extract_section(config_dict, "datagen", DatagenConfig),
            split=cls._extract_section(config_dict, "split", SplitConfig),
            train=cls._extract_train_config(config_dict),
            eval=cls._extract_section(config_dict, "eval", EvalConfig),
            grid=cls._extract_section(config_dict, "grid", GridConfig),
            log=cls._extract_log_config(config_dict),
            database=cls._extract_section(config_dict, "database", DatabaseConfig),
        )

    @staticmethod
    def _extract_section(data: Dict[str, Any], name: str, section_cls):
        """提取一个配置节，拒绝未知键"""
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"配置节 {name} 必须是对象")

        known = {f.name for f in fields(section_cls)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"配置节 {name} 中存在未知键: {sorted(unknown)}")

        try:
            return section_cls(**section)
        except TypeError as e:
            raise ConfigError(f"配置节 {name} 格式错误: {e}")

    @staticmethod
    def _extract_train_config(data: Dict[str, Any]) -> TrainConfig:
        """提取训练配置；只给出变体名时自动填充层级分配"""
        section = dict(data.get("train", {}) or {})
        variant = section.get("variant")
        if variant in VARIANT_LEVELS and "level_assignment" not in section:
            section["level_assignment"] = list(VARIANT_LEVELS[variant])
        return Config._extract_section({"train": section}, "train", TrainConfig)

    @staticmethod
    def _extract_log_config(data: Dict[str, Any]) -> LogConfig:
        """提取日志配置"""
        log_config = Config._extract_section(data, "log", LogConfig)
        # 根据debug_mode自动设置log_level
        log_config.log_level = LogLevel.DEBUG if log_config.debug_mode else LogLevel(
            log_config.log_level
        )
        return log_config

    @classmethod
    def default(cls) -> "Config":
        """全部使用默认值的配置"""
        return cls.from_dict({})

    def validate(self) -> bool:
        """
        验证所有配置

        Returns:
            bool: 配置是否有效

        Raises:
            ConfigError: 配置验证失败
        """
        validators = [
            self.datagen.validate,
            self.split.validate,
            self.train.validate,
            self.eval.validate,
            self.grid.validate,
            self.log.validate,
            self.database.validate,
        ]

        for validator in validators:
            try:
                validator()
            except ConfigError:
                raise
            except (TypeError, ValueError) as e:
                raise ConfigError(f"配置值类型错误: {e}")

        return True

    def get_summary(self) -> List[Tuple[str, Any]]:
        """获取用于日志输出的配置摘要"""
        return [
            ("输入维度", self.datagen.d_in),
            ("每类源域/目标域样本", f"{self.datagen.per_class_source}/{self.datagen.per_class_target}"),
            ("域偏移", f"旋转={self.datagen.shift_rotation_angle}, 平移={self.datagen.shift_translation_norm}"),
            ("目标域划分", f"train={self.split.n_train_target}, val={self.split.n_val_target}"),
            ("训练变体", f"{self.train.variant} {self.train.level_assignment}"),
            ("λ / α", f"{self.train.mmd_lambda} / {self.train.alpha}"),
            ("域适应", self.train.use_da),
            ("优化器", f"lr={self.train.lr}, momentum={self.train.momentum}, wd={self.train.weight_decay}"),
            ("轮数 / 批大小", f"{self.train.epochs} / {self.train.batch_size}"),
            ("随机种子", self.grid.seeds),
            ("并行任务", self.grid.jobs),
            ("调试模式", self.log.debug_mode),
        ]

    def to_dict(self) -> Dict[str, Any]:
        """
        转换为字典格式

        Returns:
            Dict[str, Any]: 可写回 JSON 的配置
        """
        result = {}
        for f in fields(self):
            section = asdict(getattr(self, f.name))
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
                elif isinstance(value, Enum):
                    section[key] = value.value
            result[f.name] = section
        return result


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """按节合并配置字典，overrides 优先"""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:
    """
    配置管理器
    负责配置的加载、保存和验证
    """

    # 全规模：3000 张合成图（每类200），1688 张真实图（每类70~150），750/75/863 划分
    FULL_SCALE_OVERRIDES = {
        "datagen": {
            "per_class_source": 200,
            "target_class_counts": [
                150, 120, 120, 95, 130, 88, 142, 76, 110, 101, 125, 84, 118, 92, 137
            ],
        },
        "split": {"n_train_target": 750, "n_val_target": 75},
        "train": {
            "lr": 0.0001,
            "momentum": 0.9,
            "weight_decay": 0.0005,
            "batch_size": 8,
            "epochs": 60,
        },
    }

    PRESETS = {"default": {}, "full": FULL_SCALE_OVERRIDES}

    def __init__(self, config_file: Optional[str] = None):
        """
        初始化配置管理器

        Args:
            config_file: 配置文件路径，None 表示使用默认配置
        """
        self.config_file = Path(config_file) if config_file else None
        self.config: Optional[Config] = None

    def load(self, preset: str = "default") -> Config:
        """
        加载配置

        Args:
            preset: 预设名称，预设覆盖默认值，配置文件再覆盖预设

        Returns:
            Config: 配置对象

        Raises:
            ConfigError: 配置文件缺失、格式错误、预设未知或验证失败
        """
        if preset not in self.PRESETS:
            raise ConfigError(f"未知预设: {preset}")

        config_data: Dict[str, Any] = {}
        if self.config_file is not None:
            if not self.config_file.exists():
                raise ConfigError(f"配置文件不存在: {self.config_file}")

            try:
                with open(self.config_file, "r", encoding="utf-8") as f:
                    config_data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"配置文件JSON格式错误: {e}")
            except OSError as e:
                raise ConfigError(f"读取配置文件失败: {e}")

            if not isinstance(config_data, dict):
                raise ConfigError("配置文件顶层必须是对象")

        self.config = Config.from_dict(deep_merge(self.PRESETS[preset], config_data))
        self.config.validate()
        return self.config

    def save(self, config: Config) -> bool:
        """
        保存配置

        Args:
            config: 配置对象

        Returns:
            bool: 是否成功保存
        """
        if self.config_file is None:
            raise ConfigError("未指定配置文件路径")

        try:
            self.config_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_file, "w", encoding="utf-8") as f:
                json.dump(config.to_dict(), f, indent=2, ensure_ascii=False)
            return True
        except OSError as e:
            raise ConfigError(f"保存配置文件失败: {e}")


__all__ = [
    "Config",
    "ConfigManager",
    "ConfigError",
    "DatagenConfig",
    "SplitConfig",
    "TrainConfig",
    "EvalConfig",
    "GridConfig",
    "LogConfig",
    "DatabaseConfig",
    "VARIANT_LEVELS",
    "DEFAULT_CONFUSABLE_PAIRS",
    "deep_merge",
]
