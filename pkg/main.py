"""
hierfuse 命令行入口
gen / train / eval / ablate / sweep / report 六个子命令，输出全部位于 --out 目录下
"""

import os

# 每个训练运行内部单线程，并行只来自网格工作线程
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from config.settings import Config, ConfigError, ConfigManager, VARIANT_LEVELS
from core.datagen import (
    BadConfigError,
    DatasetIOError,
    GenConfig,
    InfeasibleCountsError,
    SchemaMismatchError,
    Splits,
    generate,
    load_dataset,
    save_dataset,
    split,
    summary,
)
from core.evaluation import (
    EVAL_FILE,
    MAIN_METHODS,
    EvalError,
    ReportIOError,
    emit_report,
    evaluate_model,
    load_reports,
    projection_frame,
)
from core.grid import RUNS_DIR, GridRunner, grid_requests
from core.hierarchy import HierarchyError, HierarchyTree, lego15_default, load_hierarchy
from core.losses import LossError
from core.pipeline import CONFIG_ECHO, ConfigSplitMismatchError, UnknownVariantError, load_run
from core.tensornet import CheckpointError, TensorNetError
from monitor.history_monitor import DivergenceError
from utils.logging import LogConfig

DATASET_FILE = "dataset.csv"
COMMANDS = ("gen", "train", "eval", "ablate", "sweep", "report")
GRID_COMMANDS = ("train", "ablate", "sweep")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

CONFIG_ERRORS = (
    ConfigError,
    HierarchyError,
    BadConfigError,
    InfeasibleCountsError,
    UnknownVariantError,
    ConfigSplitMismatchError,
)
IO_ERRORS = (DatasetIOError, SchemaMismatchError, CheckpointError, ReportIOError, OSError)
NUMERIC_ERRORS = (DivergenceError, TensorNetError, LossError, EvalError)


class ApplicationError(Exception):
    """应用程序异常基类"""

    pass


def exit_code_for(error: BaseException) -> int:
    """
    把异常映射为退出码

    Args:
        error: 异常（ApplicationError 时取其原因）

    Returns:
        int: 2 配置错误，3 I/O 错误，4 数值发散及其他运行失败
    """
    if isinstance(error, ApplicationError) and error.__cause__ is not None:
        error = error.__cause__
    if isinstance(error, CONFIG_ERRORS):
        return EXIT_CONFIG
    # CheckpointError 同时是 TensorNetError，先判断 I/O
    if isinstance(error, IO_ERRORS):
        return EXIT_IO
    return EXIT_NUMERIC


@dataclass
class RunSpec:
    """一次命令行调用"""

    command: str
    config_path: Optional[str] = None
    output_dir: Path = Path("out")
    seed_list: List[int] = field(default_factory=list)
    preset: str = "default"
    dataset: Optional[str] = None
    run_dir: Optional[str] = None
    jobs: Optional[int] = None
    lambdas: Optional[List[float]] = None
    variant: Optional[str] = None
    use_da: Optional[bool] = None

    def validate(self):
        """验证调用参数"""
        if self.command not in COMMANDS:
            raise ConfigError(f"未知命令: {self.command}")

        if self.command in GRID_COMMANDS and not self.seed_list:
            raise ConfigError(f"{self.command} 需要至少一个随机种子")

        if self.lambdas is not None:
            for lam in self.lambdas:
                if not lam > 0:
                    raise ConfigError(f"λ 必须为正（关闭域适应请用 train --no-use-da）: {lam}")

        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"并行任务数必须大于0: {self.jobs}")

        if self.variant is not None and self.variant not in VARIANT_LEVELS:
            raise ConfigError(f"未知变体: {self.variant}")

        if self.command == "eval" and not self.run_dir:
            raise ConfigError("eval 需要 --run-dir")

        return True

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.output_dir / DATASET_FILE


class HierFuseApp:
    """层级特征融合实验应用"""

    def __init__(self, spec: RunSpec):
        """
        初始化应用

        Args:
            spec: 命令行调用描述
        """
        self.spec = spec
        self.config: Optional[Config] = None
        self.logger: Optional[logging.Logger] = None

        self._initialize()

    def _initialize(self):
        """加载配置、设置日志并输出配置摘要"""
        try:
            self.config = ConfigManager(self.spec.config_path).load(self.spec.preset)
            if self.spec.jobs is not None:
                self.config.grid.jobs = self.spec.jobs
            if not self.spec.seed_list:
                self.spec.seed_list = list(self.config.grid.seeds)
            self.spec.validate()

            self._ensure_directories()
            self.logger = LogConfig.setup_logging(
                log_file=str(self._log_path()),
                debug_mode=self.config.log.debug_mode,
                level=self.config.log.get_effective_log_level(),
            )
            self._log_config_summary()

        except Exception as e:
            self._handle_initialization_error(e)

    def _log_path(self) -> Path:
        log_path = Path(self.config.log.log_file)
        return log_path if log_path.is_absolute() else self.spec.output_dir / log_path

    def _ensure_directories(self):
        """确保输出目录存在"""
        self.spec.output_dir.mkdir(parents=True, exist_ok=True)

    def _log_config_summary(self):
        """输出配置摘要"""
        LogConfig.log_banner(
            self.logger,
            f"hierfuse {self.spec.command} 配置摘要",
            [("输出目录", self.spec.output_dir), *self.config.get_summary()],
        )

    def _handle_initialization_error(self, error: Exception):
        """处理初始化错误"""
        error_msg = f"初始化失败: {error}"
        if self.logger:
            self.logger.error(error_msg)
            self.logger.debug(traceback.format_exc())
        else:
            print(error_msg, file=sys.stderr)
        raise ApplicationError(error_msg) from error

    def run(self) -> int:
        """执行子命令"""
        handler = getattr(self, f"cmd_{self.spec.command}")
        handler()
        return EXIT_OK

    # ------------------------------------------------------------------ 数据

    def _tree(self) -> HierarchyTree:
        hierarchy_file = self.config.datagen.hierarchy_file
        return load_hierarchy(hierarchy_file) if hierarchy_file else lego15_default()

    def _load_splits(self) -> Splits:
        path = self.spec.dataset_path()
        if not path.exists():
            raise DatasetIOError(f"数据集不存在: {path}")
        return load_dataset(path)

    def cmd_gen(self):
        """生成双域数据集并划分目标域"""
        tree = self._tree()
        gen_cfg = GenConfig.from_settings(self.config.datagen, tree)
        samples = generate(gen_cfg)
        splits = split(
            samples,
            (self.config.split.n_train_target, self.config.split.n_val_target),
            seed=self.config.split.seed,
            meta={"gen": gen_cfg.to_dict()},
        )

        path = self.spec.dataset_path()
        save_dataset(splits, path)

        counts = summary(splits)
        self.logger.info(f"数据集已写入 {path}")
        print(f"source: {counts['source']}, target: {counts['target']}")
        print(
            f"train_target: {counts['train_target']}, val_target: {counts['val_target']}, "
            f"test_target: {counts['test_target']}"
        )
        print(f"classes: {tree.n_fine} ({tree.describe()})")

    # ------------------------------------------------------------------ 网格

    def _grid(self, splits: Splits) -> GridRunner:
        return GridRunner(
            self.config,
            splits,
            splits.tree(),
            self.spec.output_dir,
            jobs=self.config.grid.jobs,
            dataset_path=str(self.spec.dataset_path()),
        )

    def _run_grid(self, splits: Splits, requests) -> list:
        runner = self._grid(splits)
        try:
            return runner.run(requests)
        finally:
            runner.close()

    def cmd_train(self):
        """按种子训练单个变体，输出验证集准确率均值与离散度"""
        splits = self._load_splits()
        variant = self.spec.variant or self.config.train.variant
        use_da = self.config.train.use_da if self.spec.use_da is None else self.spec.use_da
        requests = grid_requests(
            [variant],
            self.spec.seed_list,
            study="train",
            use_da=(use_da,),
            lambdas=(self.config.train.mmd_lambda,),
        )
        reports = self._run_grid(splits, requests)

        val_accs = np.array([r.metadata.get("val_acc", np.nan) for r in reports], dtype=np.float64)
        top1s = np.array([r.top1 for r in reports], dtype=np.float64)
        if len(reports) == 1:
            print(f"{variant} (da={use_da}) seed {self.spec.seed_list[0]}: val_acc {val_accs[0]:.4f}, test top1 {top1s[0]:.4f}")
        else:
            print(
                f"{variant} (da={use_da}) {len(reports)} seeds: "
                f"val_acc {val_accs.mean():.4f} ± {val_accs.std():.4f}, "
                f"test top1 {top1s.mean():.4f} ± {top1s.std():.4f}"
            )
        self._emit_report(splits)

    def cmd_ablate(self):
        """四个层级分配变体 × 种子，开启域适应"""
        splits = self._load_splits()
        requests = grid_requests(
            self.config.grid.variants,
            self.spec.seed_list,
            study="ablate",
            lambdas=(self.config.train.mmd_lambda,),
        )
        self._run_grid(splits, requests)
        written = self._emit_report(splits)
        print(written["table_ablation.csv"].read_text(encoding="utf-8"), end="")

    def cmd_sweep(self):
        """ours 与 baseline 在每个 λ 下训练"""
        lambdas = self.spec.lambdas if self.spec.lambdas is not None else self.config.grid.lambdas
        splits = self._load_splits()
        requests = grid_requests(MAIN_METHODS[::-1], self.spec.seed_list, study="sweep", lambdas=lambdas)
        self._run_grid(splits, requests)
        written = self._emit_report(splits)
        print(written["lambda_sweep.csv"].read_text(encoding="utf-8"), end="")

    # ------------------------------------------------------------------ 评估与报告

    def cmd_eval(self):
        """对单个运行目录在目标域测试集上评估"""
        run_dir = Path(self.spec.run_dir)
        model = load_run(run_dir)

        echo = {}
        echo_path = run_dir / CONFIG_ECHO
        if echo_path.exists():
            echo = json.loads(echo_path.read_text(encoding="utf-8"))
        if self.spec.dataset is None and echo.get("dataset"):
            self.spec.dataset = echo["dataset"]

        splits = self._load_splits()
        tree = splits.tree()
        cfg = model.config
        report = evaluate_model(
            model,
            splits.train_source,
            splits.test_target,
            tree,
            m_pairs=self.config.eval.m_pairs,
            top_k=self.config.eval.top_confused,
            metadata={
                "run_key": run_dir.name,
                "variant": cfg.variant,
                "use_da": cfg.use_da,
                "mmd_lambda": cfg.mmd_lambda,
                "seed": cfg.seed,
                "study": echo.get("study", "eval"),
                "val_acc": model.history[-1].val_acc if model.history else None,
            },
        )
        report.write_json(run_dir / EVAL_FILE)
        if self.config.eval.pca_export:
            frame = projection_frame(model, splits.test_target, tree)
            frame.to_csv(run_dir / "features_2d.csv", index=False, float_format="%.6g", lineterminator="\n")

        print(f"top1: {report.top1:.4f}")
        for row in report.m_table:
            print(f"M({row['c1']}, {row['c1']}) = {row['m_self']:.4f} (M({row['c1']}, {row['c2']}) = {row['m_confused']:.4f})")

    def cmd_report(self):
        """汇总 --out/runs 下全部 eval.json"""
        splits = None
        if self.spec.dataset_path().exists():
            splits = self._load_splits()
        written = self._emit_report(splits)
        for name, path in written.items():
            print(f"{name}: {path}")

    def _emit_report(self, splits: Optional[Splits]) -> dict:
        reports = load_reports(self.spec.output_dir / RUNS_DIR)
        projection = None
        if self.config.eval.pca_export and splits is not None:
            projection = self._projection(reports, splits)
        return emit_report(reports, self.spec.output_dir, projection=projection)

    def _projection(self, reports, splits: Splits):
        """取第一个 ours 运行（按运行键排序）的测试集融合特征投影"""
        keys = sorted(r.metadata.get("run_key", "") for r in reports if r.metadata.get("variant") == "ours")
        for key in keys:
            run_dir = self.spec.output_dir / RUNS_DIR / key
            if run_dir.exists():
                return projection_frame(load_run(run_dir), splits.test_target, splits.tree())
        self.logger.info("没有 ours 运行，跳过特征投影")
        return None


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"无效的整数列表: {text}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"无效的数值列表: {text}")


def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    parser = argparse.ArgumentParser(prog="hierfuse", description="层级特征融合的无监督域适应实验")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--preset", default="default", choices=sorted(ConfigManager.PRESETS), help="配置预设")
    parser.add_argument("--out", default="out", help="输出目录")
    parser.add_argument("--print-config", action="store_true", help="打印生效配置后退出")
    parser.add_argument("--seeds", type=_int_list, help="逗号分隔的随机种子")
    parser.add_argument("--jobs", type=int, help="并行训练任务数")
    parser.add_argument("--lambdas", type=_float_list, help="逗号分隔的 λ 值（sweep）")
    parser.add_argument("--variant", choices=list(VARIANT_LEVELS), help="训练变体（train）")
    parser.add_argument("--use-da", action=argparse.BooleanOptionalAction, default=None, help="是否开启域适应（train）")
    parser.add_argument("--dataset", help="数据集文件，默认 <out>/dataset.csv")
    parser.add_argument("--run-dir", help="运行目录（eval）")
    parser.add_argument("command", nargs="?", choices=COMMANDS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数入口"""
    args = build_parser().parse_args(argv)

    if args.print_config:
        try:
            config = ConfigManager(args.config).load(args.preset)
        except ConfigError as e:
            print(f"配置错误: {e}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(config.to_dict(), indent=2, ensure_ascii=False))
        return EXIT_OK

    if args.command is None:
        print("需要指定命令: " + ", ".join(COMMANDS), file=sys.stderr)
        return EXIT_CONFIG

    spec = RunSpec(
        command=args.command,
        config_path=args.config,
        output_dir=Path(args.out),
        seed_list=args.seeds or [],
        preset=args.preset,
        dataset=args.dataset,
        run_dir=args.run_dir,
        jobs=args.jobs,
        lambdas=args.lambdas,
        variant=args.variant,
        use_da=args.use_da,
    )

    logger = logging.getLogger(__name__)
    try:
        app = HierFuseApp(spec)
        return app.run()
    except KeyboardInterrupt:
        print("\n用户中断", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:
        code = exit_code_for(e)
        if not isinstance(e, ApplicationError):
            logger.error(f"{spec.command} 失败: {e}")
            logger.debug(traceback.format_exc())
            print(f"错误: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
