"""
实验网格执行器
把 (变体, 域适应开关, λ, 种子) 组合登记到运行表，由工作线程领取、训练、评估并写出运行目录
"""

import itertools
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from config.settings import Config
from core.datagen import Splits
from core.evaluation import EVAL_FILE, EvalReport, evaluate_model
from core.hierarchy import HierarchyTree
from core.pipeline import CHECKPOINT_FILE, train, with_variant, write_run
from core.storage import Run, RunStore

RUNS_DIR = "runs"


@dataclass(frozen=True)
class RunRequest:
    """网格中的一个点"""

    variant: str
    use_da: bool
    mmd_lambda: float
    seed: int
    study: str = "train"

    @property
    def run_key(self) -> str:
        return f"{self.study}-{self.variant}-da{int(self.use_da)}-lam{self.mmd_lambda:g}-s{self.seed}"

    def to_run(self, run_dir: Path) -> Run:
        return Run(
            run_key=self.run_key,
            variant=self.variant,
            use_da=self.use_da,
            mmd_lambda=self.mmd_lambda,
            seed=self.seed,
            study=self.study,
            run_dir=str(run_dir),
        )


def grid_requests(
    variants: Iterable[str],
    seeds: Iterable[int],
    study: str,
    use_da: Sequence[bool] = (True,),
    lambdas: Sequence[float] = (1.0,),
) -> List[RunRequest]:
    """按 λ、变体、域适应开关、种子的顺序展开网格"""
    return [
        RunRequest(variant=v, use_da=da, mmd_lambda=float(lam), seed=s, study=study)
        for lam, v, da, s in itertools.product(lambdas, variants, use_da, seeds)
    ]


class GridRunner:
    """网格执行器：最多 jobs 个工作线程并行，每个运行内部单线程"""

    def __init__(
        self,
        config: Config,
        splits: Splits,
        tree: HierarchyTree,
        out_dir: Path,
        jobs: int = 1,
        dataset_path: Optional[str] = None,
    ):
        """
        初始化网格执行器

        Args:
            config: 主配置
            splits: 数据集划分（各线程只读共享）
            tree: 类别层级
            out_dir: 输出根目录，运行目录位于 out_dir/runs/<run_key>
            jobs: 并行工作线程数
            dataset_path: 数据集路径（写入 config.echo）
        """
        self.config = config
        self.splits = splits
        self.tree = tree
        self.out_dir = Path(out_dir)
        self.jobs = max(1, jobs)
        self.dataset_path = dataset_path
        self.logger = logging.getLogger(__name__)

        db_file = Path(config.database.db_file)
        self.store = RunStore(db_file if db_file.is_absolute() else self.out_dir / db_file)
        self.store.reset_stuck_runs()

        self.workers: List[threading.Thread] = []
        self.errors: Dict[str, BaseException] = {}
        self._errors_lock = threading.Lock()
        self._keys: Optional[List[str]] = None

    def run_dir(self, request: RunRequest) -> Path:
        return self.out_dir / RUNS_DIR / request.run_key

    def _is_done(self, request: RunRequest) -> bool:
        run_dir = self.run_dir(request)
        return (run_dir / CHECKPOINT_FILE).exists() and (run_dir / EVAL_FILE).exists()

    def submit(self, requests: Sequence[RunRequest]) -> int:
        """
        登记运行；产物齐全的已完成运行跳过

        Returns:
            int: 需要执行的运行数
        """
        pending = 0
        for request in requests:
            existing = self.store.get_run(request.run_key)
            if existing is not None and existing.status == "completed":
                if self._is_done(request):
                    self.logger.info(f"跳过已完成的运行: {request.run_key}")
                    continue
                self.store.reset_run(request.run_key)
            else:
                self.store.save_run(request.to_run(self.run_dir(request)))
            pending += 1
        return pending

    def run(self, requests: Sequence[RunRequest]) -> List[EvalReport]:
        """
        执行网格并按请求顺序返回评估报告

        Raises:
            第一个失败运行（按请求顺序）的原始异常
        """
        pending = self.submit(requests)
        self.logger.info(f"网格共 {len(requests)} 个运行，待执行 {pending} 个，工作线程 {self.jobs} 个")

        if pending:
            self._keys = [r.run_key for r in requests]
            self._start_workers()
            self._wait_for_threads()

        for request in requests:
            error = self.errors.get(request.run_key)
            if error is not None:
                raise error

        status = self.get_status()
        self.logger.info(f"网格完成: {status['run_stats'].get('by_status', {})}")
        return [EvalReport.read_json(self.run_dir(r) / EVAL_FILE) for r in requests]

    def _start_workers(self):
        """启动工作线程"""
        self.workers = []
        for i in range(self.jobs):
            worker = threading.Thread(target=self._worker_loop, name=f"grid_worker_{i}", daemon=True)
            self.workers.append(worker)
            worker.start()

    def _wait_for_threads(self):
        for worker in self.workers:
            worker.join()

    def _worker_loop(self):
        """工作线程循环：领取运行直到没有待处理项"""
        thread_name = threading.current_thread().name

        while True:
            runs = self.store.claim_pending_runs(limit=1, keys=self._keys)
            if not runs:
                self.logger.debug(f"{thread_name} 没有待处理运行，退出")
                return
            self._process_run(runs[0])

    def _process_run(self, run: Run):
        """训练、写出运行目录并在测试集上评估"""
        run_dir = Path(run.run_dir) if run.run_dir else self.out_dir / RUNS_DIR / run.run_key
        try:
            cfg = with_variant(
                self.config.train,
                run.variant,
                use_da=run.use_da,
                mmd_lambda=run.mmd_lambda,
                seed=run.seed,
            )
            model = train(cfg, self.splits, self.tree, run_name=run.run_key)
            write_run(model, run_dir, extra={"dataset": self.dataset_path, "study": run.study})

            report = evaluate_model(
                model,
                self.splits.train_source,
                self.splits.test_target,
                self.tree,
                m_pairs=self.config.eval.m_pairs,
                top_k=self.config.eval.top_confused,
                metadata={
                    "run_key": run.run_key,
                    "variant": run.variant,
                    "use_da": run.use_da,
                    "mmd_lambda": run.mmd_lambda,
                    "seed": run.seed,
                    "study": run.study,
                    "val_acc": model.history[-1].val_acc if model.history else None,
                },
            )
            report.write_json(run_dir / EVAL_FILE)

            self.store.complete_run(run.run_key, str(run_dir))
            self.logger.info(f"运行完成: {run.run_key} top-1={report.top1:.4f}")

        except Exception as e:
            self.logger.error(f"运行失败 {run.run_key}: {e}")
            self.logger.debug("运行失败详情", exc_info=True)
            self.store.fail_run(run.run_key, str(e))
            with self._errors_lock:
                self.errors[run.run_key] = e

    def get_status(self) -> dict:
        """
        获取网格状态

        Returns:
            dict: 状态信息
        """
        return {
            "run_stats": self.store.get_statistics(),
            "active_workers": len([w for w in self.workers if w.is_alive()]),
            "failed": sorted(self.errors),
        }

    def close(self):
        self.store.close()
