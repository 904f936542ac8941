"""
网格任务登记
记录每个训练运行的状态（pending / processing / completed / failed），支持中断后续跑
"""

import time
import sqlite3
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Dict, Any, Optional, Sequence
from utils.database import DatabaseManager

RUN_COLUMNS = (
    "run_key, variant, use_da, mmd_lambda, seed, study, status, "
    "retry_count, created_time, updated_time, run_dir, error"
)


@dataclass
class Run:
    """一次训练运行"""

    run_key: str
    variant: str
    use_da: bool
    mmd_lambda: float
    seed: int
    study: str  # 'train', 'ablate' 或 'sweep'
    status: str = "pending"  # 'pending', 'processing', 'completed', 'failed'
    retry_count: int = 0
    created_time: float = 0
    updated_time: float = 0
    run_dir: str = ""
    error: str = ""

    @classmethod
    def from_row(cls, row) -> "Run":
        return cls(
            run_key=row[0],
            variant=row[1],
            use_da=bool(row[2]),
            mmd_lambda=float(row[3]),
            seed=int(row[4]),
            study=row[5],
            status=row[6],
            retry_count=int(row[7]),
            created_time=row[8],
            updated_time=row[9],
            run_dir=row[10] or "",
            error=row[11] or "",
        )


class RunStore:
    """运行登记表"""

    def __init__(self, db_path: str = "runs.db"):
        """
        初始化运行登记表

        Args:
            db_path: 数据库文件路径
        """
        self.db_path = str(Path(db_path).resolve())
        self.db_manager = DatabaseManager()
        self.logger = logging.getLogger(__name__)
        self._claim_lock = threading.Lock()

        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)

        self._initialize_database()

    def _initialize_database(self):
        """初始化数据库表结构"""
        try:
            self.db_manager.run_transaction(self.db_path, self._create_schema)
            self.logger.debug(f"运行登记数据库初始化完成: {self.db_path}")

        except sqlite3.Error as e:
            self.logger.error(f"数据库初始化失败: {e}")
            raise

    def _create_schema(self, conn: sqlite3.Connection):
        """创建数据表与索引"""
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_key TEXT PRIMARY KEY,
                variant TEXT NOT NULL,
                use_da INTEGER NOT NULL,
                mmd_lambda REAL NOT NULL,
                seed INTEGER NOT NULL,
                study TEXT NOT NULL,
                status TEXT DEFAULT 'pending',
                retry_count INTEGER DEFAULT 0,
                created_time REAL NOT NULL,
                updated_time REAL NOT NULL,
                run_dir TEXT,
                error TEXT
            )
        """
        )
        conn.execute(
            """
            CREATE INDEX IF NOT EXISTS idx_runs_status
            ON runs(status, created_time)
        """
        )

    def save_run(self, run: Run) -> bool:
        """
        登记一个运行；已存在且未完成的运行重新置为 pending

        Args:
            run: 运行描述

        Returns:
            bool: 是否新增或重置
        """
        current_time = time.time()

        def body(conn: sqlite3.Connection) -> bool:
            cursor = conn.cursor()
            cursor.execute(
                """
                INSERT OR IGNORE INTO runs
                (run_key, variant, use_da, mmd_lambda, seed, study,
                 status, retry_count, created_time, updated_time, run_dir, error)
                VALUES (?, ?, ?, ?, ?, ?, 'pending', 0, ?, ?, ?, '')
                """,
                (
                    run.run_key,
                    run.variant,
                    int(run.use_da),
                    run.mmd_lambda,
                    run.seed,
                    run.study,
                    current_time,
                    current_time,
                    run.run_dir,
                ),
            )
            if cursor.rowcount > 0:
                return True

            cursor.execute(
                """
                UPDATE runs
                SET status = 'pending', updated_time = ?
                WHERE run_key = ? AND status = 'failed'
                """,
                (current_time, run.run_key),
            )
            return cursor.rowcount > 0

        return self.db_manager.run_transaction(self.db_path, body)

    def reset_run(self, run_key: str) -> bool:
        """强制把运行置回 pending（产物缺失的已完成运行）"""

        def body(conn: sqlite3.Connection) -> bool:
            cursor = conn.execute(
                "UPDATE runs SET status = 'pending', updated_time = ? WHERE run_key = ?",
                (time.time(), run_key),
            )
            return cursor.rowcount > 0

        return self.db_manager.run_transaction(self.db_path, body)

    def get_run(self, run_key: str) -> Optional[Run]:
        """按键查询运行"""

        def body(conn: sqlite3.Connection) -> Optional[Run]:
            row = conn.execute(f"SELECT {RUN_COLUMNS} FROM runs WHERE run_key = ?", (run_key,)).fetchone()
            return Run.from_row(row) if row else None

        return self.db_manager.run_transaction(self.db_path, body)

    def list_runs(self, study: Optional[str] = None) -> List[Run]:
        """列出运行（按登记顺序）"""

        def body(conn: sqlite3.Connection) -> List[Run]:
            if study is None:
                rows = conn.execute(f"SELECT {RUN_COLUMNS} FROM runs ORDER BY created_time, rowid")
            else:
                rows = conn.execute(
                    f"SELECT {RUN_COLUMNS} FROM runs WHERE study = ? ORDER BY created_time, rowid",
                    (study,),
                )
            return [Run.from_row(row) for row in rows.fetchall()]

        return self.db_manager.run_transaction(self.db_path, body)

    def claim_pending_runs(self, limit: int = 1, keys: Optional[Sequence[str]] = None) -> List[Run]:
        """
        领取待处理运行并标记为 processing

        Args:
            limit: 最大数量
            keys: 只在这些运行中领取（None 表示不限）

        Returns:
            List[Run]: 成功领取的运行
        """
        current_time = time.time()

        def body(conn: sqlite3.Connection) -> List[Run]:
            cursor = conn.cursor()
            key_filter = ""
            params: List[Any] = []
            if keys is not None:
                key_filter = f"AND run_key IN ({', '.join('?' for _ in keys)})"
                params.extend(keys)
            cursor.execute(
                f"""
                SELECT {RUN_COLUMNS}
                FROM runs
                WHERE status = 'pending' {key_filter}
                ORDER BY created_time ASC, rowid ASC
                LIMIT ?
                """,
                (*params, limit),
            )
            claimed = []
            for row in cursor.fetchall():
                run = Run.from_row(row)
                cursor.execute(
                    """
                    UPDATE runs SET status = 'processing', updated_time = ?
                    WHERE run_key = ? AND status = 'pending'
                    """,
                    (current_time, run.run_key),
                )
                if cursor.rowcount > 0:
                    run.status = "processing"
                    run.updated_time = current_time
                    claimed.append(run)
            return claimed

        try:
            with self._claim_lock:
                return self.db_manager.run_transaction(self.db_path, body)
        except sqlite3.Error as e:
            self.logger.error(f"领取待处理运行失败: {e}")
            return []

    def complete_run(self, run_key: str, run_dir: str) -> bool:
        """标记运行完成"""

        def body(conn: sqlite3.Connection) -> bool:
            cursor = conn.execute(
                """
                UPDATE runs SET status = 'completed', updated_time = ?, run_dir = ?, error = ''
                WHERE run_key = ?
                """,
                (time.time(), run_dir, run_key),
            )
            return cursor.rowcount > 0

        return self.db_manager.run_transaction(self.db_path, body)

    def fail_run(self, run_key: str, error: str) -> bool:
        """标记运行失败并累计重试次数"""

        def body(conn: sqlite3.Connection) -> bool:
            cursor = conn.execute(
                """
                UPDATE runs SET status = 'failed', updated_time = ?, error = ?,
                retry_count = retry_count + 1
                WHERE run_key = ?
                """,
                (time.time(), error, run_key),
            )
            return cursor.rowcount > 0

        return self.db_manager.run_transaction(self.db_path, body)

    def reset_stuck_runs(self, timeout_hours: float = 0.0) -> int:
        """
        把中断遗留的 processing 运行重置为 pending

        Args:
            timeout_hours: 只重置超过该时长未更新的运行（0 表示全部）

        Returns:
            int: 重置数量
        """
        cutoff_time = time.time() - (timeout_hours * 3600)

        def body(conn: sqlite3.Connection) -> int:
            cursor = conn.execute(
                """
                UPDATE runs
                SET status = 'pending', updated_time = ?
                WHERE status = 'processing'
                AND updated_time <= ?
                """,
                (time.time(), cutoff_time),
            )
            return cursor.rowcount

        count = self.db_manager.run_transaction(self.db_path, body)
        if count > 0:
            self.logger.info(f"重置了 {count} 个中断的运行")
        return count

    def get_statistics(self) -> Dict[str, Any]:
        """
        获取运行统计信息

        Returns:
            Dict: 统计信息
        """

        def body(conn: sqlite3.Connection) -> Dict[str, Any]:
            cursor = conn.cursor()
            cursor.execute(
                """
                SELECT status, COUNT(*) as count
                FROM runs
                GROUP BY status
            """
            )
            stats = {row[0]: {"count": row[1]} for row in cursor.fetchall()}

            cursor.execute("SELECT COUNT(*) FROM runs")
            total = cursor.fetchone()[0]

            return {"total": total, "by_status": stats, "timestamp": time.time()}

        try:
            return self.db_manager.run_transaction(self.db_path, body)
        except sqlite3.Error as e:
            self.logger.error(f"获取运行统计失败: {e}")
            return {"error": str(e)}

    def close(self):
        """关闭数据库连接"""
        try:
            self.db_manager.close_all()
        except sqlite3.Error as e:
            self.logger.error(f"关闭数据库连接失败: {e}")
