"""
数据库连接管理器
处理SQLite连接池和事务管理（网格任务登记表使用）
"""

import sqlite3
import time
import threading
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterator, Tuple, TypeVar

T = TypeVar("T")


class DatabaseManager:
    """数据库连接管理器 - 线程安全的连接池，按 (线程, 数据库文件) 缓存连接"""

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        """单例模式确保全局只有一个管理器"""
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self.logger = logging.getLogger(__name__)
        self.connection_pool: Dict[Tuple[int, str], sqlite3.Connection] = {}
        self.lock = threading.Lock()
        self._initialized = True

    def get_connection(self, db_path: str, timeout: float = 30.0) -> sqlite3.Connection:
        """
        获取数据库连接

        Args:
            db_path: 数据库文件路径
            timeout: 连接超时时间（秒）

        Returns:
            sqlite3.Connection: 当前线程对该数据库的连接
        """
        key = (threading.get_ident(), str(db_path))

        with self.lock:
            if key not in self.connection_pool:
                self.connection_pool[key] = self._create_connection(key, timeout)

            return self.connection_pool[key]

    def _create_connection(self, key: Tuple[int, str], timeout: float) -> sqlite3.Connection:
        """创建新的数据库连接"""
        thread_id, db_path = key
        try:
            Path(db_path).parent.mkdir(parents=True, exist_ok=True)

            conn = sqlite3.connect(db_path, timeout=timeout, check_same_thread=False)

            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            conn.execute("PRAGMA busy_timeout=5000")  # 5秒超时

            self.logger.debug(f"为线程 {thread_id} 创建数据库连接: {db_path}")
            return conn

        except sqlite3.Error as e:
            self.logger.error(f"创建数据库连接失败: {e}")
            raise

    @contextmanager
    def transaction(self, db_path: str) -> Iterator[sqlite3.Connection]:
        """
        事务上下文管理器

        Args:
            db_path: 数据库文件路径

        Yields:
            sqlite3.Connection: 数据库连接

        Raises:
            sqlite3.Error: 数据库操作错误（已回滚）
        """
        conn = self.get_connection(db_path)
        try:
            yield conn
            conn.commit()
        except Exception:
            conn.rollback()
            raise

    def run_transaction(
        self,
        db_path: str,
        body: Callable[[sqlite3.Connection], T],
        retries: int = 3,
        backoff: float = 0.1,
    ) -> T:
        """
        在事务中执行 body，数据库锁定时整体重试

        Args:
            db_path: 数据库文件路径
            body: 接收连接并返回结果的函数
            retries: 最大重试次数
            backoff: 首次重试等待时间（秒），之后翻倍

        Returns:
            body 的返回值
        """
        attempt = 0
        while True:
            try:
                with self.transaction(db_path) as conn:
                    return body(conn)
            except sqlite3.OperationalError as e:
                if "database is locked" not in str(e) or attempt >= retries:
                    raise
                attempt += 1
                self.logger.warning(f"数据库锁定，第 {attempt} 次重试...")
                time.sleep(backoff * (2 ** (attempt - 1)))

    def close_all(self):
        """关闭所有数据库连接"""
        with self.lock:
            for (thread_id, db_path), conn in list(self.connection_pool.items()):
                try:
                    conn.close()
                    self.logger.debug(f"关闭线程 {thread_id} 的数据库连接: {db_path}")
                except sqlite3.Error as e:
                    self.logger.error(f"关闭连接失败: {e}")

            self.connection_pool.clear()
