"""
日志配置模块
为训练、评估与网格任务提供统一的日志配置（RotatingFileHandler + 控制台）
"""

import logging
import logging.handlers
from pathlib import Path
from typing import Iterable, Optional, Tuple


class LogConfig:
    """日志配置管理器"""

    # 默认配置
    DEFAULT_CONFIG = {
        "log_file": "logs/hierfuse.log",
        "max_bytes": 10 * 1024 * 1024,  # 10MB
        "backup_count": 5,
        "encoding": "utf-8",
        "log_format": "%(asctime)s - %(name)s - %(threadName)s - %(levelname)s - %(message)s",
        "console_format": "%(asctime)s - %(levelname)s - %(message)s",
        "date_format": "%Y-%m-%d %H:%M:%S",
    }

    @staticmethod
    def setup_logging(
        log_file: Optional[str] = None,
        debug_mode: bool = False,
        level: Optional[int] = None,
        console: bool = True,
        max_bytes: Optional[int] = None,
        backup_count: Optional[int] = None,
    ) -> logging.Logger:
        """
        设置日志配置

        Args:
            log_file: 日志文件路径，None则使用默认路径
            debug_mode: 是否为调试模式
            level: 显式日志级别（调试模式优先）
            console: 是否同时输出到控制台
            max_bytes: 日志文件最大字节数
            backup_count: 备份文件数量

        Returns:
            logging.Logger: 配置好的根日志记录器
        """
        if log_file is None:
            log_file = LogConfig.DEFAULT_CONFIG["log_file"]

        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        if debug_mode:
            log_level = logging.DEBUG
        else:
            log_level = level if level is not None else logging.INFO

        logger = logging.getLogger()
        logger.setLevel(log_level)

        # 重复调用时替换旧处理器（测试与多次命令调用）
        LogConfig._clear_existing_handlers(logger)

        logger.addHandler(
            LogConfig._create_file_handler(log_path, log_level, max_bytes, backup_count)
        )

        if console:
            logger.addHandler(LogConfig._create_console_handler(log_level))

        logger.debug(f"日志系统初始化完成 - 级别: {logging.getLevelName(log_level)}")
        logger.debug(
            f"日志文件: {log_path} (最大: {max_bytes or LogConfig.DEFAULT_CONFIG['max_bytes']} 字节)"
        )

        return logger

    @staticmethod
    def _clear_existing_handlers(logger: logging.Logger):
        """清除并关闭已有的日志处理器"""
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
            handler.close()

    @staticmethod
    def _create_file_handler(
        log_path: Path,
        level: int,
        max_bytes: Optional[int] = None,
        backup_count: Optional[int] = None,
    ) -> logging.Handler:
        """
        创建文件处理器

        Args:
            log_path: 日志文件路径
            level: 日志级别
            max_bytes: 文件最大字节数
            backup_count: 备份文件数量

        Returns:
            logging.Handler: 文件处理器
        """
        max_bytes = max_bytes or LogConfig.DEFAULT_CONFIG["max_bytes"]
        backup_count = backup_count or LogConfig.DEFAULT_CONFIG["backup_count"]

        handler = logging.handlers.RotatingFileHandler(
            filename=str(log_path),
            maxBytes=max_bytes,
            backupCount=backup_count,
            encoding=LogConfig.DEFAULT_CONFIG["encoding"],
        )

        handler.setLevel(level)
        handler.setFormatter(
            logging.Formatter(
                LogConfig.DEFAULT_CONFIG["log_format"],
                datefmt=LogConfig.DEFAULT_CONFIG["date_format"],
            )
        )

        return handler

    @staticmethod
    def _create_console_handler(level: int) -> logging.Handler:
        """创建控制台处理器（简化格式）"""
        handler = logging.StreamHandler()
        handler.setLevel(level)
        handler.setFormatter(
            logging.Formatter(
                LogConfig.DEFAULT_CONFIG["console_format"],
                datefmt=LogConfig.DEFAULT_CONFIG["date_format"],
            )
        )
        return handler

    @staticmethod
    def log_banner(
        logger: logging.Logger, title: str, items: Iterable[Tuple[str, object]]
    ):
        """
        以分隔线包围的形式输出一组键值摘要

        Args:
            logger: 日志记录器
            title: 标题
            items: (名称, 值) 序列
        """
        logger.info("=" * 60)
        logger.info(title)
        logger.info("=" * 60)
        for name, value in items:
            logger.info(f"{name}: {value}")
        logger.info("=" * 60)
