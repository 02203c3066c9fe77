#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
日志工具模块，统一各模块的日志格式
"""
import logging
import os
import sys

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# 全局日志目录，由命令行入口通过 set_log_dir 设置
_log_dir = None


def set_log_dir(log_dir):
    """设置日志文件目录

    Args:
        log_dir: 日志目录，为None时只输出到控制台
    """
    global _log_dir
    _log_dir = log_dir
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)


def setup_logger(name, level=logging.INFO, log_dir=None):
    """创建或获取日志记录器

    重复调用同一名称不会重复添加处理器。

    Args:
        name: 日志记录器名称，一般为模块名
        level: 日志级别
        log_dir: 日志文件目录，默认使用 set_log_dir 设置的目录

    Returns:
        logging.Logger: 日志记录器
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.propagate = False

    formatter = logging.Formatter(LOG_FORMAT, DATE_FORMAT)

    if not any(getattr(h, "_rjepa_console", False) for h in logger.handlers):
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        console_handler._rjepa_console = True
        logger.addHandler(console_handler)

    target_dir = log_dir or _log_dir
    if target_dir:
        log_file = os.path.abspath(os.path.join(target_dir, f"{name}.log"))
        has_file = any(
            isinstance(h, logging.FileHandler) and getattr(h, "baseFilename", None) == log_file
            for h in logger.handlers
        )
        if not has_file:
            os.makedirs(target_dir, exist_ok=True)
            file_handler = logging.FileHandler(log_file, encoding="utf-8")
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger
