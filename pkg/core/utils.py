#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
工具函数模块
"""

import os
import re
import logging
from typing import Optional

import numpy as np

LOG_ENV_VAR = "NLOS_LOCATE_LOG"

_MASK64 = (1 << 64) - 1


def setup_logging(log_level: Optional[int] = None):
    """设置日志，未指定级别时读取环境变量 NLOS_LOCATE_LOG"""
    if log_level is None:
        log_level = resolve_log_level(os.environ.get(LOG_ENV_VAR))

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
        ]
    )
    logging.getLogger().setLevel(log_level)


def resolve_log_level(value: Optional[str]) -> int:
    """把环境变量的取值转换为日志级别，未知取值回退到 INFO"""
    if not value:
        return logging.INFO
    level = logging.getLevelName(value.strip().upper())
    if isinstance(level, int):
        return level
    return logging.INFO


def ensure_directory(path: str) -> bool:
    """确保目录存在"""
    try:
        os.makedirs(path, exist_ok=True)
        return True
    except Exception as e:
        logging.error(f"创建目录失败 {path}: {e}")
        return False


def clean_filename(filename: str) -> str:
    """清理文件名，移除非法字符"""
    illegal_chars = r'[<>:"/\\|?*\s]'
    clean_name = re.sub(illegal_chars, '_', filename)
    return clean_name.strip()


def format_time_duration(seconds: float) -> str:
    """格式化时间持续时间"""
    if seconds < 60:
        return f"{seconds:.1f} 秒"
    elif seconds < 3600:
        minutes = seconds / 60
        return f"{minutes:.1f} 分钟"
    else:
        hours = seconds / 3600
        return f"{hours:.1f} 小时"


def splitmix64(value: int) -> int:
    """SplitMix64 混合函数"""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """由批次种子和若干整数键派生子种子，与执行顺序无关"""
    state = splitmix64(seed & _MASK64)
    for key in keys:
        state = splitmix64(state ^ (int(key) & _MASK64))
    return state


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """创建派生的随机数发生器"""
    return np.random.default_rng(derive_seed(seed, *keys))


class ProgressTracker:
    """进度跟踪器：按完成步数计算百分比，每跨过 report_every 个百分点提示一次"""

    def __init__(self, total_steps: int, report_every: int = 10):
        self.total_steps = total_steps
        self.current_step = 0
        self.report_every = max(int(report_every), 1)
        self._last_bucket = -1

    def get_progress_percentage(self) -> int:
        """获取进度百分比"""
        if self.total_steps == 0:
            return 100
        return int(self.current_step * 100 / self.total_steps)

    def next_step(self) -> bool:
        """移动到下一步，跨过新的报告区间时返回 True"""
        if self.current_step < self.total_steps:
            self.current_step += 1
        bucket = self.get_progress_percentage() // self.report_every
        if bucket != self._last_bucket:
            self._last_bucket = bucket
            return True
        return False
