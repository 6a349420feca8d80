# -*- coding: utf-8 -*-
"""
工具函数：日志级别、种子派生、进度跟踪
"""

import logging

import numpy as np
import pytest

from core.utils import (
    ProgressTracker, clean_filename, derive_seed, format_time_duration, make_rng, resolve_log_level,
)


@pytest.mark.parametrize("value, level", [(None, logging.INFO), ("debug", logging.DEBUG),
                                          (" WARNING ", logging.WARNING), ("loud", logging.INFO)])
def test_log_level_from_environment_value(value, level):
    assert resolve_log_level(value) == level


def test_derived_seeds_depend_on_keys_not_on_call_order():
    first = [derive_seed(42, k) for k in range(5)]
    second = [derive_seed(42, k) for k in reversed(range(5))][::-1]
    assert first == second
    assert len(set(first)) == 5
    assert derive_seed(42, 1, 2) != derive_seed(42, 2, 1)
    assert all(0 <= s < 2 ** 64 for s in first)


def test_make_rng_is_reproducible():
    a = make_rng(7, 3).normal(size=4)
    b = make_rng(7, 3).normal(size=4)
    np.testing.assert_array_equal(a, b)


def test_clean_filename_and_durations():
    assert clean_filename("cdf sigma/eta") == "cdf_sigma_eta"
    assert format_time_duration(12.0) == "12.0 秒"
    assert format_time_duration(90.0) == "1.5 分钟"


class TestProgressTracker:

    def test_reports_once_per_interval(self):
        tracker = ProgressTracker(20, report_every=10)
        crossed = [tracker.next_step() for _ in range(20)]
        # 5%, 10%, ..., 100%：首次完成及每跨过一个 10% 区间各提示一次
        assert sum(crossed) == 11
        assert crossed[0] and crossed[1] and not crossed[2]
        assert tracker.get_progress_percentage() == 100

    def test_does_not_overrun(self):
        tracker = ProgressTracker(2)
        for _ in range(5):
            tracker.next_step()
        assert tracker.current_step == 2

    def test_empty_tracker_is_complete(self):
        assert ProgressTracker(0).get_progress_percentage() == 100
