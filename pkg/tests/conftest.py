# -*- coding: utf-8 -*-
"""
测试公共夹具
"""

import sys
from pathlib import Path

import pytest

# 添加项目根目录到Python路径
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from core.scene import generate_box_scene


@pytest.fixture(scope="session")
def empty_room():
    """8×18×2.5 m 空厂房，4 个顶角基站"""
    return generate_box_scene()


@pytest.fixture(scope="session")
def cluttered_room():
    return generate_box_scene(clutter=6, seed=3)
