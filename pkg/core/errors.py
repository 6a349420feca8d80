#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常定义
"""

from typing import Optional, Tuple


class NlosLocateError(Exception):
    """所有定位错误的基类"""


class ConfigError(NlosLocateError):
    """配置错误"""


class SceneFormatError(NlosLocateError):
    """场景文件语法错误"""


class SceneError(NlosLocateError):
    """场景几何不合法，记录出错实体及其索引"""

    def __init__(self, message: str, entity: str = "", index: Optional[int] = None):
        super().__init__(message)
        self.entity = entity
        self.index = index


class NoPathFoundError(NlosLocateError):
    """某个基站到UE找不到传播路径"""

    def __init__(self, message: str, bs_id: Optional[int] = None):
        super().__init__(message)
        self.bs_id = bs_id


class DegenerateDistributionError(NlosLocateError):
    """标准差为0，分布退化为点质量"""


class InconsistentMeasurementError(NlosLocateError):
    """PT/RPT测量与几何不一致（所有目标都落在空的分箱中）"""

    def __init__(self, message: str, bs_id: Optional[int] = None,
                 pair: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.bs_id = bs_id
        self.pair = pair


class FusionError(NlosLocateError):
    """融合阶段错误，带基站或基站对标识"""

    def __init__(self, message: str, bs_id: Optional[int] = None,
                 pair: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.bs_id = bs_id
        self.pair = pair


class InsufficientPointsError(NlosLocateError):
    """点数少于混合分量数"""


class TrialFailure(NlosLocateError):
    """单次试验失败"""


class CampaignError(NlosLocateError):
    """整个仿真批次失败"""


class ReportError(NlosLocateError):
    """PDF报告生成或合并失败"""
