#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
核心功能模块初始化文件
"""

__version__ = "0.1.0"
__author__ = "pyinglie"
