#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NLoSLocate - 数字孪生辅助的室内NLoS三维定位
主程序入口文件
"""

import sys
from pathlib import Path

# 添加项目根目录到Python路径
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from cli.commands import main as run_cli


def main():
    """主函数"""
    try:
        sys.exit(run_cli(sys.argv[1:]))
    except KeyboardInterrupt:
        print("已被用户中断")
        sys.exit(1)
    except Exception as e:
        print(f"程序运行失败: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
