#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行入口：gen-scene / locate / simulate
"""

import os
import sys
import json
import math
import argparse
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import __version__
from core.cloud import FUSION_MODES, FusionConfig, write_clouds_csv
from core.errors import ConfigError, NlosLocateError
from core.gmm import write_field_csv, write_mixtures_json
from core.measure import measurements_from_dict
from core.report import write_campaign_pdf, write_sweep_report
from core.scene import generate_box_scene, save_scene
from core.sim import (
    SWEEP_AXES, SWEEP_FUSION, SWEEP_SIGMA_ETA, SWEEP_SIGMA_NU_PT, SWEEP_SIGMA_NU_RPT,
    localize, run_campaign, sweep, write_campaign,
)
from core.utils import clean_filename, ensure_directory, setup_logging

from .config import (
    RunConfig, build_scene, config_to_dict, em_config, load_config, rays_config, selection_config,
    to_trial_config, with_overrides,
)

DUMP_KINDS = ("clouds", "mixtures", "field")

# 扫描参数对应的配置项
_SWEEP_KEYS = {
    SWEEP_SIGMA_ETA: "noise.sigma_eta_deg",
    SWEEP_SIGMA_NU_PT: "noise.sigma_nu_pt",
    SWEEP_SIGMA_NU_RPT: "noise.sigma_nu_rpt",
    SWEEP_FUSION: "fusion.mode",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="NLoSLocate", description="数字孪生辅助的室内NLoS三维定位")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--seed", type=int, help="随机种子（无符号64位）")
    parser.add_argument("--workers", type=int, help="并行进程数")
    parser.add_argument("--out", help="输出目录")
    parser.add_argument("--print-config", action="store_true", help="打印最终配置后退出")

    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-scene", help="生成盒形场景文件")
    gen.add_argument("--width", type=float, help="宽度（米），默认取配置")
    gen.add_argument("--length", type=float, help="长度（米），默认取配置")
    gen.add_argument("--height", type=float, help="高度（米），默认取配置")
    gen.add_argument("--clutter", type=int, help="杂物盒数量，默认取配置")
    gen.add_argument("--output", help="场景文件路径，默认 <out>/scene.json")

    loc = sub.add_parser("locate", help="由测量文件做单次定位")
    loc.add_argument("measurements", help="测量文件（JSON）")
    loc.add_argument("--fusion", choices=FUSION_MODES)
    loc.add_argument("--n-rays", type=int)
    loc.add_argument("--grid-spacing", type=float)
    loc.add_argument("--refine", action="store_true", default=None)
    loc.add_argument("--dump", default="", help="逗号分隔: clouds,mixtures,field")
    loc.add_argument("--field-decimation", type=int, default=2)

    simu = sub.add_parser("simulate", help="随机投放UE的仿真批次或参数扫描")
    simu.add_argument("--fusion", choices=FUSION_MODES)
    simu.add_argument("--sigma-eta", type=float, help="AoA 噪声标准差（度）")
    simu.add_argument("--sigma-nu", type=float, help="PT 与 RPT 噪声标准差（米）")
    simu.add_argument("--n-trials", type=int)
    simu.add_argument("--sweep", help="扫描参数，例如 sigma_eta=0.25,0.5,1.0deg")
    simu.add_argument("--report", action="store_true", help="同时生成 report.pdf")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """默认值 < 配置文件 < 命令行参数"""
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: Dict[str, Any] = {"seed": args.seed, "out": args.out, "sim.workers": args.workers}
    if args.command == "gen-scene":
        overrides.update({"scene.width": args.width, "scene.length": args.length,
                          "scene.height": args.height, "scene.clutter": args.clutter})
    elif args.command == "locate":
        overrides.update({"fusion.mode": args.fusion, "cloud.n_rays": args.n_rays,
                          "grid.spacing": args.grid_spacing, "grid.refine": args.refine})
    elif args.command == "simulate":
        overrides.update({"fusion.mode": args.fusion, "noise.sigma_eta_deg": args.sigma_eta,
                          "noise.sigma_nu_pt": args.sigma_nu, "noise.sigma_nu_rpt": args.sigma_nu,
                          "sim.n_trials": args.n_trials})
    return with_overrides(cfg, overrides)


def parse_sweep(text: str) -> Tuple[str, List[str], List[Any]]:
    """解析 axis=v1,v2,...[deg]，返回 (参数名, 原始标签, 配置单位下的取值)"""
    if "=" not in text:
        raise ConfigError(f"扫描参数格式应为 axis=v1,v2,...: {text}")
    axis, raw = (part.strip() for part in text.split("=", 1))
    if axis not in SWEEP_AXES:
        raise ConfigError(f"不支持的扫描参数: {axis}，可选 {', '.join(SWEEP_AXES)}")
    if raw.endswith("deg"):
        if axis != SWEEP_SIGMA_ETA:
            raise ConfigError(f"只有 {SWEEP_SIGMA_ETA} 可以使用 deg 单位")
        raw = raw[:-3]
    labels = [v.strip() for v in raw.split(",") if v.strip()]
    if not labels:
        raise ConfigError("扫描取值为空")
    if axis == SWEEP_FUSION:
        for label in labels:
            if label not in FUSION_MODES:
                raise ConfigError(f"未知的融合模式: {label}")
        return axis, labels, list(labels)
    try:
        values = [float(v) for v in labels]
    except ValueError as e:
        raise ConfigError(f"扫描取值不是数值: {raw}") from e
    if any(v < 0 for v in values):
        raise ConfigError("噪声标准差不能为负")
    return axis, labels, values


def cmd_gen_scene(cfg: RunConfig, args: argparse.Namespace) -> int:
    s = cfg.scene
    scene = generate_box_scene(s.width, s.length, s.height, clutter=s.clutter, seed=s.clutter_seed)
    output = args.output or os.path.join(cfg.out, "scene.json")
    directory = os.path.dirname(os.path.abspath(output))
    if not ensure_directory(directory):
        raise ConfigError(f"无法创建目录: {directory}")
    save_scene(scene, output)
    logging.info(f"场景已写入: {output} ({len(scene.surfaces)} 个表面, {len(scene.base_stations)} 个基站)")
    print(output)
    return 0


def cmd_locate(cfg: RunConfig, args: argparse.Namespace) -> int:
    dumps = [d.strip() for d in args.dump.split(",") if d.strip()]
    for d in dumps:
        if d not in DUMP_KINDS:
            raise ConfigError(f"未知的导出类型: {d}，可选 {', '.join(DUMP_KINDS)}")

    scene = build_scene(cfg)
    try:
        with open(args.measurements, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"无法读取测量文件 {args.measurements}: {e}") from e
    measurements = measurements_from_dict(data, scene)
    logging.info(f"已读取测量: AoA {len(measurements.angles)} 条, PT {len(measurements.pts)} 条, "
                 f"RPT {len(measurements.rpts)} 条")

    fusion_cfg = FusionConfig(cfg.fusion.mode, selection_config(cfg), cfg.cloud.step)
    out = localize(scene, measurements, cfg.cloud.n_rays, rays_config(cfg), fusion_cfg, em_config(cfg),
                   cfg.grid.spacing, cfg.grid.refine, cfg.seed, posterior_workers=cfg.sim.workers)

    report: Dict[str, Any] = {"estimate": [round(float(v), 6) for v in out.estimate],
                              "fusion": cfg.fusion.mode}
    if "ground_truth" in data:
        truth = np.asarray(data["ground_truth"], dtype=float).reshape(3)
        report["ground_truth"] = truth.tolist()
        report["epsilon_m"] = round(float(np.linalg.norm(out.estimate - truth)), 6)

    if dumps:
        if not ensure_directory(cfg.out):
            raise ConfigError(f"无法创建输出目录: {cfg.out}")
        if "clouds" in dumps:
            for bs_id, cloud in sorted(out.fused.items()):
                write_clouds_csv([cloud], os.path.join(cfg.out, f"cloud_bs{bs_id}.csv"))
        if "mixtures" in dumps:
            write_mixtures_json(out.mixtures, os.path.join(cfg.out, "mixtures.json"))
        if "field" in dumps:
            write_field_csv(out.field, os.path.join(cfg.out, "field.csv"), args.field_decimation)

    print(json.dumps(report, ensure_ascii=False))
    return 0


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    scene = build_scene(cfg)
    base = to_trial_config(cfg, scene)
    echo = config_to_dict(cfg)

    if not args.sweep:
        result = run_campaign(base, cfg.sim.n_trials, cfg.sim.workers)
        write_campaign(result, cfg.out, echo)
        if args.report:
            summary = result.summary(echo)
            write_campaign_pdf(summary, result.cdf, os.path.join(cfg.out, "report.pdf"))
        return 0

    axis, labels, values = parse_sweep(args.sweep)
    core_values = [math.radians(v) for v in values] if axis == SWEEP_SIGMA_ETA else values
    results = sweep(base, axis, core_values, cfg.sim.n_trials, cfg.sim.workers)

    pages = []
    for label, value, core_value in zip(labels, values, core_values):
        result = results[core_value]
        value_echo = config_to_dict(with_overrides(cfg, {_SWEEP_KEYS[axis]: value}))
        write_campaign(result, cfg.out, value_echo, suffix=f"_{axis}_{clean_filename(label)}")
        pages.append((f"{axis} = {label}", result.summary(value_echo), result.cdf))
    if args.report:
        write_sweep_report(pages, os.path.join(cfg.out, "report.pdf"))
    return 0


_COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "locate": cmd_locate,
    "simulate": cmd_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(config_to_dict(cfg), indent=2, ensure_ascii=False))
            return 0
        if not args.command:
            parser.print_help()
            return 2
        return _COMMANDS[args.command](cfg, args)
    except NlosLocateError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return 1
    except OSError as e:
        logging.error(f"文件读写失败: {e}")
        return 1
    except ValueError as e:
        logging.error(f"参数错误: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
