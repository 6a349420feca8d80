#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行配置：默认值 < 配置文件 < 命令行参数
"""

import json
import math
import logging
import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Mapping, Optional, Union, get_args, get_origin, get_type_hints

from core.cloud import FUSION_AOA, FUSION_MODES, ORDER_BINS, ORDER_PER_RAY, RaysConfig, SelectionConfig
from core.errors import ConfigError
from core.gmm import EmConfig
from core.measure import RPT_ALL_PAIRS, RPT_REFERENCE, NoiseSigmas, TruthSearchConfig
from core.scene import Scene, generate_box_scene, load_scene_file
from core.sim import TrialConfig


@dataclass
class SceneSection:
    """场景：给出 path 时读取文件，否则按尺寸生成盒形场景"""

    path: Optional[str] = None
    width: float = 8.0
    length: float = 18.0
    height: float = 2.5
    clutter: int = 6
    clutter_seed: int = 0


@dataclass
class NoiseSection:
    sigma_eta_deg: float = 1.0
    sigma_nu_pt: float = 0.5
    sigma_nu_rpt: float = 0.5


@dataclass
class FusionSection:
    mode: str = FUSION_AOA
    rpt_topology: str = RPT_ALL_PAIRS
    reference_bs: Optional[int] = None


@dataclass
class CloudSection:
    n_rays: int = 2000
    max_bounces: int = 5
    max_length: float = 100.0
    step: float = 0.10
    hemisphere: bool = False


@dataclass
class SelectionSection:
    n_select: int = 2000
    bin_width: Optional[float] = None
    fallback: bool = True
    fallback_bins: int = 3
    max_redraws: int = 10
    order: str = ORDER_BINS


@dataclass
class GmmSection:
    k_max: int = 8
    fixed_k: Optional[int] = None
    max_iters: int = 200
    tol: float = 1e-6
    n_init: int = 4
    reg_floor: Optional[float] = None
    max_fit_points: int = 4000


@dataclass
class GridSection:
    spacing: float = 0.05
    refine: bool = False


@dataclass
class SimSection:
    n_trials: int = 500
    workers: int = 1
    drop_margin: float = 0.1
    truth_directions: int = 30000


@dataclass
class RunConfig:
    """一次运行的完整配置"""

    scene: SceneSection = field(default_factory=SceneSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    cloud: CloudSection = field(default_factory=CloudSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    gmm: GmmSection = field(default_factory=GmmSection)
    grid: GridSection = field(default_factory=GridSection)
    sim: SimSection = field(default_factory=SimSection)
    seed: int = 0
    out: str = "output"


_TYPE_NAMES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _unwrap(tp) -> tuple:
    """Optional[X] -> (X, True)"""
    if get_origin(tp) is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def config_schema(cls=RunConfig) -> Dict[str, Any]:
    """由数据类生成的 JSON-schema 风格描述"""
    hints = get_type_hints(cls)
    properties = {}
    defaults = cls()
    for f in fields(cls):
        tp, optional = _unwrap(hints[f.name])
        if is_dataclass(tp):
            properties[f.name] = config_schema(tp)
            continue
        type_name = _TYPE_NAMES[tp]
        properties[f.name] = {
            "type": [type_name, "null"] if optional else type_name,
            "default": getattr(defaults, f.name),
        }
    return {"type": "object", "additionalProperties": False, "properties": properties}


def _coerce(value: Any, tp, optional: bool, where: str):
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where} 不能为空")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} 应为布尔值，实际为 {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} 应为整数，实际为 {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} 应为数值，实际为 {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} 应为字符串，实际为 {value!r}")
        return value
    raise ConfigError(f"{where} 的类型不受支持")


def _from_dict(cls, data: Mapping[str, Any], prefix: str = ""):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or '配置'} 应为对象")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"未知的配置项: {', '.join(prefix + k for k in unknown)}")

    values = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        tp, optional = _unwrap(hints[f.name])
        where = prefix + f.name
        if is_dataclass(tp):
            values[f.name] = _from_dict(tp, data[f.name], where + ".")
        else:
            values[f.name] = _coerce(data[f.name], tp, optional, where)
    return cls(**values)


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    cfg = _from_dict(RunConfig, data)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    """读取 JSON 配置文件，缺省项取默认值"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法的JSON {path}: {e}") from e
    logging.info(f"已加载配置: {path}")
    return config_from_dict(data)


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def validate_config(cfg: RunConfig) -> RunConfig:
    """检查取值范围"""
    s = cfg.scene
    _require(s.width > 0 and s.length > 0 and s.height > 0, "scene 的尺寸必须为正")
    _require(s.clutter >= 0, "scene.clutter 不能为负")

    n = cfg.noise
    _require(min(n.sigma_eta_deg, n.sigma_nu_pt, n.sigma_nu_rpt) >= 0, "噪声标准差不能为负")

    _require(cfg.fusion.mode in FUSION_MODES, f"fusion.mode 必须是 {', '.join(FUSION_MODES)} 之一")
    _require(cfg.fusion.rpt_topology in (RPT_ALL_PAIRS, RPT_REFERENCE),
             f"fusion.rpt_topology 必须是 {RPT_ALL_PAIRS} 或 {RPT_REFERENCE}")

    c = cfg.cloud
    _require(c.n_rays >= 1, "cloud.n_rays 必须 ≥ 1")
    _require(c.max_bounces >= 0, "cloud.max_bounces 不能为负")
    _require(c.max_length > 0 and c.step > 0, "cloud.max_length 和 cloud.step 必须为正")

    sel = cfg.selection
    _require(sel.n_select >= 1, "selection.n_select 必须 ≥ 1")
    _require(sel.bin_width is None or sel.bin_width > 0, "selection.bin_width 必须为正")
    _require(sel.fallback_bins >= 0 and sel.max_redraws >= 0, "selection 的回退参数不能为负")
    _require(sel.order in (ORDER_BINS, ORDER_PER_RAY), f"selection.order 必须是 {ORDER_BINS} 或 {ORDER_PER_RAY}")

    g = cfg.gmm
    _require(g.k_max >= 1, "gmm.k_max 必须 ≥ 1")
    _require(g.fixed_k is None or g.fixed_k >= 1, "gmm.fixed_k 必须 ≥ 1")
    _require(g.max_iters >= 1 and g.n_init >= 1, "gmm.max_iters 和 gmm.n_init 必须 ≥ 1")
    _require(g.tol > 0, "gmm.tol 必须为正")
    _require(g.reg_floor is None or g.reg_floor > 0, "gmm.reg_floor 必须为正")
    _require(g.max_fit_points >= 1, "gmm.max_fit_points 必须 ≥ 1")

    _require(cfg.grid.spacing > 0, "grid.spacing 必须为正")

    sim = cfg.sim
    _require(sim.n_trials >= 1, "sim.n_trials 必须 ≥ 1")
    _require(sim.workers >= 1, "sim.workers 必须 ≥ 1")
    _require(sim.drop_margin >= 0, "sim.drop_margin 不能为负")
    _require(sim.truth_directions >= 100, "sim.truth_directions 必须 ≥ 100")

    _require(0 <= cfg.seed < 2 ** 64, "seed 必须是无符号64位整数")
    return cfg


def with_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """按 "section.key" 覆盖配置项，None 表示不覆盖"""
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section_name, name = key.split(".", 1)
            section = getattr(cfg, section_name)
            cfg = replace(cfg, **{section_name: replace(section, **{name: value})})
        else:
            cfg = replace(cfg, **{key: value})
    return validate_config(cfg)


def build_scene(cfg: RunConfig) -> Scene:
    s = cfg.scene
    if s.path:
        return load_scene_file(s.path)
    return generate_box_scene(s.width, s.length, s.height, clutter=s.clutter, seed=s.clutter_seed)


def rays_config(cfg: RunConfig) -> RaysConfig:
    c = cfg.cloud
    return RaysConfig(c.max_bounces, c.max_length, c.step, c.hemisphere)


def selection_config(cfg: RunConfig) -> SelectionConfig:
    sel = cfg.selection
    return SelectionConfig(sel.n_select, sel.bin_width, sel.fallback, sel.fallback_bins, sel.max_redraws,
                           sel.order, cfg.fusion.rpt_topology, cfg.fusion.reference_bs)


def em_config(cfg: RunConfig) -> EmConfig:
    g = cfg.gmm
    return EmConfig(g.max_iters, g.tol, g.reg_floor, g.n_init, g.k_max, g.fixed_k, g.max_fit_points, cfg.cloud.step)


def to_trial_config(cfg: RunConfig, scene: Optional[Scene] = None) -> TrialConfig:
    """转换为核心层的试验配置（角度转为弧度）"""
    scene = scene if scene is not None else build_scene(cfg)
    sigmas = NoiseSigmas(math.radians(cfg.noise.sigma_eta_deg), cfg.noise.sigma_nu_pt, cfg.noise.sigma_nu_rpt)
    return TrialConfig(
        scene=scene,
        sigmas=sigmas,
        fusion=cfg.fusion.mode,
        n_rays=cfg.cloud.n_rays,
        rays=rays_config(cfg),
        selection=selection_config(cfg),
        em=em_config(cfg),
        grid_spacing=cfg.grid.spacing,
        refine=cfg.grid.refine,
        seed=cfg.seed,
        drop_margin=cfg.sim.drop_margin,
        truth=TruthSearchConfig(n_directions=cfg.sim.truth_directions, max_length=cfg.cloud.max_length),
    )
