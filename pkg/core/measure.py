#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测量生成与误差模型：真实 AoA/PT/RPT、高斯扰动、PT/RPT 到长度的映射
"""

import math
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, DegenerateDistributionError, NoPathFoundError
from .scene import (
    DEFAULT_MAX_BOUNCES, DEFAULT_MAX_LENGTH, Scene, angles_from_direction, closest_approach,
    direction_from_angles, nearest_hits, trace_batch,
)

SPEED_OF_LIGHT = 299_792_458.0

TWO_PI = 2.0 * math.pi

RPT_ALL_PAIRS = "all-pairs"
RPT_REFERENCE = "reference"


def wrap_angle(value):
    """把角度差归一化到 (-π, π]"""
    r = np.mod(np.asarray(value, dtype=float) + math.pi, TWO_PI) - math.pi
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    if r.ndim == 0:
        return float(r)
    return r


def normalize_angles(azimuth: float, elevation: float) -> Tuple[float, float]:
    """俯仰角超出 ±π/2 时翻折，并把方位角折回 (-π, π]"""
    if elevation > math.pi / 2:
        elevation = math.pi - elevation
        azimuth += math.pi
    elif elevation < -math.pi / 2:
        elevation = -math.pi - elevation
        azimuth += math.pi
    return wrap_angle(azimuth), elevation


@dataclass(frozen=True)
class AngleMeasurement:
    """AoA 测量（弧度），σ_η 同时作用于方位角和俯仰角"""

    bs_id: int
    azimuth: float
    elevation: float
    sigma_eta: float

    def __post_init__(self):
        if self.sigma_eta < 0:
            raise ValueError("sigma_eta 不能为负")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError(f"俯仰角超出范围: {self.elevation}")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))


@dataclass(frozen=True)
class PtMeasurement:
    """传播时间测量，噪声以长度 σ_ν 表示"""

    bs_id: int
    time: float
    sigma_nu: float

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("传播时间不能为负")
        if self.sigma_nu < 0:
            raise ValueError("sigma_nu 不能为负")

    @classmethod
    def from_length(cls, bs_id: int, length: float, sigma_nu: float) -> "PtMeasurement":
        return cls(bs_id, float(length) / SPEED_OF_LIGHT, sigma_nu)

    @property
    def equivalent_length(self) -> float:
        """L = y·c"""
        return self.time * SPEED_OF_LIGHT


@dataclass(frozen=True)
class RptMeasurement:
    """相对传播时间测量，ΔL = length_i - length_j"""

    bs_pair: Tuple[int, int]
    delta_length: float
    sigma_nu: float

    def __post_init__(self):
        if self.sigma_nu < 0:
            raise ValueError("sigma_nu 不能为负")
        i, j = self.bs_pair
        if i == j:
            raise ValueError("RPT 基站对必须是两个不同的基站")
        object.__setattr__(self, "bs_pair", (int(i), int(j)))

    def swapped(self) -> "RptMeasurement":
        i, j = self.bs_pair
        return RptMeasurement((j, i), -self.delta_length, self.sigma_nu)


@dataclass(frozen=True)
class MeasurementSet:
    """全部基站的测量向量 y"""

    angles: Dict[int, AngleMeasurement] = field(default_factory=dict)
    pts: Dict[int, PtMeasurement] = field(default_factory=dict)
    rpts: Dict[Tuple[int, int], RptMeasurement] = field(default_factory=dict)

    @classmethod
    def build(cls, angles: Iterable[AngleMeasurement] = (), pts: Iterable[PtMeasurement] = (),
              rpts: Iterable[RptMeasurement] = ()) -> "MeasurementSet":
        """由列表构建，同一类别同一基站（对）只允许一条测量"""
        angle_map: Dict[int, AngleMeasurement] = {}
        for m in angles:
            if m.bs_id in angle_map:
                raise ValueError(f"基站 {m.bs_id} 的 AoA 测量重复")
            angle_map[m.bs_id] = m
        pt_map: Dict[int, PtMeasurement] = {}
        for m in pts:
            if m.bs_id in pt_map:
                raise ValueError(f"基站 {m.bs_id} 的 PT 测量重复")
            pt_map[m.bs_id] = m
        rpt_map: Dict[Tuple[int, int], RptMeasurement] = {}
        for m in rpts:
            i, j = m.bs_pair
            if (i, j) in rpt_map or (j, i) in rpt_map:
                raise ValueError(f"基站对 {m.bs_pair} 的 RPT 测量重复")
            rpt_map[(i, j)] = m
        return cls(angle_map, pt_map, rpt_map)

    @property
    def bs_ids(self) -> List[int]:
        return sorted(self.angles)

    def angle(self, bs_id: int) -> Optional[AngleMeasurement]:
        return self.angles.get(bs_id)

    def pt(self, bs_id: int) -> Optional[PtMeasurement]:
        return self.pts.get(bs_id)

    def rpt(self, i: int, j: int) -> Optional[RptMeasurement]:
        """按 (i, j) 顺序取 RPT，存储顺序相反时自动取负"""
        if (i, j) in self.rpts:
            return self.rpts[(i, j)]
        if (j, i) in self.rpts:
            return self.rpts[(j, i)].swapped()
        return None


@dataclass(frozen=True)
class Arrival:
    """某个基站的主到达路径"""

    bs_id: int
    azimuth: float
    elevation: float
    length: float
    bounces: int


@dataclass(frozen=True)
class GroundTruth:
    """UE 真实位置及各基站的真实到达参数"""

    ue_position: np.ndarray
    arrivals: Dict[int, Arrival]
    missing: Dict[int, str] = field(default_factory=dict)

    @property
    def bs_ids(self) -> List[int]:
        return sorted(self.arrivals)


@dataclass(frozen=True)
class TruthSearchConfig:
    """真实路径搜索参数：粗采样前向追踪 + 局部细化"""

    n_directions: int = 30000
    capture_radius: float = 0.6
    refine_tol: float = 1e-4
    max_candidates: int = 6
    max_length: float = DEFAULT_MAX_LENGTH


@dataclass(frozen=True)
class NoiseSigmas:
    sigma_eta: float = 0.0
    sigma_nu_pt: float = 0.0
    sigma_nu_rpt: float = 0.0

    def __post_init__(self):
        if min(self.sigma_eta, self.sigma_nu_pt, self.sigma_nu_rpt) < 0:
            raise ValueError("噪声标准差不能为负")


@dataclass(frozen=True)
class Categories:
    """要生成的测量类别"""

    pt: bool = False
    rpt: bool = False
    rpt_topology: str = RPT_ALL_PAIRS
    reference_bs: Optional[int] = None


# ---------------------------------------------------------------------------
# 真实到达参数
# ---------------------------------------------------------------------------

def fibonacci_directions(count: int) -> np.ndarray:
    """球面 Fibonacci 点阵方向"""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _line_of_sight(scene: Scene, origin: np.ndarray, target: np.ndarray) -> bool:
    v = target - origin
    dist = float(np.linalg.norm(v))
    if dist == 0.0:
        return True
    sid, hit = nearest_hits(origin[None], (v / dist)[None], scene)
    return bool(sid[0] < 0 or hit[0] >= dist - 1e-9)


def _approach(scene: Scene, origin: np.ndarray, angles, ue: np.ndarray, max_bounces: int, max_length: float):
    direction = direction_from_angles(angles[0], angles[1])
    bundle = trace_batch(origin[None], direction[None], scene, max_bounces, max_length)
    dist, length, seg = closest_approach(bundle, ue)
    return float(dist[0]), float(length[0]), int(seg[0])


def true_arrival(scene: Scene, bs_id: int, ue, max_bounces: int = DEFAULT_MAX_BOUNCES,
                 search: Optional[TruthSearchConfig] = None) -> Arrival:
    """某个基站到 UE 的最短有效镜面路径（无遮挡时为直射径）"""
    search = search or TruthSearchConfig()
    ue = np.asarray(ue, dtype=float)
    origin = scene.station(bs_id).position

    if _line_of_sight(scene, origin, ue):
        az, el = angles_from_direction(ue - origin)
        return Arrival(bs_id, az, el, float(np.linalg.norm(ue - origin)), 0)

    directions = fibonacci_directions(search.n_directions)
    bundle = trace_batch(np.repeat(origin[None], len(directions), axis=0), directions, scene,
                         max_bounces, search.max_length, bs_id)
    dist, length, seg = closest_approach(bundle, ue)
    near = np.flatnonzero(dist < search.capture_radius)

    # 同一反射面序列只保留最近的一条射线
    best_by_sequence: Dict[Tuple[int, ...], int] = {}
    for r in near:
        key = tuple(int(s) for s in bundle.surface_ids[r, :seg[r]])
        if key not in best_by_sequence or dist[r] < dist[best_by_sequence[key]]:
            best_by_sequence[key] = int(r)
    candidates = sorted(best_by_sequence.values(), key=lambda r: length[r])[:search.max_candidates]

    best: Optional[Arrival] = None
    for r in candidates:
        start = np.array(angles_from_direction(directions[r]))
        scale = max(search.capture_radius / max(length[r], 1e-3), 1e-4)
        simplex = np.array([start, start + [scale, 0.0], start + [0.0, scale]])
        result = minimize(
            lambda a: _approach(scene, origin, a, ue, max_bounces, search.max_length)[0] ** 2,
            start, method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": 1e-12, "fatol": 1e-14, "maxiter": 600},
        )
        d, path_length, k = _approach(scene, origin, result.x, ue, max_bounces, search.max_length)
        if d > search.refine_tol or k < 1:
            logging.debug(f"基站 {bs_id} 候选路径细化未收敛: 距离 {d:.2e} m")
            continue
        az, el = normalize_angles(float(result.x[0]), float(result.x[1]))
        if best is None or path_length < best.length:
            best = Arrival(bs_id, az, el, path_length, k)

    if best is None:
        raise NoPathFoundError(f"no path found: 基站 {bs_id} 在 {max_bounces} 次反射内没有到达UE的路径", bs_id=bs_id)
    return best


def true_observables(scene: Scene, ue, max_bounces: int = DEFAULT_MAX_BOUNCES,
                     search: Optional[TruthSearchConfig] = None) -> GroundTruth:
    """计算所有基站的真实观测量；不可达的基站记录在 missing 中"""
    ue = np.asarray(ue, dtype=float).reshape(3)
    if not scene.contains(ue):
        raise ValueError(f"UE 位置在场景之外: {ue.tolist()}")

    arrivals: Dict[int, Arrival] = {}
    missing: Dict[int, str] = {}
    for bs_id in scene.bs_ids:
        try:
            arrivals[bs_id] = true_arrival(scene, bs_id, ue, max_bounces, search)
        except NoPathFoundError as e:
            logging.info(f"基站 {bs_id} 无可用路径: {e}")
            missing[bs_id] = str(e)

    if not arrivals:
        raise NoPathFoundError("no path found: 所有基站都无法到达UE")
    return GroundTruth(ue, arrivals, missing)


# ---------------------------------------------------------------------------
# 扰动
# ---------------------------------------------------------------------------

def rpt_pairs(bs_ids: Iterable[int], topology: str = RPT_ALL_PAIRS,
              reference_bs: Optional[int] = None) -> List[Tuple[int, int]]:
    """RPT 基站对：全部无序对，或只取与参考基站组成的对"""
    ids = sorted(bs_ids)
    if topology == RPT_ALL_PAIRS:
        return list(combinations(ids, 2))
    if topology == RPT_REFERENCE:
        ref = ids[0] if reference_bs is None else reference_bs
        if ref not in ids:
            return []
        return [(i, ref) for i in ids if i != ref]
    raise ConfigError(f"未知的RPT拓扑: {topology}")


def perturb(truth: GroundTruth, sigmas: NoiseSigmas, rng: np.random.Generator,
            categories: Optional[Categories] = None) -> MeasurementSet:
    """按高斯误差模型扰动真实观测量"""
    categories = categories or Categories()
    angles = []
    for bs_id in truth.bs_ids:
        arrival = truth.arrivals[bs_id]
        noise = rng.normal(0.0, sigmas.sigma_eta, size=2)
        az, el = normalize_angles(arrival.azimuth + noise[0], arrival.elevation + noise[1])
        angles.append(AngleMeasurement(bs_id, az, el, sigmas.sigma_eta))

    pts = []
    if categories.pt:
        for bs_id in truth.bs_ids:
            length = truth.arrivals[bs_id].length + rng.normal(0.0, sigmas.sigma_nu_pt)
            pts.append(PtMeasurement.from_length(bs_id, max(length, 0.0), sigmas.sigma_nu_pt))

    rpts = []
    if categories.rpt:
        for i, j in rpt_pairs(truth.bs_ids, categories.rpt_topology, categories.reference_bs):
            delta = truth.arrivals[i].length - truth.arrivals[j].length
            rpts.append(RptMeasurement((i, j), delta + rng.normal(0.0, sigmas.sigma_nu_rpt), sigmas.sigma_nu_rpt))

    return MeasurementSet.build(angles, pts, rpts)


# ---------------------------------------------------------------------------
# 误差分布
# ---------------------------------------------------------------------------

def aoa_log_density(measured: AngleMeasurement, candidate) -> float:
    """候选角度 (方位角, 俯仰角) 在 AoA 误差模型下的对数密度"""
    sigma = measured.sigma_eta
    if sigma <= 0:
        raise DegenerateDistributionError("sigma_eta 为 0，AoA 分布退化为点质量")
    candidate = np.asarray(candidate, dtype=float)
    d_az = wrap_angle(candidate[..., 0] - measured.azimuth)
    d_el = candidate[..., 1] - measured.elevation
    value = -math.log(TWO_PI * sigma * sigma) - 0.5 * (np.square(d_az) + np.square(d_el)) / (sigma * sigma)
    if np.ndim(value) == 0:
        return float(value)
    return value


def sample_aoa_directions(measured: AngleMeasurement, count: int, rng: np.random.Generator) -> np.ndarray:
    """按 AoA 误差模型采样发射方向"""
    if count < 1:
        raise ValueError("count 必须 ≥ 1")
    az = measured.azimuth + rng.normal(0.0, measured.sigma_eta, count)
    el = measured.elevation + rng.normal(0.0, measured.sigma_eta, count)
    # 俯仰角越过天顶/天底时，方向向量本身连续，无需折叠
    return direction_from_angles(az, el)


def sample_pt_lengths(pt: PtMeasurement, count: int, rng: np.random.Generator) -> np.ndarray:
    """按 p(L|y) 采样长度，截断在 0 以上"""
    if count < 1:
        raise ValueError("count 必须 ≥ 1")
    return np.maximum(rng.normal(pt.equivalent_length, pt.sigma_nu, count), 0.0)


def sample_rpt_deltas(rpt: RptMeasurement, count: int, rng: np.random.Generator) -> np.ndarray:
    """按 p(ΔL|y_i, y_j) 采样长度差"""
    if count < 1:
        raise ValueError("count 必须 ≥ 1")
    return rng.normal(rpt.delta_length, rpt.sigma_nu, count)


# ---------------------------------------------------------------------------
# 测量文件
# ---------------------------------------------------------------------------

def measurements_from_dict(data: Mapping[str, Any], scene: Optional[Scene] = None) -> MeasurementSet:
    """解析测量文件内容，角度以度为单位"""
    known = set(scene.bs_ids) if scene is not None else None

    def check(bs_id: int) -> int:
        bs_id = int(bs_id)
        if known is not None and bs_id not in known:
            raise ConfigError(f"unknown BS id: 未知基站编号 {bs_id}")
        return bs_id

    try:
        angles = [
            AngleMeasurement(check(item["bs"]), math.radians(item["azimuth_deg"]),
                             math.radians(item["elevation_deg"]), math.radians(item["sigma_deg"]))
            for item in data.get("aoa", [])
        ]
        pts = [
            PtMeasurement.from_length(check(item["bs"]), item["length_m"], item["sigma_m"])
            for item in data.get("pt", [])
        ]
        rpts = [
            RptMeasurement((check(item["bs_i"]), check(item["bs_j"])), item["delta_m"], item["sigma_m"])
            for item in data.get("rpt", [])
        ]
        return MeasurementSet.build(angles, pts, rpts)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"测量文件格式错误: {e}") from e


def measurements_to_dict(measurements: MeasurementSet) -> Dict[str, Any]:
    """测量集合序列化为测量文件格式"""
    return {
        "aoa": [
            {"bs": m.bs_id, "azimuth_deg": math.degrees(m.azimuth),
             "elevation_deg": math.degrees(m.elevation), "sigma_deg": math.degrees(m.sigma_eta)}
            for m in measurements.angles.values()
        ],
        "pt": [
            {"bs": m.bs_id, "length_m": m.equivalent_length, "sigma_m": m.sigma_nu}
            for m in measurements.pts.values()
        ],
        "rpt": [
            {"bs_i": m.bs_pair[0], "bs_j": m.bs_pair[1], "delta_m": m.delta_length, "sigma_m": m.sigma_nu}
            for m in measurements.rpts.values()
        ],
    }
