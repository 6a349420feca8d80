#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
蒙特卡洛点云生成与融合筛选：纯 AoA 点云、PT 分箱筛选、RPT 点对筛选
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import FusionError, InconsistentMeasurementError, NlosLocateError
from .measure import (
    RPT_ALL_PAIRS, AngleMeasurement, MeasurementSet, PtMeasurement, RptMeasurement,
    rpt_pairs, sample_aoa_directions, sample_pt_lengths, sample_rpt_deltas,
)
from .scene import (
    DEFAULT_MAX_BOUNCES, DEFAULT_MAX_LENGTH, DEFAULT_STEP, SELF_HIT_EPS, PathPoint, Scene,
    discretize_bundle, exit_distances, trace_batch,
)
from .utils import make_rng

PROVENANCE_AOA = "aoa-only"
PROVENANCE_PT = "aoa+pt"
PROVENANCE_RPT = "aoa+rpt"
PROVENANCE_ISOTROPIC = "isotropic"

FUSION_AOA = "aoa"
FUSION_PT = "aoa+pt"
FUSION_RPT = "aoa+rpt"
FUSION_MODES = (FUSION_AOA, FUSION_PT, FUSION_RPT)

ORDER_BINS = "bins"
ORDER_PER_RAY = "per-ray"

# 各向同性点云重新抽样方向的最大轮数
MAX_DIRECTION_ROUNDS = 50


@dataclass(frozen=True)
class RaysConfig:
    """射线发射参数"""

    max_bounces: int = DEFAULT_MAX_BOUNCES
    max_length: float = DEFAULT_MAX_LENGTH
    step: float = DEFAULT_STEP
    hemisphere: bool = False


@dataclass(frozen=True)
class SelectionConfig:
    """PT/RPT 筛选参数"""

    n_select: int = 2000
    bin_width: Optional[float] = None
    fallback: bool = True
    fallback_bins: int = 3
    max_redraws: int = 10
    order: str = ORDER_BINS
    rpt_topology: str = RPT_ALL_PAIRS
    reference_bs: Optional[int] = None


@dataclass(frozen=True)
class FusionConfig:
    mode: str = FUSION_AOA
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    step: float = DEFAULT_STEP

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"未知的融合模式: {self.mode}")


def auto_bin_width(sigma_nu: float, step: float = DEFAULT_STEP) -> float:
    """默认分箱宽度 max(σ_ν/5, step/2)"""
    return max(sigma_nu / 5.0, step / 2.0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """某个基站的点云，数组形式存储"""

    bs_id: int
    positions: np.ndarray
    lengths: np.ndarray
    ray_index: np.ndarray
    provenance: str = PROVENANCE_AOA
    targets: Optional[np.ndarray] = None
    fallback: Optional[np.ndarray] = None
    source_index: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.lengths.shape[0])

    @property
    def points(self) -> List[PathPoint]:
        return [PathPoint(self.positions[k], float(self.lengths[k]), self.bs_id, int(self.ray_index[k]))
                for k in range(len(self))]

    def subset(self, indices, provenance: str, targets=None, fallback=None) -> "PointCloud":
        indices = np.asarray(indices, dtype=int)
        parent = self.source_index[indices] if self.source_index is not None else indices
        return PointCloud(self.bs_id, self.positions[indices], self.lengths[indices], self.ray_index[indices],
                          provenance, targets, fallback, parent)

    @staticmethod
    def concat(clouds: Sequence["PointCloud"], provenance: Optional[str] = None) -> "PointCloud":
        """合并同一基站的多个点云"""
        first = clouds[0]

        def join(attr):
            parts = [getattr(c, attr) for c in clouds]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts)

        return PointCloud(first.bs_id, np.concatenate([c.positions for c in clouds]),
                          np.concatenate([c.lengths for c in clouds]), np.concatenate([c.ray_index for c in clouds]),
                          provenance or first.provenance, join("targets"), join("fallback"), join("source_index"))


class LengthBins:
    """按长度排序后的等宽分箱，第 b 个箱覆盖 [b·w, (b+1)·w)"""

    def __init__(self, lengths, bin_width: float):
        if bin_width <= 0:
            raise ValueError("bin_width 必须为正")
        lengths = np.asarray(lengths, dtype=float)
        if lengths.size == 0:
            raise ValueError("点云为空")
        self.bin_width = float(bin_width)
        self.order = np.argsort(lengths, kind="stable")
        self.sorted_lengths = lengths[self.order]
        bin_ids = self.bin_of(self.sorted_lengths)
        self.first = int(bin_ids[0])
        self.last = int(bin_ids[-1])
        labels = np.arange(self.first, self.last + 2)
        self.edges = labels * self.bin_width
        self._bounds = np.searchsorted(bin_ids, labels, side="left")

    def bin_of(self, values):
        return np.floor(np.asarray(values, dtype=float) / self.bin_width).astype(int)

    def population(self, bins) -> np.ndarray:
        bins = np.atleast_1d(np.asarray(bins, dtype=int))
        inside = (bins >= self.first) & (bins <= self.last)
        k = np.clip(bins - self.first, 0, self.last - self.first)
        counts = self._bounds[k + 1] - self._bounds[k]
        return np.where(inside, counts, 0)

    def members(self, b: int) -> np.ndarray:
        """箱内点在原数组中的索引"""
        if b < self.first or b > self.last:
            return np.zeros(0, dtype=int)
        k = b - self.first
        return self.order[self._bounds[k]:self._bounds[k + 1]]

    def sample(self, b: int, size: int, rng: np.random.Generator) -> np.ndarray:
        k = b - self.first
        lo = self._bounds[k]
        hi = self._bounds[k + 1]
        return self.order[lo + rng.integers(0, hi - lo, size)]


class PairDifferenceTable:
    """两个点云之间长度差的惰性分箱表，不显式展开 |P_i|×|P_j| 个元素"""

    def __init__(self, lengths_i, lengths_j, bin_width: float):
        if bin_width <= 0:
            raise ValueError("bin_width 必须为正")
        self.lengths_i = np.asarray(lengths_i, dtype=float)
        self.lengths_j = np.asarray(lengths_j, dtype=float)
        if self.lengths_i.size == 0 or self.lengths_j.size == 0:
            raise ValueError("点云为空")
        self.bin_width = float(bin_width)
        self.order_j = np.argsort(self.lengths_j, kind="stable")
        self.sorted_j = self.lengths_j[self.order_j]
        self.first = int(np.floor((self.lengths_i.min() - self.sorted_j[-1]) / self.bin_width))
        self.last = int(np.floor((self.lengths_i.max() - self.sorted_j[0]) / self.bin_width))
        self._cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def universe_size(self) -> int:
        return int(self.lengths_i.size * self.lengths_j.size)

    def entry(self, a: int, b: int) -> float:
        return float(self.lengths_i[a] - self.lengths_j[b])

    def bin_of(self, values):
        return np.floor(np.asarray(values, dtype=float) / self.bin_width).astype(int)

    def _ranges(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        if k not in self._cache:
            # l_i - l_j ∈ [k·w, (k+1)·w)  <=>  l_j ∈ (l_i - (k+1)·w, l_i - k·w]
            lo = np.searchsorted(self.sorted_j, self.lengths_i - (k + 1) * self.bin_width, side="right")
            hi = np.searchsorted(self.sorted_j, self.lengths_i - k * self.bin_width, side="right")
            self._cache[k] = (lo, np.cumsum(hi - lo))
        return self._cache[k]

    def population(self, bins) -> np.ndarray:
        bins = np.atleast_1d(np.asarray(bins, dtype=int))
        out = np.zeros(bins.shape, dtype=int)
        for k in np.unique(bins):
            if self.first <= k <= self.last:
                out[bins == k] = int(self._ranges(int(k))[1][-1])
        return out

    def members(self, k: int) -> List[Tuple[int, int]]:
        """箱内全部点对（仅用于检查和小规模测试）"""
        if k < self.first or k > self.last:
            return []
        lo, cum = self._ranges(k)
        counts = np.diff(np.concatenate([[0], cum]))
        pairs = []
        for a in range(self.lengths_i.size):
            for off in range(counts[a]):
                pairs.append((a, int(self.order_j[lo[a] + off])))
        return pairs

    def sample(self, k: int, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """在第 k 个箱内均匀抽取点对"""
        lo, cum = self._ranges(k)
        u = rng.integers(0, cum[-1], size)
        a = np.searchsorted(cum, u, side="right")
        offset = u - np.where(a > 0, cum[a - 1], 0)
        return a, self.order_j[lo[a] + offset]


# ---------------------------------------------------------------------------
# 点云生成
# ---------------------------------------------------------------------------

def _cloud_from_directions(scene: Scene, bs_id: int, directions: np.ndarray, rays_cfg: RaysConfig,
                           provenance: str) -> PointCloud:
    origin = scene.station(bs_id).position
    bundle = trace_batch(np.repeat(origin[None], len(directions), axis=0), directions, scene,
                         rays_cfg.max_bounces, rays_cfg.max_length, bs_id)
    positions, lengths, ray_index = discretize_bundle(bundle, rays_cfg.step)
    # 起点在墙上且朝外的射线长度为 0，被墙吸收，不产生点
    entered = bundle.totals > SELF_HIT_EPS
    if not np.all(entered):
        logging.debug(f"基站 {bs_id}: {int(np.sum(~entered))} 条射线朝场景外发射，已丢弃")
        keep = entered[ray_index]
        positions, lengths, ray_index = positions[keep], lengths[keep], ray_index[keep]
    if lengths.size == 0:
        raise FusionError(f"基站 {bs_id} 生成的点云为空", bs_id=bs_id)
    logging.debug(f"基站 {bs_id}: {len(directions)} 条射线, {lengths.size} 个点 ({provenance})")
    return PointCloud(bs_id, positions, lengths, ray_index, provenance)


def generate_aoa_cloud(scene: Scene, bs_id: int, angle: AngleMeasurement, n_rays: int,
                       rays_cfg: Optional[RaysConfig], rng: np.random.Generator) -> PointCloud:
    """按 AoA 误差统计采样发射方向，追踪并离散化"""
    if n_rays < 1:
        raise ValueError("n_rays 必须 ≥ 1")
    if angle.bs_id != bs_id:
        raise ValueError(f"AoA 测量属于基站 {angle.bs_id}，而不是 {bs_id}")
    rays_cfg = rays_cfg or RaysConfig()
    directions = sample_aoa_directions(angle, n_rays, rng)
    return _cloud_from_directions(scene, bs_id, directions, rays_cfg, PROVENANCE_AOA)


def sample_isotropic_directions(n: int, rng: np.random.Generator, hemisphere: bool = False) -> np.ndarray:
    """球面（或下半球）上均匀分布的单位方向"""
    directions = rng.normal(size=(n, 3))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions = directions / np.where(norms > 0, norms, 1.0)
    if hemisphere:
        directions[:, 2] = -np.abs(directions[:, 2])
    return directions


def generate_isotropic_cloud(scene: Scene, bs_id: int, n_rays: int, rays_cfg: Optional[RaysConfig],
                             rng: np.random.Generator) -> PointCloud:
    """没有 AoA 测量时向所有方向（或下半球）发射射线

    基站位于包围盒边界上时，朝场景外的方向重新抽样，保证 n_rays 条射线都进入场景。
    """
    if n_rays < 1:
        raise ValueError("n_rays 必须 ≥ 1")
    rays_cfg = rays_cfg or RaysConfig()
    origin = scene.station(bs_id).position[None]
    accepted: List[np.ndarray] = []
    count = 0
    for _ in range(MAX_DIRECTION_ROUNDS):
        batch = sample_isotropic_directions(8 * (n_rays - count) + 64, rng, rays_cfg.hemisphere)
        inward = batch[exit_distances(np.repeat(origin, len(batch), axis=0), batch, scene) > SELF_HIT_EPS]
        inward = inward[:n_rays - count]
        accepted.append(inward)
        count += len(inward)
        if count == n_rays:
            break
    else:
        raise FusionError(f"基站 {bs_id} 处找不到进入场景的发射方向", bs_id=bs_id)
    return _cloud_from_directions(scene, bs_id, np.concatenate(accepted), rays_cfg, PROVENANCE_ISOTROPIC)


# ---------------------------------------------------------------------------
# 目标抽样的分箱解析
# ---------------------------------------------------------------------------

def _fallback_bins(target: float, b: int, bin_width: float, max_offset: int) -> List[int]:
    """按与目标值的距离排列邻近箱"""
    candidates = []
    for offset in range(1, max_offset + 1):
        for sign in (-1, 1):
            k = b + sign * offset
            lo = k * bin_width
            hi = lo + bin_width
            gap = lo - target if target < lo else target - hi
            candidates.append((max(gap, 0.0), k))
    candidates.sort()
    return [k for _, k in candidates]


def _resolve_targets(targets: np.ndarray, bin_of: Callable, population: Callable, bin_width: float,
                     redraw: Callable[[], float], cfg: SelectionConfig
                     ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """把每个目标抽样映射到非空箱

    返回 (保留的抽样序号, 使用的箱号, 记录的目标值, 是否回退)。
    """
    bins = bin_of(targets)
    ok = population(bins) > 0
    keep = list(np.flatnonzero(ok))
    used_bins = list(bins[ok])
    used_targets = list(targets[ok])
    fell_back = [False] * len(keep)

    if cfg.fallback:
        for i in np.flatnonzero(~ok):
            t = float(targets[i])
            for attempt in range(cfg.max_redraws + 1):
                b = int(bin_of(t))
                near = [k for k in _fallback_bins(t, b, bin_width, cfg.fallback_bins) if population(k)[0] > 0]
                if near:
                    keep.append(int(i))
                    used_bins.append(near[0])
                    used_targets.append(t)
                    fell_back.append(True)
                    break
                if attempt < cfg.max_redraws:
                    t = float(redraw())
                    if population(bin_of(t))[0] > 0:
                        keep.append(int(i))
                        used_bins.append(int(bin_of(t)))
                        used_targets.append(t)
                        fell_back.append(False)
                        break

    order = np.argsort(np.asarray(keep, dtype=int), kind="stable")
    return (np.asarray(keep, dtype=int)[order], np.asarray(used_bins, dtype=int)[order],
            np.asarray(used_targets, dtype=float)[order], np.asarray(fell_back, dtype=bool)[order])


# ---------------------------------------------------------------------------
# 算法1：PT 筛选
# ---------------------------------------------------------------------------

def _select_per_ray(cloud: PointCloud, pt: PtMeasurement, n_select: int, bin_width: float,
                    rng: np.random.Generator) -> PointCloud:
    """先选射线、再按 PT 抽一个距离，保留射线上长度最接近的点"""
    order = np.lexsort((cloud.lengths, cloud.ray_index))
    rays_sorted = cloud.ray_index[order]
    lengths_sorted = cloud.lengths[order]
    rays, starts = np.unique(rays_sorted, return_index=True)
    stops = np.append(starts[1:], rays_sorted.size)

    choice = rng.integers(0, rays.size, n_select)
    targets = sample_pt_lengths(pt, n_select, rng)
    picked = np.full(n_select, -1, dtype=int)
    for r in np.unique(choice):
        draws = np.flatnonzero(choice == r)
        seg = lengths_sorted[starts[r]:stops[r]]
        pos = np.clip(np.searchsorted(seg, targets[draws]), 1, max(seg.size - 1, 1))
        left = np.clip(pos - 1, 0, seg.size - 1)
        right = np.clip(pos, 0, seg.size - 1)
        nearest = np.where(np.abs(seg[left] - targets[draws]) <= np.abs(seg[right] - targets[draws]), left, right)
        accept = np.abs(seg[nearest] - targets[draws]) <= bin_width
        picked[draws[accept]] = order[starts[r] + nearest[accept]]

    ok = picked >= 0
    if not np.any(ok):
        raise InconsistentMeasurementError(f"PT inconsistent with geometry: 基站 {cloud.bs_id}", bs_id=cloud.bs_id)
    return cloud.subset(picked[ok], PROVENANCE_PT, targets[ok], np.zeros(int(ok.sum()), dtype=bool))


def select_by_pt(cloud: PointCloud, pt: PtMeasurement, n_select: int, bin_width: float,
                 rng: np.random.Generator, cfg: Optional[SelectionConfig] = None) -> PointCloud:
    """按 PT 分布抽取目标长度，在对应长度箱内随机选点（有放回）"""
    cfg = cfg or SelectionConfig()
    if bin_width <= 0:
        raise ValueError("bin_width 必须为正")
    if len(cloud) == 0:
        raise ValueError("点云为空")
    if cfg.order == ORDER_PER_RAY:
        return _select_per_ray(cloud, pt, n_select, bin_width, rng)

    bins = LengthBins(cloud.lengths, bin_width)
    targets = sample_pt_lengths(pt, n_select, rng)
    keep, used_bins, used_targets, fell_back = _resolve_targets(
        targets, bins.bin_of, bins.population, bin_width,
        lambda: sample_pt_lengths(pt, 1, rng)[0], cfg,
    )
    if keep.size == 0:
        raise InconsistentMeasurementError(f"PT inconsistent with geometry: 基站 {cloud.bs_id}", bs_id=cloud.bs_id)

    chosen = np.empty(keep.size, dtype=int)
    for b in np.unique(used_bins):
        slots = np.flatnonzero(used_bins == b)
        chosen[slots] = bins.sample(int(b), slots.size, rng)

    dropped = n_select - keep.size
    if dropped:
        logging.debug(f"基站 {cloud.bs_id}: {dropped} 个PT抽样落入空箱被丢弃")
    return cloud.subset(chosen, PROVENANCE_PT, used_targets, fell_back)


# ---------------------------------------------------------------------------
# 算法2：RPT 筛选
# ---------------------------------------------------------------------------

def select_by_rpt(cloud_i: PointCloud, cloud_j: PointCloud, rpt: RptMeasurement, n_select: int,
                  bin_width: float, rng: np.random.Generator,
                  cfg: Optional[SelectionConfig] = None) -> Tuple[PointCloud, PointCloud]:
    """按 RPT 分布抽取长度差，在对应差值箱内随机选点对"""
    cfg = cfg or SelectionConfig()
    if bin_width <= 0:
        raise ValueError("bin_width 必须为正")
    if len(cloud_i) == 0 or len(cloud_j) == 0:
        raise ValueError("点云为空")
    if rpt.bs_pair != (cloud_i.bs_id, cloud_j.bs_id):
        raise ValueError(f"RPT 基站对 {rpt.bs_pair} 与点云顺序 ({cloud_i.bs_id}, {cloud_j.bs_id}) 不一致")

    # 统一按基站编号升序计算，交换输入得到镜像结果
    if cloud_i.bs_id > cloud_j.bs_id:
        out_j, out_i = select_by_rpt(cloud_j, cloud_i, rpt.swapped(), n_select, bin_width, rng, cfg)
        return out_i, out_j

    table = PairDifferenceTable(cloud_i.lengths, cloud_j.lengths, bin_width)
    targets = sample_rpt_deltas(rpt, n_select, rng)
    keep, used_bins, used_targets, fell_back = _resolve_targets(
        targets, table.bin_of, table.population, bin_width,
        lambda: sample_rpt_deltas(rpt, 1, rng)[0], cfg,
    )
    if keep.size == 0:
        raise InconsistentMeasurementError(
            f"RPT inconsistent with geometry: 基站对 {rpt.bs_pair}", pair=rpt.bs_pair)

    first = np.empty(keep.size, dtype=int)
    second = np.empty(keep.size, dtype=int)
    for k in np.unique(used_bins):
        slots = np.flatnonzero(used_bins == k)
        a, b = table.sample(int(k), slots.size, rng)
        first[slots] = a
        second[slots] = b

    out_i = cloud_i.subset(first, PROVENANCE_RPT, used_targets, fell_back)
    out_j = cloud_j.subset(second, PROVENANCE_RPT, -used_targets, fell_back.copy())
    return out_i, out_j


# ---------------------------------------------------------------------------
# 融合调度
# ---------------------------------------------------------------------------

def apply_fusion(clouds: Mapping[int, PointCloud], measurements: MeasurementSet,
                 fusion_cfg: Optional[FusionConfig] = None, seed: int = 0) -> Dict[int, PointCloud]:
    """按融合模式对各基站点云做 PT 或 RPT 下采样"""
    fusion_cfg = fusion_cfg or FusionConfig()
    sel = fusion_cfg.selection
    for bs_id, cloud in clouds.items():
        if cloud.provenance not in (PROVENANCE_AOA, PROVENANCE_ISOTROPIC):
            raise FusionError(f"基站 {bs_id} 的点云已经筛选过 ({cloud.provenance})", bs_id=bs_id)

    if fusion_cfg.mode == FUSION_AOA:
        return dict(clouds)

    if fusion_cfg.mode == FUSION_PT:
        if not any(measurements.pt(bs_id) for bs_id in clouds):
            raise FusionError("fusion mode aoa+pt requires PT measurements: 缺少PT测量")
        fused: Dict[int, PointCloud] = {}
        for bs_id in sorted(clouds):
            pt = measurements.pt(bs_id)
            if pt is None:
                logging.warning(f"基站 {bs_id} 没有PT测量，保留纯AoA点云")
                fused[bs_id] = clouds[bs_id]
                continue
            width = sel.bin_width or auto_bin_width(pt.sigma_nu, fusion_cfg.step)
            try:
                fused[bs_id] = select_by_pt(clouds[bs_id], pt, sel.n_select, width, make_rng(seed, 1, bs_id), sel)
            except NlosLocateError as e:
                raise FusionError(f"基站 {bs_id} 的PT筛选失败: {e}", bs_id=bs_id) from e
        logging.info(f"PT融合完成: {len(fused)} 个基站")
        return fused

    # FUSION_RPT
    pairs = [(i, j) for i, j in rpt_pairs(clouds.keys(), sel.rpt_topology, sel.reference_bs)
             if measurements.rpt(i, j) is not None]
    if not pairs:
        raise FusionError("fusion mode aoa+rpt requires RPT measurements: 缺少RPT测量")
    parts: Dict[int, List[PointCloud]] = {bs_id: [] for bs_id in clouds}
    for i, j in pairs:
        rpt = measurements.rpt(i, j)
        width = sel.bin_width or auto_bin_width(rpt.sigma_nu, fusion_cfg.step)
        try:
            out_i, out_j = select_by_rpt(clouds[i], clouds[j], rpt, sel.n_select, width,
                                         make_rng(seed, 2, i, j), sel)
        except NlosLocateError as e:
            raise FusionError(f"基站对 ({i}, {j}) 的RPT筛选失败: {e}", pair=(i, j)) from e
        parts[i].append(out_i)
        parts[j].append(out_j)

    fused = {}
    for bs_id in sorted(clouds):
        if parts[bs_id]:
            fused[bs_id] = PointCloud.concat(parts[bs_id], PROVENANCE_RPT)
        else:
            logging.warning(f"基站 {bs_id} 不属于任何RPT基站对，保留纯AoA点云")
            fused[bs_id] = clouds[bs_id]
    logging.info(f"RPT融合完成: {len(pairs)} 个基站对")
    return fused


def write_clouds_csv(clouds: Iterable[PointCloud], path: str) -> str:
    """导出点云CSV: bs_id, x, y, z, length, provenance"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bs_id", "x", "y", "z", "length", "provenance"])
        for cloud in clouds:
            for k in range(len(cloud)):
                x, y, z = cloud.positions[k]
                writer.writerow([cloud.bs_id, f"{x:.6f}", f"{y:.6f}", f"{z:.6f}",
                                 f"{cloud.lengths[k]:.6f}", cloud.provenance])
    return path
