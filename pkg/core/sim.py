#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
仿真实验：随机投放UE、端到端定位试验、误差CDF与噪声扫描
"""

import csv
import json
import math
import os
import time
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cloud import (
    FUSION_AOA, FUSION_MODES, FUSION_PT, FUSION_RPT, FusionConfig, PointCloud, RaysConfig, SelectionConfig,
    apply_fusion, generate_aoa_cloud, generate_isotropic_cloud,
)
from .errors import CampaignError, NlosLocateError, NoPathFoundError, TrialFailure
from .gmm import DEFAULT_GRID_SPACING, EmConfig, GaussianMixture3, GridSpec, PosteriorField, estimate, fit_cloud, posterior
from .measure import Categories, MeasurementSet, NoiseSigmas, TruthSearchConfig, perturb, true_observables
from .scene import Scene, is_free_point
from .utils import ProgressTracker, derive_seed, ensure_directory, format_time_duration, make_rng

STATUS_OK = "ok"
STATUS_FAILED = "failed"

SWEEP_SIGMA_ETA = "sigma_eta"
SWEEP_SIGMA_NU_PT = "sigma_nu_pt"
SWEEP_SIGMA_NU_RPT = "sigma_nu_rpt"
SWEEP_FUSION = "fusion"
SWEEP_AXES = (SWEEP_SIGMA_ETA, SWEEP_SIGMA_NU_PT, SWEEP_SIGMA_NU_RPT, SWEEP_FUSION)

DEFAULT_DROP_MARGIN = 0.1
DEFAULT_N_TRIALS = 500

# 派生随机流的阶段键
_KEY_DROP, _KEY_PERTURB, _KEY_CLOUD, _KEY_FUSION, _KEY_FIT = range(5)


@dataclass(frozen=True)
class TrialConfig:
    """单次试验的全部参数，角度为弧度，长度为米"""

    scene: Scene
    sigmas: NoiseSigmas = field(default_factory=NoiseSigmas)
    fusion: str = FUSION_AOA
    n_rays: int = 2000
    rays: RaysConfig = field(default_factory=RaysConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    em: EmConfig = field(default_factory=EmConfig)
    grid_spacing: float = DEFAULT_GRID_SPACING
    refine: bool = False
    seed: int = 0
    drop_margin: float = DEFAULT_DROP_MARGIN
    max_drop_attempts: int = 10000
    truth: TruthSearchConfig = field(default_factory=TruthSearchConfig)

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"未知的融合模式: {self.fusion}")
        if self.n_rays < 1:
            raise ValueError("n_rays 必须 ≥ 1")
        if self.grid_spacing <= 0:
            raise ValueError("网格间距必须为正")

    @property
    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.fusion, self.selection, self.rays.step)

    @property
    def categories(self) -> Categories:
        return Categories(pt=self.fusion == FUSION_PT, rpt=self.fusion == FUSION_RPT,
                          rpt_topology=self.selection.rpt_topology, reference_bs=self.selection.reference_bs)


@dataclass(frozen=True)
class BsDiagnostics:
    """单个基站在一次定位中的诊断信息"""

    bs_id: int
    cloud_size: int
    fused_size: int
    k: int
    log_likelihood: float


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    status: str
    ue_true: Optional[Tuple[float, float, float]] = None
    ue_est: Optional[Tuple[float, float, float]] = None
    epsilon: Optional[float] = None
    reason: str = ""
    dropped_bs: Tuple[int, ...] = ()
    diagnostics: Tuple[BsDiagnostics, ...] = ()
    timings: Dict[str, float] = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


@dataclass(frozen=True)
class ErrorCdf:
    """定位误差的经验分布函数"""

    samples: Tuple[float, ...]

    def __post_init__(self):
        samples = tuple(sorted(float(s) for s in self.samples))
        if not samples:
            raise ValueError("误差样本为空")
        if samples[0] < 0:
            raise ValueError("误差不能为负")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __call__(self, error: float) -> float:
        """F(e) = 误差 ≤ e 的样本比例"""
        return float(np.searchsorted(self.samples, error, side="right")) / len(self.samples)

    def percentile(self, q: float) -> float:
        """第 ⌈q·N⌉ 个顺序统计量"""
        if not 0.0 < q <= 1.0:
            raise ValueError("q 必须在 (0, 1] 内")
        rank = max(math.ceil(q * len(self.samples) - 1e-9), 1)
        return self.samples[rank - 1]

    def rows(self) -> List[Tuple[float, float]]:
        """每个不同误差值一行，F 取该值最后一次出现处"""
        n = len(self.samples)
        values, counts = np.unique(self.samples, return_counts=True)
        return [(float(e), float(c) / n) for e, c in zip(values, np.cumsum(counts))]


@dataclass(frozen=True)
class CampaignResult:
    cdf: ErrorCdf
    trials: Tuple[TrialResult, ...]
    wall_time: float = field(default=0.0, compare=False)

    @property
    def failures(self) -> List[TrialResult]:
        return [t for t in self.trials if not t.ok]

    def summary(self, config: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
        return {
            "n_trials": len(self.trials),
            "n_success": len(self.cdf),
            "n_failed": len(self.failures),
            "percentiles": {
                "p50": self.cdf.percentile(0.5),
                "p90": self.cdf.percentile(0.9),
                "p95": self.cdf.percentile(0.95),
            },
            "failures": [{"trial_index": t.trial_index, "reason": t.reason} for t in self.failures],
            "config": dict(config or {}),
            "wall_time_s": round(self.wall_time, 3),
        }


@dataclass(frozen=True, eq=False)
class LocateOutput:
    """一次定位的中间产物：点云、混合分布、后验网格与估计位置"""

    clouds: Dict[int, PointCloud]
    fused: Dict[int, PointCloud]
    mixtures: Dict[int, GaussianMixture3]
    field: PosteriorField
    estimate: np.ndarray
    timings: Dict[str, float]


# ---------------------------------------------------------------------------
# 定位流水线
# ---------------------------------------------------------------------------

def localize(scene: Scene, measurements: MeasurementSet, n_rays: int, rays_cfg: RaysConfig,
             fusion_cfg: FusionConfig, em_cfg: EmConfig, grid_spacing: float = DEFAULT_GRID_SPACING,
             refine: bool = False, seed: int = 0, posterior_workers: int = 1) -> LocateOutput:
    """点云 → 融合 → EM拟合 → 后验 → 估计"""
    timings: Dict[str, float] = {}

    start = time.perf_counter()
    bs_ids = sorted(set(measurements.angles) | set(measurements.pts))
    clouds: Dict[int, PointCloud] = {}
    for bs_id in bs_ids:
        rng = make_rng(seed, _KEY_CLOUD, bs_id)
        angle = measurements.angle(bs_id)
        if angle is not None:
            clouds[bs_id] = generate_aoa_cloud(scene, bs_id, angle, n_rays, rays_cfg, rng)
        else:
            clouds[bs_id] = generate_isotropic_cloud(scene, bs_id, n_rays, rays_cfg, rng)
    timings["clouds"] = time.perf_counter() - start
    logging.debug(f"点云生成完成: {', '.join(f'{b}:{len(c)}' for b, c in clouds.items())}")

    start = time.perf_counter()
    fused = apply_fusion(clouds, measurements, fusion_cfg, derive_seed(seed, _KEY_FUSION))
    timings["fusion"] = time.perf_counter() - start

    start = time.perf_counter()
    em_cfg = em_cfg if em_cfg.reg_floor is not None else replace(em_cfg, step=rays_cfg.step)
    mixtures = {bs_id: fit_cloud(cloud, em_cfg, make_rng(seed, _KEY_FIT, bs_id)) for bs_id, cloud in fused.items()}
    timings["fit"] = time.perf_counter() - start

    start = time.perf_counter()
    grid = GridSpec.covering(scene.bbox_min, scene.bbox_max, grid_spacing)
    field_ = posterior(mixtures, grid, workers=posterior_workers)
    point = estimate(field_, refine)
    timings["posterior"] = time.perf_counter() - start

    return LocateOutput(clouds, fused, mixtures, field_, point, timings)


# ---------------------------------------------------------------------------
# 单次试验
# ---------------------------------------------------------------------------

def drop_ue(scene: Scene, rng: np.random.Generator, margin: float = DEFAULT_DROP_MARGIN,
            max_attempts: int = 10000) -> np.ndarray:
    """在场景自由空间内均匀投放UE（拒绝采样）"""
    lo, hi = scene.bbox_min + margin, scene.bbox_max - margin
    if np.any(hi <= lo):
        raise TrialFailure("场景太小，无法满足投放边距")
    for _ in range(max_attempts):
        candidate = rng.uniform(lo, hi)
        if is_free_point(scene, candidate, margin):
            return candidate
    raise TrialFailure(f"{max_attempts} 次尝试内没有找到可投放的位置")


def _failed(index: int, reason: str, ue=None, dropped=(), timings=None) -> TrialResult:
    logging.warning(f"试验 {index} 失败: {reason}")
    ue_true = tuple(float(v) for v in ue) if ue is not None else None
    return TrialResult(index, STATUS_FAILED, ue_true, reason=reason, dropped_bs=tuple(dropped),
                       timings=timings or {})


def run_trial(cfg: TrialConfig, trial_index: int) -> TrialResult:
    """完整的一次定位试验，结果只由 (seed, trial_index) 决定"""
    trial_seed = derive_seed(cfg.seed, trial_index)
    timings: Dict[str, float] = {}
    begin = time.perf_counter()

    try:
        ue = drop_ue(cfg.scene, make_rng(trial_seed, _KEY_DROP), cfg.drop_margin, cfg.max_drop_attempts)
    except TrialFailure as e:
        return _failed(trial_index, str(e))

    start = time.perf_counter()
    try:
        truth = true_observables(cfg.scene, ue, cfg.rays.max_bounces, cfg.truth)
    except NoPathFoundError as e:
        return _failed(trial_index, str(e), ue, cfg.scene.bs_ids)
    timings["truth"] = time.perf_counter() - start

    dropped = sorted(truth.missing)
    if len(truth.arrivals) < 2:
        return _failed(trial_index, f"可用基站少于2个 (usable={truth.bs_ids})", ue, dropped, timings)

    measurements = perturb(truth, cfg.sigmas, make_rng(trial_seed, _KEY_PERTURB), cfg.categories)

    try:
        out = localize(cfg.scene, measurements, cfg.n_rays, cfg.rays, cfg.fusion_config, cfg.em,
                       cfg.grid_spacing, cfg.refine, trial_seed)
    except NlosLocateError as e:
        return _failed(trial_index, str(e), ue, dropped, timings)
    timings.update(out.timings)
    timings["total"] = time.perf_counter() - begin

    diagnostics = tuple(
        BsDiagnostics(bs_id, len(out.clouds[bs_id]), len(out.fused[bs_id]), out.mixtures[bs_id].k,
                      float(out.mixtures[bs_id].log_likelihood))
        for bs_id in sorted(out.mixtures)
    )
    est = out.estimate
    epsilon = float(np.linalg.norm(est - ue))
    logging.debug(f"试验 {trial_index}: ε = {epsilon:.3f} m")
    return TrialResult(trial_index, STATUS_OK, tuple(float(v) for v in ue), tuple(float(v) for v in est),
                       epsilon, "", tuple(dropped), diagnostics, timings)


def _trial_job(cfg: TrialConfig, trial_index: int) -> TrialResult:
    try:
        return run_trial(cfg, trial_index)
    except NlosLocateError as e:
        return _failed(trial_index, str(e))


# ---------------------------------------------------------------------------
# 批次与扫描
# ---------------------------------------------------------------------------

def run_campaign(cfg: TrialConfig, n_trials: int = DEFAULT_N_TRIALS, workers: int = 1,
                 progress_callback: Optional[Callable[[int], None]] = None) -> CampaignResult:
    """执行 n_trials 次独立试验，结果与并行度无关"""
    if n_trials < 1:
        raise ValueError("n_trials 必须 ≥ 1")
    begin = time.perf_counter()
    tracker = ProgressTracker(n_trials)
    results: List[TrialResult] = []

    def collect(result: TrialResult):
        results.append(result)
        crossed = tracker.next_step()
        percent = tracker.get_progress_percentage()
        if progress_callback:
            progress_callback(percent)
        if crossed:
            logging.info(f"仿真进度: {percent}% ({tracker.current_step}/{n_trials})")

    if workers <= 1:
        for index in range(n_trials):
            collect(_trial_job(cfg, index))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_trial_job, cfg, index) for index in range(n_trials)]
            for future in as_completed(futures):
                collect(future.result())

    results.sort(key=lambda r: r.trial_index)
    errors = [r.epsilon for r in results if r.ok]
    if not errors:
        raise CampaignError(f"全部 {n_trials} 次试验都失败了")

    wall = time.perf_counter() - begin
    failed = n_trials - len(errors)
    logging.info(f"仿真完成: 成功 {len(errors)}，失败 {failed}，耗时 {format_time_duration(wall)}")
    return CampaignResult(ErrorCdf(tuple(errors)), tuple(results), wall)


def with_axis_value(base: TrialConfig, axis: str, value) -> TrialConfig:
    """返回某个扫描参数被替换后的配置"""
    if axis == SWEEP_SIGMA_ETA:
        return replace(base, sigmas=replace(base.sigmas, sigma_eta=float(value)))
    if axis == SWEEP_SIGMA_NU_PT:
        return replace(base, sigmas=replace(base.sigmas, sigma_nu_pt=float(value)))
    if axis == SWEEP_SIGMA_NU_RPT:
        return replace(base, sigmas=replace(base.sigmas, sigma_nu_rpt=float(value)))
    if axis == SWEEP_FUSION:
        return replace(base, fusion=str(value))
    raise ValueError(f"不支持的扫描参数: {axis}，可选 {', '.join(SWEEP_AXES)}")


def sweep(base: TrialConfig, axis: str, values: Sequence, n_trials: int = DEFAULT_N_TRIALS,
          workers: int = 1) -> Dict[Any, CampaignResult]:
    """对每个取值运行一次批次，共享同一个基础种子"""
    if axis not in SWEEP_AXES:
        raise ValueError(f"不支持的扫描参数: {axis}，可选 {', '.join(SWEEP_AXES)}")
    results: Dict[Any, CampaignResult] = {}
    for value in values:
        logging.info(f"扫描 {axis} = {value}")
        results[value] = run_campaign(with_axis_value(base, axis, value), n_trials, workers)
    return results


# ---------------------------------------------------------------------------
# 输出
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_campaign(result: CampaignResult, out_dir: str, config: Optional[Mapping[str, Any]] = None,
                   suffix: str = "") -> Dict[str, str]:
    """写出 cdf.csv、trials.csv 和 summary.json"""
    if not ensure_directory(out_dir):
        raise CampaignError(f"无法创建输出目录: {out_dir}")
    paths = {
        "cdf": os.path.join(out_dir, f"cdf{suffix}.csv"),
        "trials": os.path.join(out_dir, f"trials{suffix}.csv"),
        "summary": os.path.join(out_dir, f"summary{suffix}.json"),
    }

    with open(paths["cdf"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["error_m", "cdf"])
        for error, value in result.cdf.rows():
            writer.writerow([_fmt(error), _fmt(value)])

    with open(paths["trials"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["trial_index", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
                         "epsilon_m", "status"])
        for t in result.trials:
            true = t.ue_true or (None, None, None)
            est = t.ue_est or (None, None, None)
            writer.writerow([t.trial_index, *map(_fmt, true), *map(_fmt, est), _fmt(t.epsilon), t.status])

    with open(paths["summary"], "w", encoding="utf-8") as f:
        json.dump(result.summary(config), f, indent=2, ensure_ascii=False)

    logging.info(f"结果已写入: {out_dir}")
    return paths
