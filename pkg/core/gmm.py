#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
三维高斯混合模型：EM 拟合、对数密度、分布乘积后验网格与位置估计
"""

import csv
import json
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import InsufficientPointsError
from .scene import DEFAULT_STEP

DEFAULT_LOG_FLOOR = -745.0
DEFAULT_GRID_SPACING = 0.05

_LOG_2PI = math.log(2.0 * math.pi)
_EPS = 10.0 * np.finfo(float).eps


@dataclass(frozen=True)
class EmConfig:
    """EM 拟合参数"""

    max_iters: int = 200
    tol: float = 1e-6
    reg_floor: Optional[float] = None
    n_init: int = 4
    k_max: int = 8
    fixed_k: Optional[int] = None
    max_fit_points: int = 4000
    step: float = DEFAULT_STEP

    @property
    def floor(self) -> float:
        """协方差特征值下限 λ_min，默认 (step/2)²"""
        if self.reg_floor is not None:
            return float(self.reg_floor)
        return (self.step / 2.0) ** 2


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """把协方差矩阵的特征值截断到 floor 以上"""
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class GaussianMixture3:
    """三维高斯混合：权重、均值、协方差"""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihood: float = float("nan")
    n_iter: int = 0
    converged: bool = True
    history: Tuple[float, ...] = ()

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        covs = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if not (weights.size == means.shape[0] == covs.shape[0]) or weights.size == 0:
            raise ValueError("权重、均值、协方差的分量数不一致")
        if np.any(weights <= 0):
            raise ValueError("混合权重必须为正")
        weights = weights / weights.sum()
        covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
        try:
            chol = np.stack([linalg.cholesky(c, lower=True) for c in covs])
        except linalg.LinAlgError as e:
            raise ValueError(f"协方差矩阵不是正定的: {e}") from e
        log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_log_det", log_det)
        object.__setattr__(self, "history", tuple(self.history))

    @property
    def k(self) -> int:
        return int(self.weights.size)

    def weighted_log_prob(self, x) -> np.ndarray:
        """(N, K) 的 log w_k + log N(x; μ_k, Σ_k)"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty((x.shape[0], self.k))
        for k in range(self.k):
            z = linalg.solve_triangular(self._chol[k], (x - self.means[k]).T, lower=True)
            maha = np.sum(z * z, axis=0)
            out[:, k] = math.log(self.weights[k]) - 0.5 * (3.0 * _LOG_2PI + self._log_det[k] + maha)
        return out

    def log_pdf(self, x):
        """log Σ_k w_k N(x; μ_k, Σ_k)，log-sum-exp 形式"""
        arr = np.asarray(x, dtype=float)
        values = logsumexp(self.weighted_log_prob(arr), axis=1)
        if arr.ndim == 1:
            return float(values[0])
        return values

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "log_likelihood": None if math.isnan(self.log_likelihood) else self.log_likelihood,
        }


def log_pdf(mix: GaussianMixture3, x):
    """混合分布在 x 处的对数密度"""
    return mix.log_pdf(x)


def _as_points(points) -> np.ndarray:
    positions = getattr(points, "positions", points)
    return np.asarray(positions, dtype=float).reshape(-1, 3)


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ 初始中心"""
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x: np.ndarray, resp: np.ndarray, floor: float, prev_means: np.ndarray,
            prev_covs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = x.shape[0]
    nk_raw = resp.sum(axis=0)
    nk = nk_raw + _EPS
    weights = nk / n
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty_like(prev_covs)
    for k in range(resp.shape[1]):
        if nk_raw[k] < 1e-10:
            # 空分量保持原参数
            means[k] = prev_means[k]
            covs[k] = prev_covs[k]
            continue
        diff = x - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        covs[k] = _floor_covariance(cov, floor)
    return weights / weights.sum(), means, covs


def _e_step(x: np.ndarray, weights, means, covs) -> Tuple[float, np.ndarray]:
    mix = GaussianMixture3(weights, means, covs)
    wlp = mix.weighted_log_prob(x)
    norm = logsumexp(wlp, axis=1)
    return float(norm.mean()), np.exp(wlp - norm[:, None])


def _single_component(x: np.ndarray, floor: float) -> GaussianMixture3:
    mean = x.mean(axis=0)
    diff = x - mean
    cov = _floor_covariance(diff.T @ diff / x.shape[0], floor)
    mix = GaussianMixture3(np.ones(1), mean[None], cov[None])
    ll = float(mix.log_pdf(x).mean())
    return GaussianMixture3(mix.weights, mix.means, mix.covariances, ll, 0, True, (ll,))


def _run_em(x: np.ndarray, k: int, cfg: EmConfig, rng: np.random.Generator) -> GaussianMixture3:
    floor = cfg.floor
    centers = _kmeans_plus_plus(x, k, rng)
    d2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2)
    resp = np.zeros((x.shape[0], k))
    resp[np.arange(x.shape[0]), np.argmin(d2, axis=1)] = 1.0

    global_cov = _floor_covariance(np.cov(x.T, bias=True).reshape(3, 3), floor)
    weights, means, covs = _m_step(x, resp, floor, centers, np.repeat(global_cov[None], k, axis=0))

    history = []
    converged = False
    prev = -np.inf
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        ll, resp = _e_step(x, weights, means, covs)
        history.append(ll)
        if np.isfinite(prev) and abs(ll - prev) < cfg.tol * max(abs(prev), 1.0):
            converged = True
            break
        prev = ll
        weights, means, covs = _m_step(x, resp, floor, means, covs)

    return GaussianMixture3(weights, means, covs, history[-1], n_iter, converged, tuple(history))


def fit_em(points, k: int, em_cfg: Optional[EmConfig] = None,
           rng: Optional[np.random.Generator] = None) -> GaussianMixture3:
    """EM 拟合，多次重启取最终对数似然最大者"""
    cfg = em_cfg or EmConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_points(points)
    if k < 1:
        raise ValueError("分量数 K 必须 ≥ 1")
    if x.shape[0] < k:
        raise InsufficientPointsError(f"点数 {x.shape[0]} 少于分量数 {k}")
    if k == 1:
        return _single_component(x, cfg.floor)

    best: Optional[GaussianMixture3] = None
    for _ in range(max(cfg.n_init, 1)):
        mix = _run_em(x, k, cfg, rng)
        if best is None or mix.log_likelihood > best.log_likelihood:
            best = mix
    if not best.converged:
        logging.debug(f"EM 在 {cfg.max_iters} 次迭代内未收敛 (K={k})")
    return best


def bic(mix: GaussianMixture3, n_points: int) -> float:
    """贝叶斯信息准则"""
    n_params = mix.k * 10 - 1
    return -2.0 * n_points * mix.log_likelihood + n_params * math.log(n_points)


def select_k(points, k_max: int, em_cfg: Optional[EmConfig] = None,
             rng: Optional[np.random.Generator] = None) -> Tuple[int, GaussianMixture3]:
    """在 K = 1..k_max 中按 BIC 选择分量数，平局取较小的 K"""
    if k_max < 1:
        raise ValueError("k_max 必须 ≥ 1")
    cfg = em_cfg or EmConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_points(points)
    if x.shape[0] < 2:
        return 1, fit_em(x, 1, cfg, rng)

    best_k, best_mix, best_score = 0, None, math.inf
    for k in range(1, min(k_max, x.shape[0]) + 1):
        mix = fit_em(x, k, cfg, rng)
        score = bic(mix, x.shape[0])
        if score < best_score:
            best_k, best_mix, best_score = k, mix, score
    return best_k, best_mix


def fit_cloud(points, em_cfg: Optional[EmConfig] = None,
              rng: Optional[np.random.Generator] = None) -> GaussianMixture3:
    """拟合一个基站的点云：超过上限时先随机子采样，固定 K 时自动降到点数以内"""
    cfg = em_cfg or EmConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_points(points)
    if x.shape[0] > cfg.max_fit_points:
        x = x[np.sort(rng.choice(x.shape[0], cfg.max_fit_points, replace=False))]
    if cfg.fixed_k is not None:
        return fit_em(x, max(1, min(cfg.fixed_k, x.shape[0])), cfg, rng)
    return select_k(x, cfg.k_max, cfg, rng)[1]


# ---------------------------------------------------------------------------
# 后验网格
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSpec:
    """覆盖场景包围盒的规则网格，格点即单元中心"""

    origin: np.ndarray
    spacing: float
    dims: Tuple[int, int, int]
    bbox_max: Optional[np.ndarray] = None   # 被覆盖的场景上界，补充的单元可能超出它

    @classmethod
    def covering(cls, bbox_min, bbox_max, spacing: float = DEFAULT_GRID_SPACING) -> "GridSpec":
        if spacing <= 0:
            raise ValueError("网格间距必须为正")
        lo = np.asarray(bbox_min, dtype=float)
        extent = np.asarray(bbox_max, dtype=float) - lo
        dims = np.floor(extent / spacing + 1e-9).astype(int) + 1
        dims = np.where((dims - 1) * spacing < extent - 1e-9, dims + 1, dims)
        return cls(lo, float(spacing), tuple(int(d) for d in dims), lo + extent)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 1) * self.spacing

    @property
    def limit(self) -> np.ndarray:
        """插值结果允许的上界：场景上界与最后一个单元中心的较小者"""
        if self.bbox_max is None:
            return self.upper
        return np.minimum(self.upper, self.bbox_max)

    def centers(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """线性索引 [start, stop) 的单元中心坐标（C 顺序）"""
        stop = self.n_cells if stop is None else stop
        idx = np.unravel_index(np.arange(start, stop), self.dims)
        return self.origin + np.stack(idx, axis=1) * self.spacing

    def point(self, index3) -> np.ndarray:
        return self.origin + np.asarray(index3, dtype=float) * self.spacing


@dataclass(frozen=True, eq=False)
class PosteriorField:
    """各基站对数密度之和（未归一化）"""

    grid: GridSpec
    log_posterior: np.ndarray
    argmax_index: int = field(init=False)
    argmax_point: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.log_posterior, dtype=float).reshape(self.grid.dims)
        # argmax 返回第一次出现的位置，即线性索引最小者
        idx = int(np.argmax(values))
        object.__setattr__(self, "log_posterior", values)
        object.__setattr__(self, "argmax_index", idx)
        object.__setattr__(self, "argmax_point", self.grid.point(np.unravel_index(idx, self.grid.dims)))


def posterior(mixtures: Union[Mapping[int, GaussianMixture3], Sequence[GaussianMixture3]], grid: GridSpec,
              log_floor: float = DEFAULT_LOG_FLOOR, chunk: int = 262144, workers: int = 1) -> PosteriorField:
    """网格上各基站混合密度的乘积（对数域求和）"""
    mixes = list(mixtures.values()) if isinstance(mixtures, Mapping) else list(mixtures)
    if not mixes:
        raise ValueError("至少需要一个混合分布")
    n = grid.n_cells
    values = np.empty(n)

    def evaluate(start: int):
        stop = min(start + chunk, n)
        pts = grid.centers(start, stop)
        acc = np.zeros(stop - start)
        for mix in mixes:
            acc += np.maximum(mix.log_pdf(pts), log_floor)
        values[start:stop] = acc

    starts = range(0, n, chunk)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(evaluate, starts))
    else:
        for s in starts:
            evaluate(s)
    return PosteriorField(grid, values)


def _axis_offset(f_minus: float, f_zero: float, f_plus: float) -> float:
    denom = f_minus - 2.0 * f_zero + f_plus
    if denom >= 0:
        return 0.0
    return float(np.clip((f_minus - f_plus) / (2.0 * denom), -0.5, 0.5))


def _quadratic_offset(cube: np.ndarray) -> Optional[np.ndarray]:
    """对 3×3×3 邻域做二次曲面最小二乘拟合，返回极大值相对中心的偏移（格点单位）"""
    u = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
    a = np.column_stack([
        np.ones(27), u,
        0.5 * u[:, 0] ** 2, 0.5 * u[:, 1] ** 2, 0.5 * u[:, 2] ** 2,
        u[:, 0] * u[:, 1], u[:, 0] * u[:, 2], u[:, 1] * u[:, 2],
    ])
    coef, *_ = np.linalg.lstsq(a, cube.reshape(-1), rcond=None)
    g = coef[1:4]
    h = np.array([
        [coef[4], coef[7], coef[8]],
        [coef[7], coef[5], coef[9]],
        [coef[8], coef[9], coef[6]],
    ])
    if np.any(np.linalg.eigvalsh(h) >= 0):
        return None
    return np.clip(-np.linalg.solve(h, g), -1.0, 1.0)


def estimate(field_: PosteriorField, refine: bool = False) -> np.ndarray:
    """取后验最大的单元中心；refine 时做一步二次插值（限制在场景内）"""
    grid = field_.grid
    idx = np.array(np.unravel_index(field_.argmax_index, grid.dims))
    point = grid.point(idx)
    if not refine:
        return point

    values = field_.log_posterior
    dims = np.asarray(grid.dims)
    offset = None
    if np.all(idx >= 1) and np.all(idx <= dims - 2):
        cube = values[idx[0] - 1:idx[0] + 2, idx[1] - 1:idx[1] + 2, idx[2] - 1:idx[2] + 2]
        offset = _quadratic_offset(cube)
    if offset is None:
        offset = np.zeros(3)
        for axis in range(3):
            if 1 <= idx[axis] <= dims[axis] - 2:
                lo = idx.copy()
                hi = idx.copy()
                lo[axis] -= 1
                hi[axis] += 1
                offset[axis] = _axis_offset(values[tuple(lo)], values[tuple(idx)], values[tuple(hi)])
    return np.clip(point + offset * grid.spacing, grid.origin, grid.limit)


# ---------------------------------------------------------------------------
# 导出
# ---------------------------------------------------------------------------

def mixtures_to_json(mixtures: Mapping[int, GaussianMixture3]) -> str:
    """各基站混合分布参数导出为JSON"""
    payload = {str(bs_id): mix.to_dict() for bs_id, mix in sorted(mixtures.items())}
    return json.dumps(payload, indent=2)


def write_mixtures_json(mixtures: Mapping[int, GaussianMixture3], path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(mixtures_to_json(mixtures))
    return path


def write_field_csv(field_: PosteriorField, path: str, decimation: int = 1) -> str:
    """导出后验网格CSV: x, y, z, log_posterior，按 decimation 抽稀"""
    if decimation < 1:
        raise ValueError("decimation 必须 ≥ 1")
    grid = field_.grid
    values = field_.log_posterior[::decimation, ::decimation, ::decimation]
    axes = [np.arange(0, d, decimation) for d in grid.dims]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "z", "log_posterior"])
        for a, i in enumerate(axes[0]):
            for b, j in enumerate(axes[1]):
                for c, k in enumerate(axes[2]):
                    x, y, z = grid.point((i, j, k))
                    writer.writerow([f"{x:.4f}", f"{y:.4f}", f"{z:.4f}", f"{values[a, b, c]:.6f}"])
    logging.info(f"后验网格已导出: {path}")
    return path
