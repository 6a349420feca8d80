#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数字孪生场景：场景加载、射线与表面求交、多次镜面反射追踪、射线离散化
"""

import json
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import SceneError, SceneFormatError

SELF_HIT_EPS = 1e-6
DEFAULT_MAX_BOUNCES = 5
DEFAULT_MAX_LENGTH = 100.0
DEFAULT_STEP = 0.10

PLANARITY_TOL = 1e-9
INSIDE_TOL = 1e-9
MIN_AREA = 1e-12

# 奇偶判定用的射线方向，避免与坐标轴平面平行
_PARITY_DIRECTION = np.array([0.5377, 0.3141, 0.7826]) / np.linalg.norm([0.5377, 0.3141, 0.7826])

_CHUNK_SIZE = 4096


def _as_point(value: Any) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(3)
    return arr


def direction_from_angles(azimuth, elevation) -> np.ndarray:
    """由方位角/俯仰角（弧度）得到单位方向向量，支持数组输入"""
    azimuth = np.asarray(azimuth, dtype=float)
    elevation = np.asarray(elevation, dtype=float)
    cos_el = np.cos(elevation)
    return np.stack([cos_el * np.cos(azimuth), cos_el * np.sin(azimuth), np.sin(elevation)], axis=-1)


def angles_from_direction(direction) -> Tuple[float, float]:
    """单位方向向量转换为 (方位角, 俯仰角)"""
    d = np.asarray(direction, dtype=float)
    azimuth = math.atan2(d[1], d[0])
    elevation = math.atan2(d[2], math.hypot(d[0], d[1]))
    if azimuth == -math.pi:
        azimuth = math.pi
    return azimuth, elevation


@dataclass(frozen=True, eq=False)
class Surface:
    """平面凸多边形表面，顶点按外法线方向逆时针排列"""

    vertices: np.ndarray
    normal: np.ndarray = field(init=False)
    offset: float = field(init=False)
    area: float = field(init=False)

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 3 or verts.shape[0] < 3:
            raise SceneError("表面至少需要3个三维顶点", entity="surface")

        # Newell 法向量
        nxt = np.roll(verts, -1, axis=0)
        newell = np.cross(verts, nxt).sum(axis=0)
        norm = float(np.linalg.norm(newell))
        area = 0.5 * norm
        if area < MIN_AREA:
            raise SceneError("退化表面（面积为0）", entity="surface")
        normal = newell / norm

        distances = (verts - verts[0]) @ normal
        if np.max(np.abs(distances)) > PLANARITY_TOL:
            raise SceneError("表面顶点不共面", entity="surface")

        prev = np.roll(verts, 1, axis=0)
        turns = np.cross(verts - prev, nxt - verts) @ normal
        if np.any(turns < -PLANARITY_TOL):
            raise SceneError("表面不是凸多边形", entity="surface")

        # 自相交的星形多边形转角同号但绕数不为1
        edges = nxt - verts
        edge_norms = np.linalg.norm(edges, axis=1)
        keep = edge_norms > 0
        e = edges[keep] / edge_norms[keep, None]
        e_next = np.roll(e, -1, axis=0)
        angles = np.arctan2(np.cross(e, e_next) @ normal, np.sum(e * e_next, axis=1))
        if abs(angles.sum() - 2.0 * math.pi) > 1e-6:
            raise SceneError("表面不是简单凸多边形", entity="surface")

        verts.setflags(write=False)
        normal.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(normal @ verts[0]))
        object.__setattr__(self, "area", area)


@dataclass(frozen=True, eq=False)
class BaseStation:
    """基站锚点"""

    id: int
    position: np.ndarray
    boresight: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "position", _as_point(self.position))
        if self.boresight is not None:
            b = _as_point(self.boresight)
            n = float(np.linalg.norm(b))
            if n == 0.0:
                raise SceneError("基站视轴方向为零向量", entity="base_station")
            object.__setattr__(self, "boresight", b / n)


@dataclass(frozen=True, eq=False)
class Ray:
    """射线：起点、单位方向、发射基站"""

    origin: np.ndarray
    direction: np.ndarray
    bs_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_point(self.origin))
        d = _as_point(self.direction)
        if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
            raise ValueError("射线方向必须是单位向量")
        object.__setattr__(self, "direction", d)

    @classmethod
    def towards(cls, origin, direction, bs_id: int = -1) -> "Ray":
        """方向自动归一化"""
        d = _as_point(direction)
        return cls(origin, d / np.linalg.norm(d), bs_id)


@dataclass(frozen=True)
class Hit:
    surface_id: int
    point: np.ndarray
    distance: float


@dataclass(frozen=True, eq=False)
class TracedPath:
    """追踪得到的折线路径：端点序列和累计长度"""

    vertices: np.ndarray
    cumulative: np.ndarray
    bounces: int
    surface_ids: Tuple[int, ...] = ()
    escaped: bool = False
    bs_id: int = -1

    @classmethod
    def from_vertices(cls, vertices, bounces: Optional[int] = None, bs_id: int = -1) -> "TracedPath":
        verts = np.asarray(vertices, dtype=float).reshape(-1, 3)
        seg = np.linalg.norm(np.diff(verts, axis=0), axis=1)
        cumulative = np.concatenate([[0.0], np.cumsum(seg)])
        if bounces is None:
            bounces = max(len(verts) - 2, 0)
        return cls(verts, cumulative, bounces, bs_id=bs_id)

    @property
    def total_length(self) -> float:
        return float(self.cumulative[-1])

    @property
    def segment_count(self) -> int:
        return len(self.vertices) - 1

    def point_at(self, length: float) -> np.ndarray:
        """沿路径行走指定长度得到的位置"""
        length = min(max(float(length), 0.0), self.total_length)
        if self.segment_count == 0:
            return self.vertices[0].copy()
        seg = int(np.sum(self.cumulative[1:] < length))
        seg = min(seg, self.segment_count - 1)
        a = self.vertices[seg]
        b = self.vertices[seg + 1]
        seg_len = self.cumulative[seg + 1] - self.cumulative[seg]
        if seg_len <= 0:
            return a.copy()
        return a + (length - self.cumulative[seg]) * (b - a) / seg_len


@dataclass(frozen=True)
class PathPoint:
    """路径上的离散点及其从基站出发的累计长度"""

    position: np.ndarray
    length: float
    bs_id: int
    ray_index: int


@dataclass(frozen=True, eq=False)
class PathBundle:
    """一批射线的追踪结果，按数组打包"""

    vertices: np.ndarray      # (N, B+2, 3)，未使用部分为 nan
    cumulative: np.ndarray    # (N, B+2)，未使用部分为 inf
    directions: np.ndarray    # (N, B+1, 3) 每段的单位方向
    n_vertices: np.ndarray    # (N,)
    bounces: np.ndarray       # (N,)
    surface_ids: np.ndarray   # (N, B+1) 每段终点所在表面，-1 表示截断或逃逸
    escaped: np.ndarray       # (N,)
    bs_id: int = -1

    def __len__(self) -> int:
        return int(self.n_vertices.shape[0])

    @property
    def totals(self) -> np.ndarray:
        return self.cumulative[np.arange(len(self)), self.n_vertices - 1]

    def path(self, index: int) -> TracedPath:
        nv = int(self.n_vertices[index])
        sids = tuple(int(s) for s in self.surface_ids[index, :nv - 1])
        return TracedPath(
            vertices=self.vertices[index, :nv].copy(),
            cumulative=self.cumulative[index, :nv].copy(),
            bounces=int(self.bounces[index]),
            surface_ids=sids,
            escaped=bool(self.escaped[index]),
            bs_id=self.bs_id,
        )


@dataclass(frozen=True, eq=False)
class Scene:
    """数字孪生：表面 + 基站，加载后不可变"""

    surfaces: Tuple[Surface, ...]
    base_stations: Tuple[BaseStation, ...]
    bbox_min: np.ndarray = field(init=False)
    bbox_max: np.ndarray = field(init=False)

    def __post_init__(self):
        surfaces = tuple(self.surfaces)
        stations = tuple(self.base_stations)
        if not surfaces:
            raise SceneError("no surfaces: 场景中没有表面", entity="surface")
        if not stations:
            raise SceneError("no base stations: 场景中没有基站", entity="base_station")

        all_vertices = np.concatenate([s.vertices for s in surfaces], axis=0)
        bbox_min = all_vertices.min(axis=0)
        bbox_max = all_vertices.max(axis=0)

        seen = set()
        for index, bs in enumerate(stations):
            if bs.id in seen:
                raise SceneError(f"基站编号重复: {bs.id}", entity="base_station", index=index)
            seen.add(bs.id)
            if np.any(bs.position < bbox_min - PLANARITY_TOL) or np.any(bs.position > bbox_max + PLANARITY_TOL):
                raise SceneError(f"基站 {bs.id} 位于场景边界之外", entity="base_station", index=index)

        object.__setattr__(self, "surfaces", surfaces)
        object.__setattr__(self, "base_stations", stations)
        object.__setattr__(self, "bbox_min", bbox_min)
        object.__setattr__(self, "bbox_max", bbox_max)
        self._pack_facets()

    def _pack_facets(self):
        """把所有表面打包成定长数组，便于向量化求交"""
        max_v = max(len(s.vertices) for s in self.surfaces)
        m = len(self.surfaces)
        normals = np.zeros((m, 3))
        offsets = np.zeros(m)
        edge_normals = np.zeros((m, max_v, 3))
        edge_consts = np.zeros((m, max_v))
        edge_starts = np.zeros((m, max_v, 3))
        edge_vectors = np.zeros((m, max_v, 3))
        for i, s in enumerate(self.surfaces):
            normals[i] = s.normal
            offsets[i] = s.offset
            verts = s.vertices
            padded = np.concatenate([verts, np.repeat(verts[-1:], max_v - len(verts), axis=0)], axis=0)
            nxt = np.concatenate([verts[1:], verts[:1], np.repeat(verts[-1:], max_v - len(verts), axis=0)], axis=0)
            edges = nxt - padded
            inward = np.cross(s.normal, edges)
            lengths = np.linalg.norm(inward, axis=1)
            nonzero = lengths > 0
            inward[nonzero] /= lengths[nonzero, None]
            edge_normals[i] = inward
            edge_consts[i] = np.sum(inward * padded, axis=1)
            edge_starts[i] = padded
            edge_vectors[i] = edges
        object.__setattr__(self, "_normals", normals)
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_edge_normals", edge_normals)
        object.__setattr__(self, "_edge_consts", edge_consts)
        object.__setattr__(self, "_edge_starts", edge_starts)
        object.__setattr__(self, "_edge_vectors", edge_vectors)

    @property
    def normals(self) -> np.ndarray:
        return self._normals

    @property
    def bs_ids(self) -> List[int]:
        return [bs.id for bs in self.base_stations]

    def station(self, bs_id: int) -> BaseStation:
        for bs in self.base_stations:
            if bs.id == bs_id:
                return bs
        raise KeyError(f"未知基站编号: {bs_id}")

    def contains(self, point, tol: float = 0.0) -> bool:
        p = _as_point(point)
        return bool(np.all(p >= self.bbox_min - tol) and np.all(p <= self.bbox_max + tol))


# ---------------------------------------------------------------------------
# 加载与序列化
# ---------------------------------------------------------------------------

def load_scene(source: Union[str, bytes, Dict[str, Any]]) -> Scene:
    """解析场景文件内容（JSON）并校验"""
    if isinstance(source, (str, bytes)):
        try:
            data = json.loads(source)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"场景文件语法错误: {e}") from e
    else:
        data = source

    if not isinstance(data, dict):
        raise SceneFormatError("场景文件顶层必须是对象")
    units = data.get("units", "meters")
    if units != "meters":
        raise SceneFormatError(f"不支持的单位: {units}")

    raw_surfaces = data.get("surfaces")
    raw_stations = data.get("base_stations", [])
    if not isinstance(raw_surfaces, list):
        raise SceneFormatError("缺少 surfaces 列表")
    if not isinstance(raw_stations, list):
        raise SceneFormatError("base_stations 必须是列表")

    surfaces = []
    for index, item in enumerate(raw_surfaces):
        try:
            vertices = item["vertices"]
            surfaces.append(Surface(np.asarray(vertices, dtype=float)))
        except SceneError as e:
            raise SceneError(f"表面 {index}: {e}", entity="surface", index=index) from e
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"表面 {index} 格式错误: {e}") from e

    stations = []
    for index, item in enumerate(raw_stations):
        try:
            boresight = item.get("boresight")
            stations.append(BaseStation(int(item["id"]), np.asarray(item["position"], dtype=float), boresight))
        except SceneError as e:
            raise SceneError(f"基站 {index}: {e}", entity="base_station", index=index) from e
        except (KeyError, TypeError, ValueError) as e:
            raise SceneFormatError(f"基站 {index} 格式错误: {e}") from e

    scene = Scene(tuple(surfaces), tuple(stations))
    logging.info(f"场景加载完成: {len(scene.surfaces)} 个表面, {len(scene.base_stations)} 个基站")
    return scene


def load_scene_file(path: Union[str, Path]) -> Scene:
    """从文件加载场景"""
    with open(path, "r", encoding="utf-8") as f:
        return load_scene(f.read())


def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    """场景序列化为可写入JSON的字典"""
    stations = []
    for bs in scene.base_stations:
        entry: Dict[str, Any] = {"id": bs.id, "position": [float(v) for v in bs.position]}
        if bs.boresight is not None:
            entry["boresight"] = [float(v) for v in bs.boresight]
        stations.append(entry)
    return {
        "units": "meters",
        "surfaces": [{"vertices": s.vertices.tolist()} for s in scene.surfaces],
        "base_stations": stations,
    }


def save_scene(scene: Scene, path: Union[str, Path]) -> str:
    """写出场景文件"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene), f, indent=2)
    return str(path)


# ---------------------------------------------------------------------------
# 场景生成
# ---------------------------------------------------------------------------

def _oriented_rect(corner, u, v, outward) -> np.ndarray:
    """由角点和两条边构造矩形，顶点顺序使法线指向 outward"""
    corner = np.asarray(corner, dtype=float)
    verts = np.array([corner, corner + u, corner + u + v, corner + v])
    if np.dot(np.cross(u, v), outward) < 0:
        verts = verts[::-1]
    return verts


def _box_faces(lo, hi, inward: bool = False, split: bool = False) -> List[np.ndarray]:
    """轴对齐长方体的6个面；split 时每个面沿长边一分为二"""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    size = hi - lo
    faces = []
    for axis in range(3):
        a1, a2 = [k for k in range(3) if k != axis]
        for side, coord in ((-1.0, lo[axis]), (1.0, hi[axis])):
            outward = np.zeros(3)
            outward[axis] = -side if inward else side
            corner = lo.copy()
            corner[axis] = coord
            u = np.zeros(3)
            v = np.zeros(3)
            u[a1] = size[a1]
            v[a2] = size[a2]
            if split:
                if size[a1] < size[a2]:
                    u, v = v, u
                half = u / 2.0
                faces.append(_oriented_rect(corner, half, v, outward))
                faces.append(_oriented_rect(corner + half, half, v, outward))
            else:
                faces.append(_oriented_rect(corner, u, v, outward))
    return faces


def generate_box_scene(width: float = 8.0, length: float = 18.0, height: float = 2.5,
                       clutter: int = 0, seed: int = 0,
                       clutter_size: Tuple[float, float] = (0.8, 2.0),
                       clutter_height: Tuple[float, float] = (0.8, 1.8),
                       wall_clearance: float = 0.5, bs_clearance: float = 1.0) -> Scene:
    """生成标准长方体厂房场景：顶角4个基站，可选轴对齐杂物箱"""
    if width <= 0 or length <= 0 or height <= 0:
        raise SceneError(f"场景尺寸必须为正: {width} x {length} x {height}", entity="dimensions")
    if clutter < 0:
        raise SceneError(f"杂物数量不能为负: {clutter}", entity="clutter")

    faces = _box_faces((0.0, 0.0, 0.0), (width, length, height), split=True)
    corners = [(0.0, 0.0), (width, 0.0), (0.0, length), (width, length)]
    stations = [BaseStation(i, np.array([x, y, height])) for i, (x, y) in enumerate(corners)]

    rng = np.random.default_rng(seed)
    boxes: List[Tuple[np.ndarray, np.ndarray]] = []
    max_h = min(clutter_height[1], 0.9 * height)
    min_h = min(clutter_height[0], max_h)
    attempts = 0
    while len(boxes) < clutter:
        attempts += 1
        if attempts > 1000 * max(clutter, 1):
            raise SceneError(f"无法放置 {clutter} 个杂物箱", entity="clutter", index=len(boxes))
        sx, sy = rng.uniform(clutter_size[0], clutter_size[1], size=2)
        sz = rng.uniform(min_h, max_h)
        x_hi = width - wall_clearance - sx
        y_hi = length - wall_clearance - sy
        if x_hi <= wall_clearance or y_hi <= wall_clearance:
            continue
        x0 = rng.uniform(wall_clearance, x_hi)
        y0 = rng.uniform(wall_clearance, y_hi)
        lo = np.array([x0, y0, 0.0])
        hi = np.array([x0 + sx, y0 + sy, sz])
        # 与已放置的箱体保持间隔
        if any(np.all(lo[:2] < b_hi[:2] + 0.3) and np.all(hi[:2] > b_lo[:2] - 0.3) for b_lo, b_hi in boxes):
            continue
        # 与基站水平投影保持距离
        if any(np.all(lo[:2] < bs.position[:2] + bs_clearance) and np.all(hi[:2] > bs.position[:2] - bs_clearance)
               for bs in stations):
            continue
        boxes.append((lo, hi))

    for lo, hi in boxes:
        faces.extend(_box_faces(lo, hi))

    scene = Scene(tuple(Surface(f) for f in faces), tuple(stations))
    logging.info(f"生成场景 {width}x{length}x{height} m，杂物箱 {len(boxes)} 个")
    return scene


# ---------------------------------------------------------------------------
# 求交与追踪
# ---------------------------------------------------------------------------

def _facet_distances(origins: np.ndarray, directions: np.ndarray, scene: Scene,
                     min_distance: float) -> np.ndarray:
    """返回 (N, M) 的求交距离矩阵，不相交处为 inf"""
    normals = scene._normals
    denom = directions @ normals.T
    num = scene._offsets[None, :] - origins @ normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    valid = (np.abs(denom) > 1e-15) & np.isfinite(t) & (t > min_distance)
    t_safe = np.where(valid, t, 0.0)
    points = origins[:, None, :] + t_safe[..., None] * directions[:, None, :]
    side = np.einsum("nmk,mvk->nmv", points, scene._edge_normals) - scene._edge_consts[None]
    valid &= np.all(side >= -INSIDE_TOL, axis=2)
    return np.where(valid, t, np.inf)


def nearest_hits(origins: np.ndarray, directions: np.ndarray, scene: Scene,
                 min_distance: float = SELF_HIT_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """批量最近交点：返回 (表面索引, 距离)，无交点时为 (-1, inf)"""
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    n = origins.shape[0]
    surface_ids = np.full(n, -1, dtype=int)
    distances = np.full(n, np.inf)
    for start in range(0, n, _CHUNK_SIZE):
        stop = min(start + _CHUNK_SIZE, n)
        t = _facet_distances(origins[start:stop], directions[start:stop], scene, min_distance)
        j = np.argmin(t, axis=1)
        best = t[np.arange(stop - start), j]
        hit = np.isfinite(best)
        surface_ids[start:stop] = np.where(hit, j, -1)
        distances[start:stop] = best
    return surface_ids, distances


def intersect(ray: Ray, scene: Scene) -> Optional[Hit]:
    """射线与场景的最近交点，忽略距离小于自交阈值的交点"""
    sid, dist = nearest_hits(ray.origin[None], ray.direction[None], scene)
    if sid[0] < 0:
        return None
    return Hit(int(sid[0]), ray.origin + dist[0] * ray.direction, float(dist[0]))


def reflect(direction, normal) -> np.ndarray:
    """镜面反射 d' = d - 2(d·n)n，支持批量"""
    d = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def exit_distances(origins: np.ndarray, directions: np.ndarray, scene: Scene) -> np.ndarray:
    """射线离开场景包围盒的距离，起点在边界上且朝外时为 0"""
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(directions > 0, scene.bbox_max, scene.bbox_min)
        t = (bound - origins) / directions
    t = np.where(directions != 0, t, np.inf)
    return np.maximum(np.min(t, axis=1), 0.0)


def trace_batch(origins, directions, scene: Scene, max_bounces: int = DEFAULT_MAX_BOUNCES,
                max_length: float = DEFAULT_MAX_LENGTH, bs_id: int = -1) -> PathBundle:
    """批量镜面反射追踪"""
    if max_bounces < 0:
        raise ValueError("max_bounces 不能为负")
    if max_length <= 0:
        raise ValueError("max_length 必须为正")

    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(directions, dtype=float)).copy()
    n = origins.shape[0]
    if dirs.shape[0] == 1 and n > 1:
        dirs = np.repeat(dirs, n, axis=0)
    slots = max_bounces + 2

    vertices = np.full((n, slots, 3), np.nan)
    cumulative = np.full((n, slots), np.inf)
    seg_dirs = np.full((n, slots - 1, 3), np.nan)
    surface_ids = np.full((n, slots - 1), -1, dtype=int)
    n_vertices = np.ones(n, dtype=int)
    bounces = np.zeros(n, dtype=int)
    escaped = np.zeros(n, dtype=bool)

    vertices[:, 0] = origins
    cumulative[:, 0] = 0.0
    position = origins.copy()
    travelled = np.zeros(n)
    active = np.ones(n, dtype=bool)

    for step in range(max_bounces + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sid, dist = nearest_hits(position[idx], dirs[idx], scene)
        remaining = max_length - travelled[idx]
        hit = sid >= 0

        exit_len = exit_distances(position[idx], dirs[idx], scene)
        # 未命中的射线止于包围盒出口，朝外的射线长度为 0
        free_len = np.minimum(exit_len, remaining)
        seg = np.where(hit, np.minimum(dist, remaining), free_len)
        capped = np.where(hit, dist >= remaining, free_len >= remaining)

        end = position[idx] + seg[:, None] * dirs[idx]
        slot = n_vertices[idx]
        vertices[idx, slot] = end
        cumulative[idx, slot] = travelled[idx] + seg
        seg_dirs[idx, step] = dirs[idx]
        surface_ids[idx, step] = np.where(hit & ~capped, sid, -1)
        n_vertices[idx] += 1
        travelled[idx] += seg
        position[idx] = end
        escaped[idx] |= ~hit & ~capped

        bounce = hit & ~capped & (step < max_bounces)
        b_idx = idx[bounce]
        if b_idx.size:
            dirs[b_idx] = reflect(dirs[b_idx], scene._normals[sid[bounce]])
            dirs[b_idx] /= np.linalg.norm(dirs[b_idx], axis=1, keepdims=True)
            bounces[b_idx] += 1
        active[idx[~bounce]] = False

    return PathBundle(vertices, cumulative, seg_dirs, n_vertices, bounces, surface_ids, escaped, bs_id)


def trace(ray: Ray, scene: Scene, max_bounces: int = DEFAULT_MAX_BOUNCES,
          max_length: float = DEFAULT_MAX_LENGTH) -> TracedPath:
    """单条射线的镜面反射追踪"""
    bundle = trace_batch(ray.origin[None], ray.direction[None], scene, max_bounces, max_length, ray.bs_id)
    return bundle.path(0)


# ---------------------------------------------------------------------------
# 离散化
# ---------------------------------------------------------------------------

def discretize(path: TracedPath, step: float = DEFAULT_STEP, ray_index: int = 0) -> List[PathPoint]:
    """按固定步长把路径离散成带长度的点"""
    if step <= 0:
        raise ValueError("step 必须为正")
    total = path.total_length
    count = int(math.floor(total / step + 1e-9)) + 1
    points = []
    for k in range(count):
        s = min(k * step, total)
        points.append(PathPoint(path.point_at(s), s, path.bs_id, ray_index))
    return points


def discretize_bundle(bundle: PathBundle, step: float = DEFAULT_STEP) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """批量离散化：返回 (位置, 长度, 射线索引)"""
    if step <= 0:
        raise ValueError("step 必须为正")
    n = len(bundle)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    totals = bundle.totals
    counts = np.floor(totals / step + 1e-9).astype(int) + 1
    ray_index = np.repeat(np.arange(n), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(ray_index.size) - np.repeat(starts, counts)
    lengths = np.minimum(k * step, totals[ray_index])

    cum = bundle.cumulative[ray_index]
    seg = np.sum(cum[:, 1:] < lengths[:, None], axis=1)
    seg = np.minimum(seg, bundle.n_vertices[ray_index] - 2)
    seg = np.maximum(seg, 0)
    base = bundle.vertices[ray_index, seg]
    offset = lengths - cum[np.arange(ray_index.size), seg]
    direction = bundle.directions[ray_index, seg]
    direction = np.where(np.isfinite(direction), direction, 0.0)
    positions = base + offset[:, None] * direction
    return positions, lengths, ray_index


def closest_approach(bundle: PathBundle, target) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """每条路径与目标点的最近距离、对应的路径长度及所在段号"""
    target = _as_point(target)
    a = bundle.vertices[:, :-1]
    d = bundle.directions
    seg_len = np.diff(bundle.cumulative, axis=1)
    valid = np.isfinite(seg_len) & np.all(np.isfinite(d), axis=2)
    a = np.where(valid[..., None], a, 0.0)
    d = np.where(valid[..., None], d, 0.0)
    seg_len = np.where(valid, seg_len, 0.0)
    t = np.clip(np.sum((target - a) * d, axis=2), 0.0, seg_len)
    dist = np.linalg.norm(a + t[..., None] * d - target, axis=2)
    dist = np.where(valid, dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(bundle))
    length_at = bundle.cumulative[rows, best] + t[rows, best]
    return dist[rows, best], length_at, best


# ---------------------------------------------------------------------------
# 自由空间判定
# ---------------------------------------------------------------------------

def crossing_counts(scene: Scene, points) -> np.ndarray:
    """沿固定方向的射线穿过表面的次数，用于奇偶判定"""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dirs = np.repeat(_PARITY_DIRECTION[None], pts.shape[0], axis=0)
    counts = np.zeros(pts.shape[0], dtype=int)
    for start in range(0, pts.shape[0], _CHUNK_SIZE):
        stop = min(start + _CHUNK_SIZE, pts.shape[0])
        t = _facet_distances(pts[start:stop], dirs[start:stop], scene, 0.0)
        counts[start:stop] = np.sum(np.isfinite(t), axis=1)
    return counts


def distance_to_surfaces(scene: Scene, points) -> np.ndarray:
    """点到最近表面多边形的距离"""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    normals = scene._normals
    plane = pts @ normals.T - scene._offsets[None]                          # (P, M)
    proj = pts[:, None, :] - plane[..., None] * normals[None]              # (P, M, 3)
    side = np.einsum("pmk,mvk->pmv", proj, scene._edge_normals) - scene._edge_consts[None]
    inside = np.all(side >= -INSIDE_TOL, axis=2)

    starts = scene._edge_starts[None]                                       # (1, M, V, 3)
    edges = scene._edge_vectors[None]
    rel = pts[:, None, None, :] - starts
    e2 = np.sum(edges * edges, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(e2 > 0, np.sum(rel * edges, axis=-1) / e2, 0.0)
    u = np.clip(u, 0.0, 1.0)
    edge_dist = np.linalg.norm(rel - u[..., None] * edges, axis=-1).min(axis=2)
    dist = np.where(inside, np.abs(plane), edge_dist)
    return dist.min(axis=1)


def is_free_point(scene: Scene, point, margin: float = 0.0) -> bool:
    """点在场景内部自由空间中（不在杂物内部）且与所有表面距离不小于 margin"""
    p = _as_point(point)
    if not scene.contains(p):
        return False
    if crossing_counts(scene, p)[0] % 2 == 0:
        return False
    return bool(distance_to_surfaces(scene, p)[0] >= margin)
