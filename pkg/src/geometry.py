"""
几何计算模块

轴对齐框运算、区域对的联合框归一化特征，以及基于射线的可见性邻接。
所有函数都是纯函数，可在多线程中并发调用。
"""
import math
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import GeometryError

logger = logging.getLogger(__name__)

FEATURE_DIM = 8
# 联合框宽或高为0时的分母
DEGENERATE_EXTENT = 1e-9
# 射线方向分量小于该值时视为与坐标轴平行
_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Point:
    """像素坐标点"""
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"Point has non-finite coordinates: ({self.x}, {self.y})")


@dataclass(frozen=True)
class BBox:
    """轴对齐矩形框 (x_min, y_min, x_max, y_max)，单位像素"""
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"BBox has non-finite coordinates: {values}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"BBox is inverted: {values}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> Point:
        return Point((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class RayConfig:
    """射线参数：默认72条、间隔5度，覆盖整圆"""
    ray_count: int = 72
    ray_step_deg: float = 5.0

    def __post_init__(self):
        if self.ray_count < 1:
            raise GeometryError(f"ray_count must be >= 1, got {self.ray_count}")
        if not self.ray_step_deg > 0:
            raise GeometryError(f"ray_step_deg must be > 0, got {self.ray_step_deg}")

    def angles(self) -> np.ndarray:
        return np.arange(self.ray_count, dtype=np.float64) * self.ray_step_deg


def bounding_box(quad: Sequence) -> BBox:
    """四边形（4个点）的最小外接轴对齐框"""
    if len(quad) != 4:
        raise GeometryError(f"quad must have 4 points, got {len(quad)}")
    points = [p if isinstance(p, Point) else Point(float(p[0]), float(p[1])) for p in quad]
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    return BBox(min(xs), min(ys), max(xs), max(ys))


def joint_bbox(a: BBox, b: BBox) -> BBox:
    """同时包含两个框的最小框"""
    return BBox(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def clamp_box(box: BBox, width: float, height: float) -> BBox:
    """把框裁剪到页面范围 [0,width]x[0,height] 内"""
    x_min = min(max(box.x_min, 0.0), width)
    y_min = min(max(box.y_min, 0.0), height)
    x_max = min(max(box.x_max, 0.0), width)
    y_max = min(max(box.y_max, 0.0), height)
    return BBox(x_min, y_min, x_max, y_max)


def transform_box(box: BBox, scale: float = 1.0, dx: float = 0.0, dy: float = 0.0) -> BBox:
    """等比缩放后平移"""
    return BBox(box.x_min * scale + dx, box.y_min * scale + dy,
                box.x_max * scale + dx, box.y_max * scale + dy)


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """框列表转为 (N, 4) 数组"""
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def pair_features(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    批量计算区域对特征

    Args:
        a: (..., 4) 第一个框
        b: (..., 4) 第二个框，形状与a相同

    Returns:
        (..., 8) 以联合框归一化后的坐标，先a后b
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    jx0 = np.minimum(a[..., 0], b[..., 0])
    jy0 = np.minimum(a[..., 1], b[..., 1])
    jx1 = np.maximum(a[..., 2], b[..., 2])
    jy1 = np.maximum(a[..., 3], b[..., 3])
    w = jx1 - jx0
    h = jy1 - jy0
    w = np.where(w > 0, w, DEGENERATE_EXTENT)
    h = np.where(h > 0, h, DEGENERATE_EXTENT)

    origin = np.stack([jx0, jy0, jx0, jy0], axis=-1)
    extent = np.stack([w, h, w, h], axis=-1)
    return np.concatenate([(a - origin) / extent, (b - origin) / extent], axis=-1)


def pair_feature(a: BBox, b: BBox) -> np.ndarray:
    """单个区域对的8维特征；不对称，(a, b) 与 (b, a) 的两个4维块互换"""
    return pair_features(np.array(a.as_tuple()), np.array(b.as_tuple()))


def _ray_directions(angles_deg: np.ndarray) -> np.ndarray:
    radians = np.radians(np.mod(angles_deg, 360.0))
    return np.stack([np.cos(radians), np.sin(radians)], axis=-1)


def _ray_distances(origin: np.ndarray, directions: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """
    slab方法：每条射线到每个框的最近命中距离

    Args:
        origin: (2,) 射线起点
        directions: (R, 2) 单位方向
        boxes: (N, 4) 框

    Returns:
        (R, N) 距离，未命中为 inf；起点在框内为 0
    """
    t_enter = np.zeros((directions.shape[0], boxes.shape[0]))
    t_exit = np.full((directions.shape[0], boxes.shape[0]), np.inf)

    for axis in (0, 1):
        lo = boxes[:, axis][None, :]
        hi = boxes[:, axis + 2][None, :]
        o = origin[axis]
        d = directions[:, axis][:, None]
        parallel = np.abs(d) < _PARALLEL_EPS
        safe_d = np.where(parallel, 1.0, d)
        t1 = (lo - o) / safe_d
        t2 = (hi - o) / safe_d
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        inside_slab = (lo <= o) & (o <= hi)
        near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
        t_enter = np.maximum(t_enter, near)
        t_exit = np.minimum(t_exit, far)

    return np.where(t_exit >= t_enter, t_enter, np.inf)


def ray_hit(origin: Point, angle: float, box: BBox) -> Optional[float]:
    """射线与框的最近交点距离；起点在框内（含边界）返回0，未命中返回None"""
    if not math.isfinite(angle):
        raise GeometryError(f"ray angle must be finite, got {angle}")
    dist = _ray_distances(
        np.array([origin.x, origin.y]),
        _ray_directions(np.array([angle], dtype=np.float64)),
        np.array([box.as_tuple()]),
    )[0, 0]
    return float(dist) if math.isfinite(dist) else None


@lru_cache(maxsize=8192)
def _visibility_edges_cached(
    boxes: Tuple[Tuple[float, float, float, float], ...],
    ray_count: int,
    ray_step_deg: float,
) -> Tuple[Tuple[int, int], ...]:
    arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    n = arr.shape[0]
    if n < 2:
        return ()

    directions = _ray_directions(np.arange(ray_count, dtype=np.float64) * ray_step_deg)
    centers = np.stack([(arr[:, 0] + arr[:, 2]) / 2.0, (arr[:, 1] + arr[:, 3]) / 2.0], axis=-1)

    edges = set()
    for src in range(n):
        dists = _ray_distances(centers[src], directions, arr)
        # 发射框本身不参与自己的射线测试
        dists[:, src] = np.inf
        nearest = np.argmin(dists, axis=1)
        hit = np.isfinite(dists[np.arange(directions.shape[0]), nearest])
        for dst in nearest[hit]:
            edges.add((src, int(dst)))

    return tuple(sorted(edges))


def visibility_edges(
    boxes: Sequence[BBox],
    ray_count: int = 72,
    ray_step_deg: float = 5.0,
) -> List[Tuple[int, int]]:
    """
    射线可见性邻接

    每个框从中心发出 ray_count 条射线，相邻射线夹角 ray_step_deg 度；
    每条射线最先命中的其他框与发射框之间连一条有向边。
    结果去重、按 (src, dst) 排序，不含自环。
    """
    if len(boxes) < 1:
        raise GeometryError("visibility_edges needs at least one box")
    RayConfig(ray_count, ray_step_deg)
    key = tuple(b.as_tuple() for b in boxes)
    return list(_visibility_edges_cached(key, int(ray_count), float(ray_step_deg)))
