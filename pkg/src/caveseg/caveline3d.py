"""Ray-plane triangulation of 2D caveline segments from posed pinhole cameras.

Conventions: a pose maps world to camera, ``x_cam = R @ x_world + t``; pixels
are ``(u, v)`` with ``u = fx * x / z + cx`` and ``v = fy * y / z + cy``. No lens
distortion is modelled, so inputs are assumed rectified.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import (BehindCameraError, DataError, DegenerateGeometryError, FormatError,
                     ParallelRayError, ParameterError)

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-12
_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraView:
    """Intrinsics, world-to-camera pose and observed 2D segments of one image.

    ``segments`` has shape ``(N, 2, 2)``: N segments, two endpoints, ``(u, v)``.
    When ``width``/``height`` are given every endpoint must lie inside
    ``[0, width] x [0, height]``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ParameterError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ParameterError(f"rotation must be 3x3 and translation length 3, got {R.shape} and {t.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=_ORTHO_TOL) or abs(np.linalg.det(R) - 1) > _ORTHO_TOL:
            raise ParameterError("rotation must be orthonormal with determinant +1")
        segs = np.array(self.segments, dtype=np.float64)
        if segs.size == 0:
            segs = segs.reshape(0, 2, 2)
        if segs.ndim != 3 or segs.shape[1:] != (2, 2):
            raise ParameterError(f"segments must have shape (N, 2, 2), got {segs.shape}")
        if not np.all(np.isfinite(segs)):
            raise ParameterError("segment endpoints must be finite")
        if self.width is not None or self.height is not None:
            if self.width is None or self.height is None or self.width <= 0 or self.height <= 0:
                raise ParameterError("width and height must both be positive when given")
            u, v = segs[..., 0], segs[..., 1]
            outside = (u < 0) | (u > self.width) | (v < 0) | (v > self.height)
            if outside.any():
                k = int(np.argwhere(outside)[0][0])
                raise ParameterError(f"segment {k} has an endpoint outside the {self.width}x{self.height} image")
        for name, arr in (("rotation", R), ("translation", t), ("segments", segs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> tuple:
        """Project world points ``(..., 3)``; returns ``(pixels (..., 2), depth (...))``."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def with_segments(self, segments) -> "CameraView":
        return CameraView(self.fx, self.fy, self.cx, self.cy, self.rotation, self.translation,
                          segments, self.width, self.height)


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


class Plane(NamedTuple):
    """Points ``x`` with ``normal @ x + offset == 0``; ``normal`` has unit length."""

    normal: np.ndarray
    offset: float


def backproject_ray(view: CameraView, pixel) -> Ray:
    u, v = (float(c) for c in pixel)
    d = np.array([(u - view.cx) / view.fx, (v - view.cy) / view.fy, 1.0])
    d /= np.linalg.norm(d)
    return Ray(view.center, view.rotation.T @ d)


def segment_plane(view: CameraView, segment2d) -> Plane:
    """Plane through the camera centre and both endpoint rays of a 2D segment."""
    seg = np.asarray(segment2d, dtype=np.float64)
    if np.array_equal(seg[0], seg[1]):
        raise DegenerateGeometryError(f"segment endpoints coincide at {tuple(seg[0])}")
    r1 = backproject_ray(view, seg[0])
    r2 = backproject_ray(view, seg[1])
    n = np.cross(r1.direction, r2.direction)
    norm = np.linalg.norm(n)
    if norm < DEGENERACY_TOL:
        raise DegenerateGeometryError("endpoint rays are parallel; segment spans no plane")
    n /= norm
    return Plane(n, float(-n @ r1.origin))


def intersect_ray_plane(ray: Ray, plane: Plane) -> np.ndarray:
    denom = float(plane.normal @ ray.direction)
    if abs(denom) < DEGENERACY_TOL:
        raise ParallelRayError(f"ray is parallel to the plane (|n.r| = {abs(denom):.3g})")
    t = -(float(plane.normal @ ray.origin) + plane.offset) / denom
    if t <= 0:
        raise BehindCameraError(f"intersection lies behind the camera (t = {t:.6g})")
    return ray.origin + t * ray.direction


def triangulate_segment(plane_view: CameraView, ray_view: CameraView, plane_segment, ray_segment) -> np.ndarray:
    """Intersect both endpoint rays of ``ray_segment`` with the plane of ``plane_segment``.

    Returns the 3D segment as a ``(2, 3)`` array whose endpoints correspond to
    the endpoints of ``ray_segment``.
    """
    plane = segment_plane(plane_view, plane_segment)
    rs = np.asarray(ray_segment, dtype=np.float64)
    return np.stack([intersect_ray_plane(backproject_ray(ray_view, p), plane) for p in rs])


def point_line_distance(points, segment2d) -> np.ndarray:
    """Perpendicular distance from 2D points to the supporting line of a segment."""
    a, b = np.asarray(segment2d, dtype=np.float64)
    d = b - a
    length = np.hypot(*d)
    if length == 0:
        raise DegenerateGeometryError("observed segment has zero length")
    p = np.asarray(points, dtype=np.float64) - a
    return np.abs(d[0] * p[..., 1] - d[1] * p[..., 0]) / length


def reprojection_error(views: Sequence[CameraView], observed: Sequence, segment3d) -> float:
    """Mean perpendicular pixel distance of the projected endpoints to each observed line.

    ``observed[i]`` is the 2D segment seen in ``views[i]``. Views where either
    endpoint has nonpositive depth are skipped; the per-view means are averaged.
    """
    if len(views) != len(observed):
        raise ParameterError(f"{len(views)} views but {len(observed)} observations")
    seg = np.asarray(segment3d, dtype=np.float64)
    per_view = []
    for view, obs in zip(views, observed):
        uv, z = view.project(seg)
        if np.any(z <= 0):
            continue
        per_view.append(float(point_line_distance(uv, obs).mean()))
    if not per_view:
        raise DegenerateGeometryError("segment is behind every scoring view")
    return float(np.mean(per_view))


def _min_endpoint_distance(segments: np.ndarray) -> np.ndarray:
    pts = segments.reshape(-1, 3)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    n = len(segments)
    return d.reshape(n, 2, n, 2).min(axis=(1, 3))


def default_radius(segments3d) -> float:
    seg = np.asarray(segments3d, dtype=np.float64).reshape(-1, 2, 3)
    if len(seg) == 0:
        raise ParameterError("no segments to derive a neighbourhood radius from")
    median = float(np.median(np.linalg.norm(seg[:, 1] - seg[:, 0], axis=1)))
    if median <= 0:
        raise ParameterError("median segment length is zero; pass an explicit radius")
    return 2.0 * median


def build_connectivity_graph(segments3d, errors, radius: Optional[float] = None) -> tuple:
    """Link segments whose closest endpoints are nearer than ``radius``.

    Returns ``(edges, smoothed)``: sorted ``(i, j)`` pairs with ``i < j`` and,
    per node, the mean error over the node and its neighbours. ``radius``
    defaults to twice the median segment length.
    """
    seg = np.asarray(segments3d, dtype=np.float64).reshape(-1, 2, 3)
    err = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(err) != len(seg):
        raise ParameterError(f"{len(seg)} segments but {len(err)} errors")
    if len(seg) == 0:
        return [], np.zeros(0)
    if radius is None:
        radius = default_radius(seg)
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    adj = _min_endpoint_distance(seg) < radius
    np.fill_diagonal(adj, True)
    smoothed = (adj @ err) / adj.sum(axis=1)
    i, j = np.nonzero(np.triu(adj, k=1))
    return list(zip(i.tolist(), j.tolist())), smoothed


@dataclass
class Polyline3D:
    """Triangulated segments with raw and neighbourhood-averaged reprojection errors."""

    segments: np.ndarray
    errors: np.ndarray
    smoothed_errors: np.ndarray
    edges: list = field(default_factory=list)
    source_index: list = field(default_factory=list)

    def __len__(self):
        return len(self.segments)


@dataclass
class Rejection:
    index: int
    reason: str


@dataclass
class TriangulationResult:
    polyline: Polyline3D
    rejected: list
    radius: Optional[float]

    def summary(self) -> dict:
        err = self.polyline.errors
        stats = {}
        if len(err):
            stats = {"mean": float(err.mean()), "median": float(np.median(err)),
                     "min": float(err.min()), "max": float(err.max())}
        return {
            "segment_count": len(self.polyline),
            "rejected_count": len(self.rejected),
            "rejected": [{"index": r.index, "reason": r.reason} for r in self.rejected],
            "radius": self.radius,
            "reprojection_error": stats,
            "segment_errors": [float(e) for e in err],
            "smoothed_errors": [float(e) for e in self.polyline.smoothed_errors],
        }


PLANE_ROLES = ("longer", "first", "second")


def triangulate_views(views: Sequence[CameraView], matches: Optional[Sequence] = None,
                      plane_role: str = "longer", radius: Optional[float] = None) -> TriangulationResult:
    """Triangulate matched segments of ``views[0]`` and ``views[1]``.

    ``matches`` lists ``(i, j)`` index pairs into the two views' segments;
    when omitted the segments are paired by index. ``plane_role`` picks which
    view supplies the plane: ``"longer"`` (the view whose 2D segment is longer),
    ``"first"`` or ``"second"``. Further views are used only for scoring, and
    only when paired by index with the same segment count. Degenerate segments
    are dropped and listed in ``rejected``.
    """
    if len(views) < 2:
        raise ParameterError(f"triangulation needs at least two views, got {len(views)}")
    if plane_role not in PLANE_ROLES:
        raise ParameterError(f"plane_role must be one of {PLANE_ROLES}, got {plane_role!r}")
    a, b = views[0], views[1]
    index_paired = matches is None
    if index_paired:
        if len(a.segments) != len(b.segments):
            raise DataError(f"views carry {len(a.segments)} and {len(b.segments)} segments; "
                            "pass explicit matches")
        matches = [(k, k) for k in range(len(a.segments))]
    extra = [v for v in views[2:] if len(v.segments) == len(a.segments)] if index_paired else []
    if len(views) > 2 and len(extra) < len(views) - 2:
        logger.warning("ignoring %d view(s) not paired by index for scoring", len(views) - 2 - len(extra))

    segs, errs, kept, rejected = [], [], [], []
    for k, (i, j) in enumerate(matches):
        sa, sb = a.segments[i], b.segments[j]
        a_is_plane = {"first": True, "second": False,
                      "longer": np.linalg.norm(sa[1] - sa[0]) >= np.linalg.norm(sb[1] - sb[0])}[plane_role]
        try:
            if a_is_plane:
                seg3 = triangulate_segment(a, b, sa, sb)
            else:
                seg3 = triangulate_segment(b, a, sb, sa)
            score_views = [a, b] + extra
            score_obs = [sa, sb] + [v.segments[i] for v in extra]
            err = reprojection_error(score_views, score_obs, seg3)
        except DegenerateGeometryError as exc:
            rejected.append(Rejection(k, f"{type(exc).__name__}: {exc}"))
            continue
        segs.append(seg3)
        errs.append(err)
        kept.append(k)

    seg_arr = np.array(segs, dtype=np.float64).reshape(-1, 2, 3)
    err_arr = np.array(errs, dtype=np.float64)
    used_radius = radius
    if len(seg_arr) and radius is None:
        try:
            used_radius = default_radius(seg_arr)
        except ParameterError:
            used_radius = None
    if len(seg_arr) and used_radius is not None:
        edges, smoothed = build_connectivity_graph(seg_arr, err_arr, used_radius)
    else:
        edges, smoothed = [], err_arr.copy()
    return TriangulationResult(Polyline3D(seg_arr, err_arr, smoothed, edges, kept), rejected, used_radius)


def match_segments(segments_a, segments_b, min_score: float = 0.0) -> list:
    """Heuristic cross-view matcher; not a calibrated correspondence method.

    Scores each pair by ``|cos|`` of the angle between the segment directions,
    times the overlap fraction of the two segments projected on their mean
    direction, divided by ``1 + offset / length`` where ``offset`` is the
    perpendicular distance between midpoints and ``length`` the mean segment
    length. The assignment maximising the total score is returned as
    ``(i, j)`` pairs; pairs scoring ``<= min_score`` are dropped.
    """
    A = np.asarray(segments_a, dtype=np.float64).reshape(-1, 2, 2)
    B = np.asarray(segments_b, dtype=np.float64).reshape(-1, 2, 2)
    if len(A) == 0 or len(B) == 0:
        return []
    score = np.zeros((len(A), len(B)))
    for i, sa in enumerate(A):
        da = sa[1] - sa[0]
        la = np.linalg.norm(da)
        da = da / (la or 1.0)
        for j, sb in enumerate(B):
            db = sb[1] - sb[0]
            lb = np.linalg.norm(db)
            db = db / (lb or 1.0)
            cos = float(da @ db)
            axis = da + np.sign(cos or 1.0) * db
            axis = axis / (np.linalg.norm(axis) or 1.0)
            pa, pb = np.sort(sa @ axis), np.sort(sb @ axis)
            inter = min(pa[1], pb[1]) - max(pa[0], pb[0])
            span = max(pa[1], pb[1]) - min(pa[0], pb[0])
            if span <= 0:
                continue
            normal = np.array([-axis[1], axis[0]])
            offset = abs((sa.mean(axis=0) - sb.mean(axis=0)) @ normal)
            scale = 0.5 * (la + lb) or 1.0
            score[i, j] = abs(cos) * max(inter, 0.0) / span / (1.0 + offset / scale)
    rows, cols = linear_sum_assignment(score, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if score[i, j] > min_score]


def segments_from_mask(labels, class_id: int = 0, min_pixels: int = 8) -> np.ndarray:
    """One straight segment per 8-connected component of ``class_id``.

    Endpoints are the extreme pixel centres along the component's principal
    axis. Curved lines come out as their chord; this is a convenience helper.
    """
    mask = np.asarray(labels) == class_id
    comp, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    out = []
    for k in range(1, n + 1):
        vv, uu = np.nonzero(comp == k)
        if len(uu) < min_pixels:
            continue
        pts = np.stack([uu, vv], axis=1).astype(np.float64)
        mean = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
        proj = (pts - mean) @ vt[0]
        out.append([pts[np.argmin(proj)], pts[np.argmax(proj)]])
    return np.array(out, dtype=np.float64).reshape(-1, 2, 2)


def look_at(center, target, up=(0.0, -1.0, 0.0)) -> tuple:
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``.

    The camera's +y axis (image down) is aligned as closely as possible with ``up``.
    """
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    y = np.asarray(up, dtype=np.float64)
    y = y - (y @ z) * z
    if np.linalg.norm(y) < DEGENERACY_TOL:
        raise ParameterError("up vector is parallel to the viewing direction")
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return R, -R @ c


def synthetic_polyline(rng: np.random.Generator, n_segments: int = 20, step: float = 0.3) -> np.ndarray:
    """Random-walk polyline of ``n_segments`` segments near the origin, as ``(N, 2, 3)``."""
    steps = rng.normal(size=(n_segments, 3))
    steps *= step / np.linalg.norm(steps, axis=1, keepdims=True)
    verts = np.concatenate([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
    verts -= verts.mean(axis=0)
    return np.stack([verts[:-1], verts[1:]], axis=1)


def synthetic_views(seed: int = 0, n_segments: int = 20, baseline_deg: float = 30.0, n_views: int = 2,
                    distance: float = 6.0, sigma: float = 0.0, focal: float = 500.0,
                    width: int = 640, height: int = 480) -> tuple:
    """Posed views of a random polyline; returns ``(views, ground_truth_segments)``.

    The first two cameras sit ``distance`` from the origin, ``baseline_deg``
    apart about the world y axis, looking at the origin. A third view, if
    requested, looks from between them and 15 degrees above; it is the
    held-out scoring view in noise studies. ``sigma`` adds isotropic Gaussian
    pixel noise to every observed endpoint.
    """
    if n_views not in (2, 3):
        raise ParameterError(f"n_views must be 2 or 3, got {n_views}")
    rng = np.random.default_rng(seed)
    truth = synthetic_polyline(rng, n_segments)
    half = math.radians(0.5 * baseline_deg)
    centers = [distance * np.array([math.sin(a), 0.0, -math.cos(a)]) for a in (-half, half)]
    if n_views == 3:
        up = math.radians(15.0)
        centers.append(distance * np.array([0.0, -math.sin(up), -math.cos(up)]))
    views = []
    for c in centers:
        R, t = look_at(c, np.zeros(3))
        view = CameraView(focal, focal, width / 2, height / 2, R, t)
        uv, _ = view.project(truth)
        if sigma:
            uv = uv + rng.normal(scale=sigma, size=uv.shape)
        views.append(view.with_segments(uv))
    return views, truth


def view_to_dict(view: CameraView) -> dict:
    d = {
        "intrinsics": {"fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy},
        "rotation": view.rotation.tolist(),
        "translation": view.translation.tolist(),
        "segments": view.segments.tolist(),
    }
    if view.width is not None:
        d["width"], d["height"] = view.width, view.height
    return d


def view_from_dict(d: dict) -> CameraView:
    try:
        k = d["intrinsics"]
        return CameraView(k["fx"], k["fy"], k["cx"], k["cy"], d["rotation"], d["translation"],
                          d.get("segments", []), d.get("width"), d.get("height"))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"view document is missing or mistypes {exc}") from None


def read_view(path: os.PathLike) -> CameraView:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    try:
        return view_from_dict(doc)
    except (FormatError, ParameterError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_view(view: CameraView, path: os.PathLike) -> None:
    Path(path).write_text(json.dumps(view_to_dict(view), indent=2) + "\n")


def format_ply(polyline: Polyline3D) -> str:
    """ASCII PLY with two vertices per segment and one edge per segment.

    Each edge carries ``error`` (raw reprojection error, px) and
    ``smoothed_error`` (neighbourhood mean).
    """
    n = len(polyline)
    lines = ["ply", "format ascii 1.0", "comment caveline segments with reprojection error (px)",
             f"element vertex {2 * n}", "property double x", "property double y", "property double z",
             f"element edge {n}", "property int vertex1", "property int vertex2",
             "property double error", "property double smoothed_error", "end_header"]
    for p in polyline.segments.reshape(-1, 3):
        lines.append(" ".join(repr(float(c)) for c in p))
    for k in range(n):
        lines.append(f"{2 * k} {2 * k + 1} {float(polyline.errors[k])!r} {float(polyline.smoothed_errors[k])!r}")
    return "\n".join(lines) + "\n"


def read_ply(text: str) -> tuple:
    """Parse the output of :func:`format_ply`; returns ``(segments, errors, smoothed)``."""
    lines = text.splitlines()
    try:
        end = lines.index("end_header")
        nv = int(next(l.split()[2] for l in lines[:end] if l.startswith("element vertex")))
        ne = int(next(l.split()[2] for l in lines[:end] if l.startswith("element edge")))
        verts = np.array([[float(c) for c in l.split()] for l in lines[end + 1:end + 1 + nv]]).reshape(nv, 3)
        edges = [l.split() for l in lines[end + 1 + nv:end + 1 + nv + ne]]
        idx = np.array([[int(e[0]), int(e[1])] for e in edges], dtype=int).reshape(ne, 2)
        err = np.array([float(e[2]) for e in edges])
        smooth = np.array([float(e[3]) for e in edges])
    except (ValueError, StopIteration, IndexError) as exc:
        raise FormatError(f"malformed PLY: {exc}") from None
    return verts[idx], err, smooth
