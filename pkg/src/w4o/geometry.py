"""Camera models, SE(3) transforms and least-squares rigid alignment.

Conventions: pinhole camera, +z forward, +x right, +y down; pixel ``u``
indexes columns (width) and ``v`` rows (height).  A camera's ``pose`` maps
camera-frame coordinates into the world frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, DimensionMismatch, NonPositiveDepth, TooFewPoints

ORTHO_TOL = 1e-9
RANK_RTOL = 1e-9

ArrayLike = Union[np.ndarray, Sequence[float]]


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL:
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation determinant is not +1")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(rot)
        if not np.all(np.isfinite(trans)):
            raise ValueError("translation must be finite")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, translation: ArrayLike) -> "RigidTransform":
        return cls(np.eye(3), translation)

    @classmethod
    def from_quaternion(cls, wxyz: ArrayLike, translation: ArrayLike = (0, 0, 0)) -> "RigidTransform":
        q = np.asarray(wxyz, dtype=float)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion not normalized (|q| = {norm})")
        return cls(Rotation.from_quat(q, scalar_first=True).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0, 0, 0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "RigidTransform":
        mat = np.asarray(mat, dtype=float)
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (w, x, y, z) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat(scalar_first=True)
        return -q if q[0] < 0 else q

    def apply(self, points: ArrayLike) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def equals(self, other: "RigidTransform", atol: float = 0.0) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def to_dict(self) -> dict:
        return {"rotation": self.quaternion().tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RigidTransform":
        return cls.from_quaternion(doc["rotation"], doc["translation"])

    def __repr__(self):
        return f"RigidTransform(q={np.round(self.quaternion(), 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(_reorthonormalize(a.rotation @ b.rotation), a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation.T, -a.rotation.T @ a.translation)


def _reorthonormalize(rot: np.ndarray) -> np.ndarray:
    # Long composition chains drift; snap back onto SO(3) via polar decomposition.
    if np.abs(rot.T @ rot - np.eye(3)).max() < 1e-12:
        return rot
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians.

    Uses atan2 of the skew and symmetric parts, which stays accurate near zero
    where ``acos((tr - 1) / 2)`` loses half the available digits.
    """
    skew = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(skew)
    cos_theta = 0.5 * (np.trace(rot) - 1.0)
    return float(math.atan2(sin_theta, cos_theta))


def pose_error(a: RigidTransform, b: RigidTransform) -> Tuple[float, float]:
    """(translation error in meters, rotation error in degrees)."""
    trans_err = float(np.linalg.norm(a.translation - b.translation))
    rot_err = math.degrees(rotation_angle(a.rotation.T @ b.rotation))
    return trans_err, rot_err


def look_at(eye: ArrayLike, target: ArrayLike, up: ArrayLike = (0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction is parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(_reorthonormalize(np.column_stack([x, y, z])), eye)


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def pixel_rays(self) -> np.ndarray:
        """World-frame ray directions, one per pixel, scaled so the camera-z component is 1.

        Shape (H, W, 3).  A hit at ray parameter ``t`` therefore has depth ``t``.
        """
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        dirs = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return dirs @ self.pose.rotation.T

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": self.pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        pose = RigidTransform.from_dict(doc["pose"]) if "pose" in doc else RigidTransform.identity()
        return cls(
            float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]),
            int(doc["width"]), int(doc["height"]), pose,
        )


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth with an explicit validity bitmap; invalid entries hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        if values.ndim != 2 or valid.shape != values.shape:
            raise DimensionMismatch("depth values and validity must be matching 2-D arrays")
        valid &= np.isfinite(values) & (values > 0)
        values = np.where(valid, values, 0.0)
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """Build from raw values; anything non-finite or <= 0 becomes invalid."""
        values = np.asarray(values, dtype=float)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def scaled(self, factor: float) -> "DepthMap":
        return DepthMap(self.values * factor, self.valid)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.array(self.labels).reshape(-1)
            if len(labels) != len(pts):
                raise ValueError("labels must have one entry per point")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def select(self, index: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels)

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        return PointCloud(transform.apply(self.points), self.labels)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index pairs (source index, target index) with optional non-negative weights."""

    pairs: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 2)
        if len(np.unique(pairs[:, 0])) != len(pairs):
            raise ValueError("duplicate source indices in correspondence set")
        if (pairs < 0).any():
            raise ValueError("negative correspondence index")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        if self.weights is not None:
            weights = np.array(self.weights, dtype=float).reshape(-1)
            if len(weights) != len(pairs) or (weights < 0).any() or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be finite, non-negative and one per pair")
            weights.setflags(write=False)
            object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.pairs)

    def check_bounds(self, n_src: int, n_dst: int) -> None:
        if len(self.pairs) and (self.pairs[:, 0].max() >= n_src or self.pairs[:, 1].max() >= n_dst):
            raise IndexError("correspondence index out of bounds")

    def subset(self, keep: np.ndarray) -> "CorrespondenceSet":
        weights = None if self.weights is None else self.weights[keep]
        return CorrespondenceSet(self.pairs[keep], weights)


def project(point_cam: ArrayLike, cam: CameraModel) -> Tuple[float, float, float]:
    """Pixel coordinates and depth of a camera-frame point."""
    x, y, z = (float(c) for c in point_cam)
    if not z > 0:
        raise NonPositiveDepth(f"point has depth {z}")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def project_points(points_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorized :func:`project`; returns an (N, 3) array of (u, v, depth)."""
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    if (z <= 0).any():
        raise NonPositiveDepth("points behind the camera")
    return np.column_stack([cam.fx * pts[:, 0] / z + cam.cx, cam.fy * pts[:, 1] / z + cam.cy, z])


def back_project(
    depth: DepthMap,
    cam: CameraModel,
    mask: Optional[np.ndarray] = None,
    labels: Optional[np.ndarray] = None,
) -> PointCloud:
    """Lift valid (and masked-in) pixels to a world-frame point cloud in row-major order.

    ``labels`` is an optional (H, W) map whose entries are attached to the
    surviving points.
    """
    if depth.values.shape != cam.shape:
        raise DimensionMismatch(f"depth is {depth.values.shape}, camera is {cam.shape}")
    keep = depth.valid
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != cam.shape:
            raise DimensionMismatch(f"mask is {mask.shape}, camera is {cam.shape}")
        keep = keep & mask
    v, u = np.nonzero(keep)
    d = depth.values[v, u]
    pts_cam = np.column_stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d])
    out_labels = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != cam.shape:
            raise DimensionMismatch("label map does not match camera")
        out_labels = labels[v, u]
    return PointCloud(cam.pose.apply(pts_cam), out_labels)


def _as_points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float).reshape(-1, 3)


def umeyama_align(
    src: Union[PointCloud, np.ndarray],
    dst: Union[PointCloud, np.ndarray],
    estimate_scale: bool = False,
    weights: Optional[np.ndarray] = None,
) -> Tuple[RigidTransform, float, float]:
    """Least-squares (R, t, c) with dst_i ~ c * R @ src_i + t.

    Returns ``(transform, scale, rmse)``; ``transform`` holds R and t, and the
    rmse is the (weighted) root-mean-square residual of the fitted model.
    """
    x = _as_points(src)
    y = _as_points(dst)
    if len(x) != len(y):
        raise DimensionMismatch("source and destination must be index-aligned")
    if len(x) < 3:
        raise TooFewPoints(f"need at least 3 point pairs, got {len(x)}")
    if weights is None:
        w = np.full(len(x), 1.0 / len(x))
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if len(w) != len(x) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per pair, with positive sum")
        w = w / w.sum()

    mu_x = w @ x
    mu_y = w @ y
    xc = x - mu_x
    yc = y - mu_y
    cov = (yc * w[:, None]).T @ xc
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0 or np.count_nonzero(d >= RANK_RTOL * d[0]) < 2:
        raise DegenerateConfiguration("cross-covariance has rank < 2 (collinear or coincident points)")

    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rot = u @ np.diag(s) @ vt
    if estimate_scale:
        var_x = float(w @ np.einsum("ij,ij->i", xc, xc))
        scale = float(d @ s) / var_x
    else:
        scale = 1.0
    trans = mu_y - scale * rot @ mu_x
    resid = y - (scale * x @ rot.T + trans)
    rmse = math.sqrt(float(w @ np.einsum("ij,ij->i", resid, resid)))
    return RigidTransform(_reorthonormalize(rot), trans), scale, rmse


def write_ply(cloud: PointCloud, path: Union[str, Path]) -> None:
    """ASCII PLY with x y z and, when labels are present, a uchar label."""
    has_labels = cloud.labels is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {cloud.n}", "property float x", "property float y", "property float z"]
    if has_labels:
        lines.append("property uchar label")
    lines.append("end_header")
    for i, p in enumerate(cloud.points):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if has_labels:
            row += f" {int(cloud.labels[i]) & 0xFF}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: Union[str, Path]) -> PointCloud:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    header = text[:end]
    n = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    has_labels = any(line.strip() == "property uchar label" for line in header)
    rows = [line.split() for line in text[end + 1 : end + 1 + n]]
    pts = np.array([[float(r[0]), float(r[1]), float(r[2])] for r in rows]).reshape(-1, 3)
    labels = np.array([int(r[3]) for r in rows]) if has_labels else None
    return PointCloud(pts, labels)


def depth_to_bytes(depth: DepthMap) -> bytes:
    """8-byte header (width, height as u32 LE) then float32 LE row-major; invalid pixels are 0."""
    header = struct.pack("<II", depth.width, depth.height)
    return header + depth.values.astype("<f4").tobytes()


def depth_from_bytes(blob: bytes) -> DepthMap:
    width, height = struct.unpack("<II", blob[:8])
    values = np.frombuffer(blob[8:], dtype="<f4")
    if len(values) != width * height:
        raise DimensionMismatch("depth payload length does not match header")
    return DepthMap.from_array(values.astype(float).reshape(height, width))
