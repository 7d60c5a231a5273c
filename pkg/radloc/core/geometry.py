"""
SE(3) poses, quaternions, the pinhole camera and pose statistics.

Conventions: right-handed frames, the camera looks along its local -z axis with
+x right and +y up. A Pose maps camera coordinates to world coordinates.
Quaternions are stored w-first and canonicalized to w >= 0.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.spatial.transform import Rotation

from radloc.errors import PreconditionError

FloatArray = npt.NDArray[np.float64]
Vec3 = FloatArray
ArrayLike3 = Union[Sequence[float], FloatArray]

# Reorders between w-first (ours) and scalar-last (scipy) layouts.
_WXYZ_TO_XYZW = [1, 2, 3, 0]
_XYZW_TO_WXYZ = [3, 0, 1, 2]


def as_vec3(v: ArrayLike3) -> Vec3:
    """
    Validate and copy a 3-vector.
    :param v: Any length-3 sequence of finite reals.
    :raises PreconditionError: If the shape is wrong or a component is not finite.
    :return: Read-only float64 array of shape (3,).
    """
    arr = np.array(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise PreconditionError(f"expected 3 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"vector components must be finite: {arr}")
    arr.flags.writeable = False
    return arr


def canonicalize_quats(quats: FloatArray) -> FloatArray:
    """
    Normalize w-first quaternions row-wise and flip them into the w >= 0 hemisphere.
    :param quats: (n,4) array.
    :return: New (n,4) array.
    """
    q = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    q = q / norms
    return np.where(q[..., :1] < 0.0, -q, q)


def quats_to_rotation(quats: FloatArray) -> Rotation:
    """
    :param quats: (n,4) or (4,) w-first quaternions.
    :return: scipy Rotation.
    """
    q = np.asarray(quats, dtype=np.float64)
    return Rotation.from_quat(q[..., _WXYZ_TO_XYZW])


def rotation_to_quats(rot: Rotation) -> FloatArray:
    """
    :param rot: scipy Rotation (single or stacked).
    :return: Canonical w-first quaternions.
    """
    return canonicalize_quats(rot.as_quat()[..., _XYZW_TO_WXYZ])


@dataclass(frozen=True)
class UnitQuaternion:
    """
    Rotation as a unit quaternion. Components are normalized and moved to the
    w >= 0 hemisphere on construction.
    """

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        comps = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        norm = float(np.linalg.norm(comps))
        if not np.all(np.isfinite(comps)) or norm == 0.0:
            raise PreconditionError(f"invalid quaternion components: {comps}")
        if abs(norm - 1.0) > 0.0:
            comps = comps / norm
        if comps[0] < 0.0:
            comps = -comps
        for name, value in zip("wxyz", comps):
            object.__setattr__(self, name, float(value))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, wxyz: Sequence[float]) -> "UnitQuaternion":
        w, x, y, z = (float(c) for c in wxyz)
        return cls(w, x, y, z)

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike3) -> "UnitQuaternion":
        """
        Exponential map from an axis-angle vector (radians).
        """
        return cls.from_array(rotation_to_quats(Rotation.from_rotvec(np.array(as_vec3(rotvec)))))

    @classmethod
    def from_matrix(cls, matrix: FloatArray) -> "UnitQuaternion":
        return cls.from_array(rotation_to_quats(Rotation.from_matrix(matrix)))

    def as_array(self) -> FloatArray:
        """
        :return: (4,) w-first array.
        """
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def to_rotation(self) -> Rotation:
        return quats_to_rotation(self.as_array())

    def as_matrix(self) -> FloatArray:
        return self.to_rotation().as_matrix()

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        """
        Hamilton product self * other (other is applied first).
        """
        return UnitQuaternion.from_array(
            rotation_to_quats(self.to_rotation() * other.to_rotation())
        )

    def inverse(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def rotate(self, v: ArrayLike3) -> Vec3:
        return as_vec3(self.to_rotation().apply(as_vec3(v)))

    def angle_to(self, other: "UnitQuaternion") -> float:
        """
        Geodesic angle between two rotations, in radians, in [0, pi].
        """
        return float((self.to_rotation().inv() * other.to_rotation()).magnitude())


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform from the camera frame to the world frame.
    """

    translation: Vec3
    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", as_vec3(self.translation))
        if not isinstance(self.rotation, UnitQuaternion):
            object.__setattr__(
                self, "rotation", UnitQuaternion.from_array(self.rotation)
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.translation, other.translation)
            and self.rotation == other.rotation
        )

    def __repr__(self) -> str:
        return f"Pose({format_pose(self)})"

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), UnitQuaternion.identity())

    @classmethod
    def from_matrix(cls, matrix: FloatArray) -> "Pose":
        """
        :param matrix: 4x4 (or 3x4) camera-to-world matrix.
        """
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, 3], UnitQuaternion.from_matrix(m[:3, :3]))

    def as_matrix(self) -> FloatArray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def rotation_matrix(self) -> FloatArray:
        return self.rotation.as_matrix()

    def compose(self, other: "Pose") -> "Pose":
        """
        self * other: apply other, then self.
        """
        return Pose(
            self.rotation.rotate(other.translation) + self.translation,
            self.rotation.multiply(other.rotation),
        )

    def inverse(self) -> "Pose":
        inv_rot = self.rotation.inverse()
        return Pose(-inv_rot.rotate(self.translation), inv_rot)

    def transform_point(self, point: ArrayLike3) -> Vec3:
        return self.rotation.rotate(point) + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """
    Pinhole intrinsics. Pixel (u, v) has its center at image position (u, v);
    v grows downward.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise PreconditionError(
                f"raster must be at least 1x1, got {self.width}x{self.height}"
            )
        if not (self.fx > 0 and self.fy > 0):
            raise PreconditionError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise PreconditionError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        """
        Square pixels, centered principal point, horizontal field of view in degrees.
        """
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2.0)
        return cls(width, height, f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    @classmethod
    def parse(cls, text: str) -> "CameraIntrinsics":
        """
        Parse the CLI form `WxH:fx,fy,cx,cy`.
        :raises PreconditionError: On malformed text.
        """
        try:
            size, params = text.strip().split(":")
            w, h = (int(s) for s in size.lower().split("x"))
            fx, fy, cx, cy = (float(s) for s in params.split(","))
        except ValueError as exc:
            raise PreconditionError(
                f"intrinsics must look like WxH:fx,fy,cx,cy, got {text!r}"
            ) from exc
        return cls(w, h, fx, fy, cx, cy)

    def format(self) -> str:
        return f"{self.width}x{self.height}:{self.fx!r},{self.fy!r},{self.cx!r},{self.cy!r}"

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def all_coords(self) -> npt.NDArray[np.int64]:
        """
        :return: (h*w, 2) integer (u, v) coordinates in row-major order.
        """
        vv, uu = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: Vec3
    direction: Vec3

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", as_vec3(self.origin))
        d = as_vec3(self.direction)
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            raise PreconditionError("ray direction must be nonzero")
        if abs(norm - 1.0) > 1e-12:
            d = as_vec3(d / norm)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> Vec3:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class PoseError:
    """
    Translation error in meters, rotation error in degrees.
    """

    translation_err: float
    rotation_err: float


def _check_coords(intr: CameraIntrinsics, coords: FloatArray) -> None:
    u, v = coords[:, 0], coords[:, 1]
    bad = (u < 0) | (u > intr.width - 1) | (v < 0) | (v > intr.height - 1)
    if np.any(bad):
        first = coords[int(np.argmax(bad))]
        raise PreconditionError(
            f"pixel ({first[0]}, {first[1]}) outside {intr.width}x{intr.height} raster"
        )


def rays_for_pixels(
    intr: CameraIntrinsics,
    pose: Pose,
    coords: npt.ArrayLike,
    jitter: Optional[npt.ArrayLike] = None,
) -> Tuple[FloatArray, FloatArray]:
    """
    World-space rays through many pixels.
    :param intr: Camera intrinsics.
    :param pose: Camera-to-world pose.
    :param coords: (n,2) pixel coordinates (u, v).
    :param jitter: Optional (n,2) offsets in [0,1); the sample point becomes
        (u + ju - 0.5, v + jv - 0.5), covering the pixel footprint.
    :raises PreconditionError: If a coordinate lies outside the raster or jitter is out of range.
    :return: origins (n,3), unit directions (n,3).
    """
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    _check_coords(intr, c)
    if jitter is not None:
        j = np.asarray(jitter, dtype=np.float64).reshape(-1, 2)
        if np.any((j < 0.0) | (j >= 1.0)):
            raise PreconditionError("jitter components must lie in [0, 1)")
        c = c + j - 0.5
    dirs_cam = np.stack(
        [
            (c[:, 0] - intr.cx) / intr.fx,
            -(c[:, 1] - intr.cy) / intr.fy,
            -np.ones(len(c)),
        ],
        axis=1,
    )
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs = dirs_cam @ pose.rotation_matrix().T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def ray_for_pixel(
    intr: CameraIntrinsics,
    pose: Pose,
    px: Tuple[float, float],
    jitter: Optional[Tuple[float, float]] = None,
) -> Ray:
    """
    The world-space ray through one (possibly jittered) pixel center.
    :param intr: Camera intrinsics.
    :param pose: Camera-to-world pose.
    :param px: Pixel coordinate (u, v).
    :param jitter: Optional sub-pixel offset in [0,1)^2.
    :raises PreconditionError: If px is outside the raster.
    :return: Ray with unit direction.
    """
    origins, dirs = rays_for_pixels(
        intr, pose, [px], None if jitter is None else [jitter]
    )
    return Ray(origins[0], dirs[0])


def project_point(
    intr: CameraIntrinsics, pose: Pose, point: ArrayLike3
) -> Tuple[float, float]:
    """
    Forward pinhole projection of a world point to continuous pixel coordinates.
    :raises PreconditionError: If the point is not in front of the camera.
    """
    p_cam = pose.rotation.inverse().rotate(as_vec3(point) - pose.translation)
    depth = -p_cam[2]
    if depth <= 0.0:
        raise PreconditionError("point is behind the camera")
    u = intr.cx + intr.fx * p_cam[0] / depth
    v = intr.cy - intr.fy * p_cam[1] / depth
    return float(u), float(v)


def _check_nonnegative(**values: float) -> None:
    for name, value in values.items():
        if not value >= 0.0:
            raise PreconditionError(f"{name} must be >= 0, got {value}")


def perturb_poses(
    translations: FloatArray,
    quats: FloatArray,
    sigma_t: float,
    sigma_r: float,
    rng: np.random.Generator,
) -> Tuple[FloatArray, FloatArray]:
    """
    Gaussian diffusion of many poses at once.

    Translation gets iid N(0, sigma_t) per axis; rotation is right-multiplied by
    exp of an iid N(0, sigma_r) axis-angle vector (noise in the camera frame).
    Noise is always drawn, so the random stream layout does not depend on the sigmas.
    :param translations: (n,3).
    :param quats: (n,4) w-first.
    :param sigma_t: Translation std, meters.
    :param sigma_r: Rotation std per axis, radians.
    :param rng: Random source.
    :return: New (translations, quats).
    """
    _check_nonnegative(sigma_t=sigma_t, sigma_r=sigma_r)
    t = np.asarray(translations, dtype=np.float64)
    q = np.asarray(quats, dtype=np.float64)
    n = t.shape[0]
    dt = rng.standard_normal((n, 3))
    dr = rng.standard_normal((n, 3))
    new_t = t + sigma_t * dt
    if sigma_r == 0.0:
        return new_t, q.copy()
    rot = quats_to_rotation(q) * Rotation.from_rotvec(sigma_r * dr)
    return new_t, rotation_to_quats(rot)


def perturb_pose(
    p: Pose, sigma_t: float, sigma_r: float, rng: np.random.Generator
) -> Pose:
    """
    Single-pose form of perturb_poses.
    :raises PreconditionError: On negative sigma.
    """
    t, q = perturb_poses(
        p.translation[None, :], p.rotation.as_array()[None, :], sigma_t, sigma_r, rng
    )
    if sigma_r == 0.0:
        return Pose(t[0], p.rotation)
    return Pose(t[0], UnitQuaternion.from_array(q[0]))


def _unit_vectors(rng: np.random.Generator, n: int) -> FloatArray:
    g = rng.standard_normal((n, 3))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return g / norms


def sample_poses_in_ball(
    center_t: FloatArray,
    center_q: FloatArray,
    radius_t: float,
    radius_r: float,
    rng: np.random.Generator,
) -> Tuple[FloatArray, FloatArray]:
    """
    Uniform samples in a pose ball around each of n centers.

    Translation is uniform in the solid ball of radius radius_t; rotation is the
    center rotation composed with a rotation by an angle uniform in [0, radius_r]
    about a uniformly random axis.
    :param center_t: (n,3) center translations.
    :param center_q: (n,4) center quaternions, w-first.
    :param radius_t: Meters.
    :param radius_r: Radians.
    :param rng: Random source.
    :return: (translations, quats), one sample per center.
    """
    _check_nonnegative(radius_t=radius_t, radius_r=radius_r)
    ct = np.asarray(center_t, dtype=np.float64)
    cq = np.asarray(center_q, dtype=np.float64)
    n = ct.shape[0]
    directions = _unit_vectors(rng, n)
    radii = radius_t * np.cbrt(rng.random(n))
    axes = _unit_vectors(rng, n)
    angles = radius_r * rng.random(n)
    t = ct + directions * radii[:, None]
    if radius_r == 0.0:
        return t, cq.copy()
    rot = quats_to_rotation(cq) * Rotation.from_rotvec(axes * angles[:, None])
    return t, rotation_to_quats(rot)


def sample_pose_in_ball(
    center: Pose, radius_t: float, radius_r: float, rng: np.random.Generator
) -> Pose:
    """
    Single-pose form of sample_poses_in_ball.
    :raises PreconditionError: On negative radii.
    """
    t, q = sample_poses_in_ball(
        center.translation[None, :],
        center.rotation.as_array()[None, :],
        radius_t,
        radius_r,
        rng,
    )
    if radius_r == 0.0:
        return Pose(t[0], center.rotation)
    return Pose(t[0], UnitQuaternion.from_array(q[0]))


def weighted_mean_arrays(
    translations: FloatArray, quats: FloatArray, weights: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """
    Weighted mean of poses given as arrays.

    Quaternions are sign-aligned with the highest-weight one, averaged and
    renormalized. Adequate for tight clusters; not the eigenvector method.
    :raises PreconditionError: On empty input, mismatched lengths, negative
        weights or a zero weight sum.
    :return: (translation (3,), quaternion (4,)).
    """
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(t) == 0:
        raise PreconditionError("cannot average an empty pose list")
    if not (len(t) == len(q) == len(w)):
        raise PreconditionError(
            f"poses and weights differ in length: {len(t)} vs {len(w)}"
        )
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise PreconditionError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise PreconditionError("weight sum must be positive")
    mean_t = (w[:, None] * t).sum(axis=0) / total
    ref = q[int(np.argmax(w))]
    signs = np.where(q @ ref < 0.0, -1.0, 1.0)
    acc = ((w * signs)[:, None] * q).sum(axis=0)
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        raise PreconditionError("quaternion mean is undefined for these weights")
    return mean_t, canonicalize_quats(acc / norm)


def weighted_mean_pose(poses: Sequence[Pose], weights: Sequence[float]) -> Pose:
    """
    Weighted average of poses (arithmetic mean translation, sign-aligned
    quaternion mean rotation).
    :raises PreconditionError: See weighted_mean_arrays.
    """
    if len(poses) == 0:
        raise PreconditionError("cannot average an empty pose list")
    t = np.stack([p.translation for p in poses])
    q = np.stack([p.rotation.as_array() for p in poses])
    mean_t, mean_q = weighted_mean_arrays(t, q, np.asarray(weights, dtype=np.float64))
    return Pose(mean_t, UnitQuaternion.from_array(mean_q))


def rotation_errors_deg(quats_a: FloatArray, quats_b: FloatArray) -> FloatArray:
    """
    Row-wise geodesic angle in degrees between two quaternion arrays.
    """
    rel = quats_to_rotation(quats_a).inv() * quats_to_rotation(quats_b)
    return np.minimum(np.degrees(rel.magnitude()), 180.0)


def pose_error(a: Pose, b: Pose) -> PoseError:
    """
    Euclidean translation distance (m) and geodesic rotation angle (deg).
    The angle equals 2*acos(|<qa,qb>|), evaluated in a numerically stable form.
    """
    t_err = float(np.linalg.norm(a.translation - b.translation))
    r_err = min(math.degrees(a.rotation.angle_to(b.rotation)), 180.0)
    return PoseError(translation_err=t_err, rotation_err=r_err)


def look_at(
    eye: ArrayLike3, target: ArrayLike3, up: ArrayLike3 = (0.0, 0.0, 1.0)
) -> Pose:
    """
    Camera pose at eye looking toward target (camera -z points at target).
    :raises PreconditionError: If eye == target or the view is parallel to up.
    """
    eye_v, target_v, up_v = as_vec3(eye), as_vec3(target), as_vec3(up)
    forward = target_v - eye_v
    if np.linalg.norm(forward) == 0.0:
        raise PreconditionError("eye and target coincide")
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up_v)
    if np.linalg.norm(right) < 1e-12:
        raise PreconditionError("view direction is parallel to the up vector")
    right = right / np.linalg.norm(right)
    back = -forward
    cam_up = np.cross(back, right)
    matrix = np.eye(4)
    matrix[:3, 0] = right
    matrix[:3, 1] = cam_up
    matrix[:3, 2] = back
    matrix[:3, 3] = eye_v
    return Pose.from_matrix(matrix)


def orbit_poses(
    center: ArrayLike3, radius: float, count: int, height: float = 0.0
) -> List[Pose]:
    """
    count cameras evenly spaced on a horizontal circle, all looking at center.
    """
    c = as_vec3(center)
    poses = []
    for k in range(count):
        theta = 2.0 * math.pi * k / count
        eye = c + np.array([radius * math.cos(theta), radius * math.sin(theta), height])
        poses.append(look_at(eye, c))
    return poses


def parse_pose(text: str) -> Pose:
    """
    Parse `tx ty tz qw qx qy qz`.
    :raises PreconditionError: On a wrong token count or non-numeric token.
    """
    tokens = text.split()
    if len(tokens) != 7:
        raise PreconditionError(
            f"pose needs 7 values 'tx ty tz qw qx qy qz', got {len(tokens)}"
        )
    try:
        values = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise PreconditionError(f"non-numeric pose value in {text!r}") from exc
    return Pose(values[:3], UnitQuaternion.from_array(values[3:]))


def format_pose(pose: Pose) -> str:
    values = list(pose.translation) + list(pose.rotation.as_array())
    return " ".join(repr(float(v)) for v in values)


def read_poses(path: Union[str, Path]) -> List[Pose]:
    """
    Read one pose per line; blank and `#` lines are skipped.
    :raises PreconditionError: Naming the file and line of a malformed pose.
    """
    poses: List[Pose] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                poses.append(parse_pose(stripped))
            except PreconditionError as exc:
                raise PreconditionError(f"{path}:{lineno}: {exc}") from exc
    return poses


def write_poses(
    path: Union[str, Path], poses: Iterable[Pose], header: Optional[str] = None
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for pose in poses:
            f.write(format_pose(pose) + "\n")
