"""6-DOF camera motion arithmetic.

Camera frame: +x right, +y up, +z forward into the scene. A motion is
applied intrinsically as yaw (about +y, positive turns right), then pitch
(about +x, positive tilts up), then roll (about +z, positive is clockwise
as seen by the camera). Translations are expressed in the source camera
frame, in meters; angles are in degrees.

The matrix form of a motion is ``T = [R | t]`` where the columns of ``R``
are the moved camera's axes expressed in the source camera frame and
``t = (dx, dy, dz)``. Composition is ``T_a @ T_b``: perform ``a``, then
``b`` relative to where ``a`` left the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

ORTHONORMAL_TOL = 1e-9
GIMBAL_TOL_DEG = 1e-6
_EYE3 = np.eye(3)


class InvalidMotion(ValueError):
    """A motion field is NaN or infinite."""


class InvalidTransform(ValueError):
    """A rotation matrix is not a proper orthonormal matrix."""


class GimbalLock(ValueError):
    """Pitch is at +-90 degrees, so yaw and roll are not separable.

    ``motion`` holds the conventional resolution: roll set to zero and the
    residual folded into yaw. It reproduces the input transform exactly.
    """

    def __init__(self, motion: CameraMotion, pair_id: str | None = None):
        self.motion = motion
        self.pair_id = pair_id
        where = f" (pair {pair_id})" if pair_id else ""
        super().__init__(f"gimbal lock at pitch={motion.pitch:+.6f} deg{where}")


def wrap_angle(deg: float) -> float:
    """Wrap an angle in degrees into (-180, 180]."""
    if -180.0 < deg <= 180.0:
        return deg + 0.0
    # fmod is exact; only the single +-360 shift can round
    wrapped = math.fmod(deg, 360.0)
    if wrapped <= -180.0:
        wrapped += 360.0
    elif wrapped > 180.0:
        wrapped -= 360.0
    return 180.0 if wrapped == -180.0 else wrapped + 0.0


@dataclass(frozen=True)
class CameraMotion:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        for name in _MOTION_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (int, float, np.floating, np.integer)) or isinstance(value, bool):
                raise InvalidMotion(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value):
                raise InvalidMotion(f"{name} is not finite: {value!r}")
            object.__setattr__(self, name, float(value))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def angles(self) -> tuple[float, float, float]:
        return (self.yaw, self.pitch, self.roll)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> CameraMotion:
        return cls(**{f.name: data.get(f.name, 0.0) for f in fields(cls)})

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(abs(v) <= tol for v in self.as_dict().values())


_MOTION_FIELDS = tuple(f.name for f in fields(CameraMotion))
IDENTITY = CameraMotion()


@dataclass(frozen=True, eq=False)
class PoseTransform:
    """Rigid transform with an orthonormal, determinant +1 rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidTransform("transform contains non-finite entries")
        if np.max(np.abs(R.T @ R - _EYE3)) > ORTHONORMAL_TOL:
            raise InvalidTransform("rotation is not orthonormal")
        if abs(_det3(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidTransform("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def _trusted(cls, R: np.ndarray, t: np.ndarray) -> PoseTransform:
        # for rotations built here from angles, products or transposes; skips validation
        obj = object.__new__(cls)
        R = np.array(R, dtype=np.float64)
        t = np.array(t, dtype=np.float64)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(obj, "rotation", R)
        object.__setattr__(obj, "translation", t)
        return obj

    @classmethod
    def identity(cls) -> PoseTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> PoseTransform:
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape == (16,):
            M = M.reshape(4, 4)
        if M.shape not in ((4, 4), (3, 4)):
            raise InvalidTransform(f"expected a 4x4 or 3x4 matrix, got shape {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: PoseTransform) -> PoseTransform:
        return PoseTransform._trusted(
            _reorthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> PoseTransform:
        Rt = self.rotation.T
        return PoseTransform._trusted(Rt, -Rt @ self.translation)

    def allclose(self, other: PoseTransform, tol: float = 1e-9) -> bool:
        return bool(
            np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )


def _det3(R: np.ndarray) -> float:
    (a, b, c), (d, e, f), (g, h, i) = R.tolist()
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    # products of many rotations drift; project back onto SO(3)
    if np.max(np.abs(R.T @ R - _EYE3)) <= 1e-12:
        return R
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    # tilt-up and clockwise roll are negative right-hand rotations about +x / +z
    return _rot_y(yaw) @ _rot_x(-pitch) @ _rot_z(-roll)


def normalize(m: CameraMotion) -> CameraMotion:
    """Wrap yaw, pitch and roll into (-180, 180]; translations are untouched."""
    if not isinstance(m, CameraMotion):
        raise InvalidMotion(f"expected CameraMotion, got {type(m).__name__}")
    return replace(m, yaw=wrap_angle(m.yaw), pitch=wrap_angle(m.pitch), roll=wrap_angle(m.roll))


def to_transform(m: CameraMotion) -> PoseTransform:
    return PoseTransform._trusted(rotation_matrix(m.yaw, m.pitch, m.roll), m.translation)


def _decompose(t: PoseTransform) -> tuple[CameraMotion, bool]:
    R = t.rotation
    dx, dy, dz = (float(v) for v in t.translation)
    # R[1,2] = sin(pitch); hypot keeps precision near +-90
    pitch = math.degrees(math.atan2(R[1, 2], math.hypot(R[1, 0], R[1, 1])))
    if abs(abs(pitch) - 90.0) < GIMBAL_TOL_DEG:
        pitch = math.copysign(90.0, pitch)
        # with roll pinned to zero only yaw -/+ roll is observable
        yaw = math.degrees(math.atan2(-math.copysign(1.0, pitch) * R[0, 1], R[0, 0]))
        return normalize(CameraMotion(dx, dy, dz, yaw, pitch, 0.0)), True
    yaw = math.degrees(math.atan2(R[0, 2], R[2, 2]))
    roll = -math.degrees(math.atan2(R[1, 0], R[1, 1]))
    return normalize(CameraMotion(dx, dy, dz, yaw, pitch, roll)), False


def from_transform(t: PoseTransform, pair_id: str | None = None) -> CameraMotion:
    """Recover the motion of a transform. Raises GimbalLock at |pitch| = 90."""
    motion, locked = _decompose(t)
    if locked:
        raise GimbalLock(motion, pair_id=pair_id)
    return motion


def from_transform_resolved(t: PoseTransform) -> CameraMotion:
    """Like from_transform, but returns the folded motion instead of raising."""
    return _decompose(t)[0]


def compose(a: CameraMotion, b: CameraMotion) -> CameraMotion:
    return from_transform_resolved(to_transform(a) @ to_transform(b))


def invert(m: CameraMotion) -> CameraMotion:
    return from_transform_resolved(to_transform(m).inverse())


def motion_allclose(a: CameraMotion, b: CameraMotion, tol: float = 1e-9) -> bool:
    """Field-wise comparison, with angles compared modulo 360."""
    if max(abs(a.dx - b.dx), abs(a.dy - b.dy), abs(a.dz - b.dz)) > tol:
        return False
    return all(abs(wrap_angle(x - y)) <= tol for x, y in zip(a.angles, b.angles))
