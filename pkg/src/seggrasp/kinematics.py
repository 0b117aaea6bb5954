"""Forward kinematics, geometric Jacobian and resolved-rate stepping for a 7-DOF arm.

Frames follow the usual convention: a 4x4 homogeneous transform maps child
coordinates into parent coordinates.  The tool frame sits at the gripper
midpoint with x along the approach direction and y along the finger-opening
axis.  The camera frame is an optical frame (z forward, x right, y down).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = ("s0", "s1", "e0", "e1", "w0", "w1", "w2")


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def from_matrix(T):
        return Pose(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def transform(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


def translation(x, y, z):
    T = np.eye(4)
    T[:3, 3] = (x, y, z)
    return T


def axis_angle(axis, angle):
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def homogeneous(R, t=(0, 0, 0)):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


@dataclass
class KinematicChain:
    """Serial chain of revolute joints.

    ``origins[i]`` is the fixed transform from joint i-1's frame (or the base
    for i=0) to joint i before its rotation; ``axes[i]`` is the rotation axis
    in joint i's frame.
    """

    base: np.ndarray
    origins: list
    axes: list
    tool: np.ndarray
    camera: np.ndarray
    lower: np.ndarray = field(default_factory=lambda: np.full(7, -np.pi))
    upper: np.ndarray = field(default_factory=lambda: np.full(7, np.pi))

    def __post_init__(self):
        if len(self.origins) != 7 or len(self.axes) != 7:
            raise ValueError("chain must have exactly 7 joints")
        self.axes = [np.asarray(a, float) / np.linalg.norm(a) for a in self.axes]
        self.lower = np.asarray(self.lower, float)
        self.upper = np.asarray(self.upper, float)
        for T in [self.base, self.tool, self.camera, *self.origins]:
            R = T[:3, :3]
            if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
                raise ValueError("chain transforms must be rigid")

    def joint_frames(self, q):
        """World transforms of each joint frame (before its own rotation) and of the last link."""
        T = self.base.copy()
        frames = []
        for origin, axis, angle in zip(self.origins, self.axes, q):
            T = T @ origin
            frames.append(T.copy())  # frame before rotation: axis/position of the joint
            T = T @ homogeneous(axis_angle(axis, angle))
        return frames, T


def reference_chain(camera_back=0.05, camera_up=0.03) -> KinematicChain:
    """Anthropomorphic 7-DOF layout stretched along +x at zero joint angles.

    Link lengths 0.27, 0.07, 0.36, 0.07, 0.37, 0.10, 0.08 m; base 0.6 m above
    the floor.  Axes alternate z, y, x, y, x, y, x.
    """
    base = translation(0, 0, 0.6)
    z, y, x = (0, 0, 1), (0, 1, 0), (1, 0, 0)
    origins = [
        np.eye(4),
        translation(0, 0, 0.27),
        translation(0.07, 0, 0),
        translation(0.36, 0, 0),
        translation(0.07, 0, 0),
        translation(0.37, 0, 0),
        translation(0.10, 0, 0),
    ]
    axes = [z, y, x, y, x, y, x]
    tool = translation(0.08, 0, 0)
    # Optical frame: z along approach (tool x), x along fingers (tool y), y = z cross x.
    R_cam = np.column_stack([(0, 1, 0), (0, 0, 1), (1, 0, 0)]).astype(float)
    # "behind" is back along the approach axis, "above" is the hand's up side (-tool z),
    # so the target stays in view until the fingers close
    camera = tool @ homogeneous(R_cam, (-camera_back, 0, -camera_up))
    lower = np.array([-1.7, -2.2, -np.pi, -0.1, -np.pi, -2.2, -np.pi])
    upper = np.array([1.7, 1.2, np.pi, 2.6, np.pi, 2.2, np.pi])
    return KinematicChain(base, origins, axes, tool, camera, lower, upper)


def forward_kinematics(chain: KinematicChain, q) -> tuple[Pose, Pose]:
    """Gripper-midpoint pose and camera pose for joint angles ``q``."""
    _, T = chain.joint_frames(q)
    return Pose.from_matrix(T @ chain.tool), Pose.from_matrix(T @ chain.camera)


def gripper_position(chain, q):
    return forward_kinematics(chain, q)[0].translation


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """6x7 geometric Jacobian of the gripper midpoint (linear rows first)."""
    frames, T = chain.joint_frames(q)
    p_ee = (T @ chain.tool)[:3, 3]
    J = np.zeros((6, 7))
    for i, (F, axis) in enumerate(zip(frames, chain.axes)):
        zi = F[:3, :3] @ axis
        J[:3, i] = np.cross(zi, p_ee - F[:3, 3])
        J[3:, i] = zi
    return J


def orientation_error(R_current, R_target):
    """Small-angle rotation vector taking R_current towards R_target."""
    return 0.5 * sum(np.cross(R_current[:, i], R_target[:, i]) for i in range(3))


def resolved_rate_step(chain, q, target_point, max_step, target_rotation=None,
                       gain=1.0, damping=0.05):
    """Damped least-squares joint step moving the gripper midpoint toward a point.

    The Cartesian request is ``gain * (target - p)``; with ``target_rotation``
    the angular rows ask for that orientation, otherwise for no rotation.  The
    joint step is scaled down uniformly so no component exceeds ``max_step``.
    """
    tool, _ = forward_kinematics(chain, q)
    v = np.zeros(6)
    v[:3] = gain * (np.asarray(target_point, float) - tool.translation)
    if target_rotation is not None:
        v[3:] = gain * orientation_error(tool.rotation, target_rotation)
    if not np.any(v):
        return np.zeros(7)
    J = jacobian(chain, q)
    dq = J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(6), v)
    peak = np.max(np.abs(dq))
    if peak > max_step:
        dq *= max_step / peak
    return dq


# Gripper pointing straight down, fingers opening along world y.
DOWN = np.column_stack([(0, 0, -1), (0, 1, 0), (1, 0, 0)]).astype(float)


def solve_pose(chain, target_point, target_rotation, q0, iters=500, tol=1e-10):
    """Iterate resolved-rate steps to a full 6-D pose (used for start configurations)."""
    q = np.array(q0, float)
    for _ in range(iters):
        dq = resolved_rate_step(chain, q, target_point, 0.2, target_rotation, damping=0.01)
        q += dq
        if np.max(np.abs(dq)) < tol:
            break
    return q


def start_configuration(chain: KinematicChain, point=(0.55, 0.0, 0.70)) -> np.ndarray:
    """Joint angles placing the gripper at ``point`` pointing down (memoised per chain)."""
    cache = chain.__dict__.setdefault("_start_cache", {})
    key = tuple(float(v) for v in point)
    if key not in cache:
        cache[key] = solve_pose(chain, np.asarray(key), DOWN, (0, -0.4, 0, 1.4, 0, 0.6, 0))
    return cache[key].copy()
