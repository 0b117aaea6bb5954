"""Quasi-static grasping environment.

Joints move in position mode: each step adds the (gain-scaled, optionally
delayed) commanded deltas and clips to joint limits.  There is no inertia.
The sphere only moves when a fingertip touches it; it is then pushed along
the horizontal contact normal.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .kinematics import KinematicChain, forward_kinematics, reference_chain, start_configuration

SPHERE_DIAMETER = 0.0137


@dataclass(frozen=True)
class SimConfig:
    sphere_diameter: float = SPHERE_DIAMETER
    max_delta: float = 0.02
    table_z: float = 0.45
    table_bounds: tuple = ((0.25, 0.95), (-0.45, 0.45))
    workspace: tuple = ((0.40, 0.70), (-0.10, 0.10))
    start_point: tuple = (0.55, 0.0, 0.70)
    capture_radius: float = 0.007
    grasp_height: float = 0.04
    finger_offset: float = 0.024
    tip_radius: float = 0.01
    finger_depth: float = 0.005
    finger_length: float = 0.05
    finger_width: float = 0.02
    finger_thickness: float = 0.002
    push_multiplier: float = 3.0
    contact_noise: float = 0.0
    gains: tuple = (1.0,) * 7
    latency: int = 0
    episode_cap: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.capture_radius <= self.sphere_radius:
            raise ValueError("capture_radius must exceed the sphere radius")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")

    @property
    def sphere_radius(self):
        return self.sphere_diameter / 2

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class Action:
    joint_deltas: np.ndarray
    gripper_cmd: float

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float)
        return Action(v[:7].copy(), float(v[7]))

    @staticmethod
    def zero(gripper_cmd=-1.0):
        return Action(np.zeros(7), gripper_cmd)

    def vector(self):
        return np.append(self.joint_deltas, self.gripper_cmd)


@dataclass(frozen=True)
class EnvState:
    joints: np.ndarray
    gripper_open: bool
    sphere_pos: np.ndarray
    step_count: int = 0
    grasped: bool = False
    pending: tuple = ()
    episode_seed: int = 0


@dataclass(frozen=True)
class TransitionOutcome:
    next_state: EnvState
    grasped: bool
    terminal: bool
    sphere_displaced: bool


class TerminalStateError(RuntimeError):
    pass


def in_workspace(config: SimConfig, xy) -> bool:
    (x0, x1), (y0, y1) = config.workspace
    return x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1


def reset(config: SimConfig, chain: KinematicChain | None = None, sphere_position=None,
          episode: int = 0) -> EnvState:
    """Arm at the start configuration, gripper open, sphere resting on the table.

    Without ``sphere_position`` the sphere is drawn uniformly over the
    workspace from the stream (config.seed, episode).
    """
    chain = chain or reference_chain()
    if sphere_position is None:
        rng = np.random.default_rng([config.seed, 0x5E7, episode])
        (x0, x1), (y0, y1) = config.workspace
        xy = (rng.uniform(x0, x1), rng.uniform(y0, y1))
    else:
        xy = tuple(sphere_position)[:2]
        if not in_workspace(config, xy):
            raise ValueError(f"sphere position {xy} outside workspace {config.workspace}")
    sphere = np.array([xy[0], xy[1], config.table_z + config.sphere_radius])
    return EnvState(start_configuration(chain, config.start_point), True, sphere, 0,
                    episode_seed=episode)


def fingertips(chain, joints, gripper_open, config: SimConfig):
    tool, _ = forward_kinematics(chain, joints)
    p = tool.translation
    if not gripper_open:
        return p, [p]
    y = tool.rotation[:, 1]
    return p, [p + config.finger_offset * y, p - config.finger_offset * y]


@dataclass(frozen=True)
class Box:
    """Oriented box: world centre, rotation (columns = box axes) and half extents."""

    center: np.ndarray
    rotation: np.ndarray
    half: np.ndarray

    def corners(self):
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)])
        return self.center + (signs * self.half) @ self.rotation.T


def gripper_plates(tool_pose, gripper_open: bool, config: SimConfig) -> list:
    """The two finger plates as thin boxes posed from the gripper-midpoint frame.

    Plates run along the approach axis from ``finger_depth`` beyond the
    midpoint back toward the palm; their inner faces sit where the fingertip
    contact spheres end, so an open hand straddles the sphere.
    """
    R, p = tool_pose.rotation, tool_pose.translation
    inner = config.finger_offset - config.tip_radius if gripper_open else 0.0
    along = config.finger_depth - config.finger_length / 2
    half = np.array([config.finger_length / 2, config.finger_thickness / 2, config.finger_width / 2])
    plates = []
    for side in (1, -1):
        local = np.array([along, side * (inner + config.finger_thickness / 2), 0.0])
        plates.append(Box(p + R @ local, R, half))
    return plates


def hand_clears_table(chain, joints, gripper_open, config: SimConfig) -> bool:
    tool = forward_kinematics(chain, joints)[0]
    if tool.translation[2] < config.table_z:
        return False
    return all(plate.corners()[:, 2].min() >= config.table_z
               for plate in gripper_plates(tool, gripper_open, config))


def grasp_check(chain, state: EnvState, config: SimConfig) -> bool:
    """Closed-boundary capture test against the gripper midpoint."""
    p = forward_kinematics(chain, state.joints)[0].translation
    near = np.linalg.norm(state.sphere_pos - p) <= config.capture_radius
    low = config.table_z <= p[2] <= config.table_z + config.grasp_height
    return bool(near and low)


def _contact(sphere, tips, motion, config: SimConfig, rng):
    reach = config.tip_radius + config.sphere_radius
    moved = False
    for tip in tips:
        delta = sphere - tip
        dist = np.linalg.norm(delta)
        if dist >= reach:
            continue
        normal = delta[:2].copy()
        if np.linalg.norm(normal) < 1e-9:
            normal = motion[:2].copy()
        if np.linalg.norm(normal) < 1e-9:
            normal = np.array([1.0, 0.0])
        normal /= np.linalg.norm(normal)
        scale = config.push_multiplier
        if config.contact_noise:
            scale *= 1 + config.contact_noise * rng.uniform(-1, 1)
        sphere = sphere.copy()
        sphere[:2] += normal * (reach - dist) * scale
        moved = True
    if moved:
        (x0, x1), (y0, y1) = config.table_bounds
        sphere[0] = np.clip(sphere[0], x0, x1)
        sphere[1] = np.clip(sphere[1], y0, y1)
        sphere[2] = config.table_z + config.sphere_radius
    return sphere, moved


def step(chain: KinematicChain, state: EnvState, action: Action, config: SimConfig) -> TransitionOutcome:
    """One transition T(s, a) -> s'."""
    if state.grasped or state.step_count >= config.episode_cap:
        raise TerminalStateError("cannot step a terminal state")
    queue = state.pending + (action,)
    if len(queue) > config.latency:
        executed, queue = queue[0], queue[1:]
    else:
        executed = None

    joints = state.joints
    gripper_open = state.gripper_open
    grasped = False
    sphere = state.sphere_pos
    displaced = False
    rng = np.random.default_rng([config.seed, 0xC0, state.episode_seed, state.step_count])
    if executed is not None:
        deltas = np.clip(executed.joint_deltas, -1, 1) * config.max_delta * np.asarray(config.gains)
        p_old = forward_kinematics(chain, joints)[0].translation
        new = np.clip(joints + deltas, chain.lower, chain.upper)
        if hand_clears_table(chain, new, gripper_open, config):  # the table blocks the hand
            joints = new
        p_new = forward_kinematics(chain, joints)[0].translation
        want_open = not executed.gripper_cmd > 0
        if gripper_open and not want_open:
            gripper_open = False
            grasped = grasp_check(chain, dataclasses.replace(state, joints=joints), config)
        elif not gripper_open and want_open:
            gripper_open = True
        if not grasped:
            _, tips = fingertips(chain, joints, gripper_open, config)
            sphere, displaced = _contact(sphere, tips, p_new - p_old, config, rng)
    nxt = EnvState(joints, gripper_open, sphere, state.step_count + 1, grasped, queue,
                   state.episode_seed)
    terminal = grasped or nxt.step_count >= config.episode_cap
    return TransitionOutcome(nxt, grasped, terminal, displaced)


def perturb_dynamics(config: SimConfig, gain_range=(0.9, 1.1), latency=2, seed=None) -> SimConfig:
    """Per-joint gains drawn uniformly from ``gain_range`` plus a fixed command latency."""
    lo, hi = gain_range
    if not (0 < lo <= hi < 2):
        raise ValueError(f"gain range {gain_range} must lie inside (0, 2)")
    if latency < 0:
        raise ValueError("latency must be >= 0")
    rng = np.random.default_rng([config.seed if seed is None else seed, 0x6A1])
    gains = tuple(float(g) for g in rng.uniform(lo, hi, 7)) if hi > lo else (float(lo),) * 7
    return config.replace(gains=gains, latency=int(latency))


def format_trace_line(state: EnvState, action: Action | None, phase: str = "-") -> str:
    """One episode-trace record: step, 7 joints, gripper, sphere xyz, 8 action values, phase."""
    a = action.vector() if action is not None else np.full(8, np.nan)
    fields = [str(state.step_count)]
    fields += [f"{v:.6f}" for v in state.joints]
    fields.append("open" if state.gripper_open else "closed")
    fields += [f"{v:.6f}" for v in state.sphere_pos]
    fields += [f"{v:.6f}" for v in a]
    fields.append(phase)
    return " ".join(fields)


def parse_trace_line(line: str) -> dict:
    parts = line.split()
    return {
        "step": int(parts[0]),
        "joints": np.array([float(v) for v in parts[1:8]]),
        "gripper_open": parts[8] == "open",
        "sphere_pos": np.array([float(v) for v in parts[9:12]]),
        "action": np.array([float(v) for v in parts[12:20]]),
        "phase": parts[20],
    }
