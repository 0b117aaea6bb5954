"""Finite-state-machine expert with privileged access to the sphere position."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kinematics import DOWN, forward_kinematics, jacobian, resolved_rate_step
from .simenv import Action, EnvState, SimConfig, reset, step


class ExpertPhase(enum.Enum):
    APPROACH = "approach"
    DESCEND = "descend"
    CLOSE = "close"


@dataclass
class ExpertContext:
    phase: ExpertPhase = ExpertPhase.APPROACH
    hover_height: float = 0.06
    close_threshold: float = 0.001
    arrive_tolerance: float = 0.005
    recover_distance: float = 0.02
    gain: float = 0.5
    max_delta: float = 0.02
    history: list = field(default_factory=list)

    def reset(self):
        self.phase = ExpertPhase.APPROACH
        self.history.clear()


def _move(chain, q, target, ctx):
    dq = resolved_rate_step(chain, q, target, ctx.max_delta, DOWN, gain=ctx.gain)
    return np.clip(dq / ctx.max_delta, -1, 1)


def _phase_from_geometry(ctx, p, sphere):
    """Descend while the hand is over the sphere and not above the hover point, else approach.

    "Over the sphere" means within ``recover_distance`` of the vertical
    descent line through the gripper midpoint.
    """
    lateral = np.linalg.norm(p[:2] - sphere[:2])
    above = p[2] - sphere[2]
    if lateral <= ctx.recover_distance and above <= ctx.hover_height + ctx.arrive_tolerance:
        return ExpertPhase.DESCEND
    return ExpertPhase.APPROACH


def expert_action(ctx: ExpertContext, state: EnvState, sphere_pos, chain) -> tuple[Action, ExpertPhase]:
    """Approach a point above the sphere, descend onto it, close within the threshold.

    The phase is read off the geometry every step, so the same state always
    gets the same command whatever the history: the hand descends once it is
    at (or below) hover height within ``recover_distance`` of the sphere, and
    a sphere knocked further away than that sends it back to the approach.
    Approaching from above, the first descent step happens within
    ``arrive_tolerance`` of the hover height.  A gripper that closed on
    nothing is reopened.
    """
    sphere = np.asarray(sphere_pos, float)
    p = forward_kinematics(chain, state.joints)[0].translation
    q = state.joints

    if state.grasped:
        ctx.phase = ExpertPhase.CLOSE
        return Action.zero(1.0), ctx.phase

    near = np.linalg.norm(sphere - p) <= ctx.close_threshold
    if near:
        ctx.phase = ExpertPhase.CLOSE
        return Action.zero(1.0), ctx.phase

    ctx.phase = _phase_from_geometry(ctx, p, sphere)
    target = sphere + (0, 0, ctx.hover_height) if ctx.phase is ExpertPhase.APPROACH else sphere
    return Action(_move(chain, q, target, ctx), -1.0), ctx.phase


def _aim(chain, q, target, ctx):
    # position rows only: the hand orientation is left to drift
    p = forward_kinematics(chain, q)[0].translation
    J = jacobian(chain, q)[:3]
    dq = J.T @ np.linalg.solve(J @ J.T + 0.05 ** 2 * np.eye(3), ctx.gain * (target - p))
    peak = np.max(np.abs(dq))
    if peak > ctx.max_delta:
        dq *= ctx.max_delta / peak
    return np.clip(dq / ctx.max_delta, -1, 1)


def elementary_action(ctx: ExpertContext, state: EnvState, sphere_pos, chain) -> tuple[Action, ExpertPhase]:
    """Baseline aiming the gripper midpoint straight at the sphere: no hover point, no orientation hold."""
    sphere = np.asarray(sphere_pos, float)
    p = forward_kinematics(chain, state.joints)[0].translation
    if not state.gripper_open and not state.grasped:
        return Action(_aim(chain, state.joints, sphere, ctx), -1.0), ExpertPhase.DESCEND
    if np.linalg.norm(sphere - p) <= ctx.close_threshold:
        return Action.zero(1.0), ExpertPhase.CLOSE
    return Action(_aim(chain, state.joints, sphere, ctx), -1.0), ExpertPhase.DESCEND


class ExpertPolicy:
    """Policy adapter: reads ground truth from the environment state."""

    name = "expert"

    def __init__(self, chain, elementary=False, **ctx_kwargs):
        self.chain = chain
        self.ctx = ExpertContext(**ctx_kwargs)
        self.rule = elementary_action if elementary else expert_action

    def reset(self):
        self.ctx.reset()

    def act(self, state: EnvState) -> Action:
        action, phase = self.rule(self.ctx, state, state.sphere_pos, self.chain)
        self.ctx.history.append(phase)
        return action


@dataclass
class Episode:
    states: list
    actions: list
    phases: list
    success: bool

    @property
    def length(self):
        return len(self.actions)


def expert_rollout(config: SimConfig, chain, max_steps=None, sphere_position=None, episode=0,
                   elementary=False) -> Episode:
    """Run the expert in closed loop until grasp or the step cap."""
    policy = ExpertPolicy(chain, elementary=elementary, max_delta=config.max_delta)
    return run_episode(policy, config, chain, sphere_position, episode, max_steps)


def run_episode(policy, config: SimConfig, chain, sphere_position=None, episode=0, max_steps=None,
                hook=None) -> Episode:
    """Closed-loop rollout of any object with ``reset()`` and ``act(state)``.

    ``hook(state) -> state`` may rewrite the state before each decision
    (used to displace the sphere in recovery probes).
    """
    cap = min(max_steps or config.episode_cap, config.episode_cap)
    state = reset(config, chain, sphere_position, episode)
    policy.reset()
    states, actions, phases = [state], [], []
    success = False
    while state.step_count < cap:
        if hook is not None:
            state = hook(state)
            states[-1] = state
        action = policy.act(state)
        phase = getattr(policy, "ctx", None)
        phases.append(phase.phase.value if phase is not None else "-")
        out = step(chain, state, action, config)
        actions.append(action)
        state = out.next_state
        states.append(state)
        if out.grasped:
            success = True
            break
        if out.terminal:
            break
    return Episode(states, actions, phases, success)
