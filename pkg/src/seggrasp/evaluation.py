"""Evaluation protocols: grid success, open-loop replay vs closed loop, recovery probes,
and vision-dataset comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .expert import ExpertPolicy, expert_rollout, run_episode
from .kinematics import gripper_position
from .simenv import Action, SimConfig, perturb_dynamics, reset, step

MASK_SOURCES = ("ground-truth", "vision-net")


@dataclass(frozen=True)
class GridSpec:
    """rows x cols cell centres over the workspace (rows along x, cols along y)."""

    rows: int = 5
    cols: int = 4
    repetitions: int = 3
    step_cap: int = 150

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def positions(self, config: SimConfig) -> np.ndarray:
        (x0, x1), (y0, y1) = config.workspace
        xs = x0 + (np.arange(self.rows) + 0.5) * (x1 - x0) / self.rows
        ys = y0 + (np.arange(self.cols) + 0.5) * (y1 - y0) / self.cols
        return np.array([(x, y) for x in xs for y in ys])

    def trials(self, config):
        """(cell, repetition, position) for every trial, in canonical order."""
        pos = self.positions(config)
        return [(c, r, pos[c]) for r in range(self.repetitions) for c in range(len(pos))]


def trial_episode(cell, rep):
    """Episode index for a grid trial; it seeds the contact-noise stream."""
    return 1_000_000 + rep * 10_000 + cell


@dataclass
class GridResult:
    success_rate: float
    outcomes: np.ndarray  # (cells, repetitions) bool
    steps: np.ndarray  # (cells, repetitions) int
    positions: np.ndarray

    def rows(self):
        for c, pos in enumerate(self.positions):
            for r in range(self.outcomes.shape[1]):
                yield {"cell": c, "x": float(pos[0]), "y": float(pos[1]), "repetition": r,
                       "success": int(self.outcomes[c, r]), "steps": int(self.steps[c, r])}


class ZeroPolicy:
    name = "zero"

    def reset(self):
        pass

    def act(self, state):
        return Action.zero()


def eval_grid(policy, grid: GridSpec, config: SimConfig, chain, mask_source="ground-truth",
              vision_net=None, order=None) -> GridResult:
    """Fraction of (position x repetition) trials that end grasped.

    ``mask_source='vision-net'`` swaps a controller policy's observation for
    the vision net applied to a rendered RGB frame.  ``order`` permutes the
    trial execution order; outcomes do not depend on it.
    """
    if mask_source not in MASK_SOURCES:
        raise ValueError(f"unknown mask source {mask_source!r}")
    if mask_source == "vision-net":
        from .controller import ControllerPolicy
        from .vision import vision_mask_fn

        if vision_net is None or not isinstance(policy, ControllerPolicy):
            raise ValueError("vision-net masks need a controller policy and a vision net")
        policy = ControllerPolicy(policy.net, chain, config, vision_mask_fn(vision_net, chain, config))
    trials = grid.trials(config)
    pos = grid.positions(config)
    outcomes = np.zeros((len(pos), grid.repetitions), bool)
    steps = np.zeros((len(pos), grid.repetitions), int)
    idx = range(len(trials)) if order is None else order
    for i in idx:
        c, r, p = trials[i]
        ep = run_episode(policy, config, chain, p, trial_episode(c, r), grid.step_cap)
        outcomes[c, r] = ep.success
        steps[c, r] = ep.length
    return GridResult(float(outcomes.mean()), outcomes, steps, pos)


@dataclass
class ReplayReport:
    deviation: float  # final gripper distance between nominal and replayed runs (m)
    nominal_success: bool
    replay_success: bool
    nominal_final: np.ndarray
    replay_final: np.ndarray
    replay_states: list = field(repr=False, default_factory=list)


def pad_commands(actions, length=150):
    """Extend a recorded sequence to ``length`` commands by holding still with the last gripper command."""
    actions = list(actions)
    hold = Action.zero(actions[-1].gripper_cmd if actions else -1.0)
    return actions + [hold] * max(0, length - len(actions))


def replay(chain, config: SimConfig, actions, sphere_position, episode=0):
    """Execute a fixed command sequence, ignoring observations; stops at a grasp."""
    state = reset(config, chain, sphere_position, episode)
    states, success = [state], False
    for a in actions:
        if state.step_count >= config.episode_cap:
            break
        out = step(chain, state, a, config)
        state = out.next_state
        states.append(state)
        if out.grasped:
            success = True
            break
    return states, success


def open_loop_replay(chain, nominal: SimConfig, perturbed: SimConfig, sphere_position, episode=0,
                     recorded=None, length=150) -> ReplayReport:
    """Record (or take) a nominal closed-loop command sequence and replay it blind under ``perturbed``."""
    if recorded is None:
        rec = expert_rollout(nominal, chain, sphere_position=sphere_position, episode=episode)
        recorded, nominal_states, nominal_ok = rec.actions, rec.states, rec.success
    else:
        nominal_states, nominal_ok = replay(chain, nominal, recorded, sphere_position, episode)
    commands = pad_commands(recorded, length)
    states, ok = replay(chain, perturbed, commands, sphere_position, episode)
    a = gripper_position(chain, nominal_states[-1].joints)
    b = gripper_position(chain, states[-1].joints)
    return ReplayReport(float(np.linalg.norm(a - b)), nominal_ok, ok, a, b, states)


@dataclass
class RealityGapResult:
    closed_nominal: float
    closed_perturbed: float
    open_nominal: float
    open_perturbed: float
    deviations: np.ndarray

    @property
    def closed_drop(self):
        return self.closed_nominal - self.closed_perturbed

    @property
    def open_drop(self):
        return self.open_nominal - self.open_perturbed


def reality_gap_experiment(chain, config: SimConfig, trials=20, gain_range=(0.9, 1.1), latency=2,
                           policy_factory=None, seed=0) -> RealityGapResult:
    """Paired trials: each sphere position and perturbation is used for both the
    closed-loop policy and the open-loop replay of its nominal commands."""
    policy_factory = policy_factory or (lambda: ExpertPolicy(chain, max_delta=config.max_delta))
    rng = np.random.default_rng([seed, 0x6A9])
    (x0, x1), (y0, y1) = config.workspace
    res = np.zeros((trials, 4), bool)
    devs = np.zeros(trials)
    for t in range(trials):
        pos = (rng.uniform(x0, x1), rng.uniform(y0, y1))
        pert = perturb_dynamics(config, gain_range, latency, seed=seed * 100_000 + t)
        nominal = run_episode(policy_factory(), config, chain, pos, t)
        closed = run_episode(policy_factory(), pert, chain, pos, t)
        rep = open_loop_replay(chain, config, pert, pos, t, recorded=nominal.actions)
        res[t] = nominal.success, closed.success, rep.nominal_success, rep.replay_success
        devs[t] = rep.deviation
    m = res.mean(axis=0)
    return RealityGapResult(m[0], m[1], m[2], m[3], devs)


@dataclass
class RecoveryResult:
    trials: int
    displaced: int
    recovered: int
    mean_extra_steps: float

    @property
    def recovery_rate(self):
        return self.recovered / self.trials if self.trials else 0.0


class DisplaceHook:
    """Shoves the sphere once, the first time the open gripper is low over it mid-descent."""

    def __init__(self, chain, config, rng, distance=(0.03, 0.05), radius=0.015, height=(0.01, 0.05)):
        self.chain, self.config, self.rng = chain, config, rng
        self.distance, self.radius, self.height = distance, radius, height
        self.fired_at = None

    def __call__(self, state):
        if self.fired_at is not None or not state.gripper_open:
            return state
        p = gripper_position(self.chain, state.joints)
        rel = p - state.sphere_pos
        if np.hypot(rel[0], rel[1]) > self.radius or not (self.height[0] <= rel[2] <= self.height[1]):
            return state
        angle = self.rng.uniform(0, 2 * np.pi)
        dist = self.rng.uniform(*self.distance)
        sphere = state.sphere_pos.copy()
        sphere[:2] += dist * np.array([np.cos(angle), np.sin(angle)])
        (bx0, bx1), (by0, by1) = self.config.table_bounds
        sphere[0], sphere[1] = np.clip(sphere[0], bx0, bx1), np.clip(sphere[1], by0, by1)
        self.fired_at = state.step_count
        from dataclasses import replace

        return replace(state, sphere_pos=sphere)


def recovery_probe(policy, config: SimConfig, chain, grid: GridSpec | None = None, seed=0,
                   distance=(0.03, 0.05)) -> RecoveryResult:
    """Displace the sphere mid-descent and count episodes that still end grasped.

    Trials where the policy never reaches the trigger zone count as failures.
    Extra steps are measured against the same trial without displacement.
    """
    grid = grid or GridSpec(5, 4, 1)
    displaced = recovered = 0
    extra = []
    for c, r, p in grid.trials(config):
        ep_id = trial_episode(c, r)
        rng = np.random.default_rng([seed, 0x2EC, c, r])
        hook = DisplaceHook(chain, config, rng, distance)
        ep = run_episode(policy, config, chain, p, ep_id, grid.step_cap, hook=hook)
        if hook.fired_at is None:
            continue
        displaced += 1
        if ep.success:
            recovered += 1
            base = run_episode(policy, config, chain, p, ep_id, grid.step_cap)
            extra.append(ep.length - base.length)
    n = len(grid.trials(config))
    return RecoveryResult(n, displaced, recovered, float(np.mean(extra)) if extra else float("nan"))


def summary_block(title, items: dict) -> str:
    lines = [f"== {title} =="]
    lines += [f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}" for k, v in items.items()]
    return "\n".join(lines) + "\n"


def compare_vision_datasets(kinds, held_out, n_images=500, epochs=40, widths=None, seed=0,
                            eval_every=10, batch=8, log=None, chain=None, config=None, lr=0.001) -> dict:
    """Train an identically initialised vision net per dataset kind and return each metric history."""
    from .datagen import generate_dataset
    from .vision import VisionNet, train_vision

    kinds = list(kinds)
    if len(kinds) < 2:
        raise ValueError("compare at least two dataset kinds")
    table = {}
    for kind in kinds:
        data = generate_dataset(kind, n_images, seed=seed, chain=chain, config=config)
        net = VisionNet(widths=widths, seed=seed)
        _, history = train_vision(net, data, held_out, epochs, eval_every=eval_every, batch=batch,
                                  lr=lr, seed=seed)
        table[kind] = history
        if log:
            log(kind, history)
    return table

