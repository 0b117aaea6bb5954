"""DAGGER: roll out the current policy, relabel every visited state with the expert, retrain."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerNet, controller_forward, imitation_loss, state_vector
from .expert import ExpertPolicy
from .render import mask_observation
from .simenv import Action, SimConfig, reset, step
from .tensor import DTYPE, Adam, AdamState, FormatError, adam_step, sigmoid

DATASET_MAGIC = b"GDAG"
DATASET_VERSION = 1


class AggDataset:
    """Append-only (mask, state vector, expert action) store tagged by iteration."""

    def __init__(self):
        self._masks, self._states, self._actions, self._iters = [], [], [], []
        self._cache = None

    def __len__(self):
        return sum(len(a) for a in self._iters)

    def append(self, masks, states, actions, iteration):
        masks = np.asarray(masks, np.uint8)
        if len(masks) == 0:
            return
        if self._iters and iteration < self._iters[-1][-1]:
            raise ValueError("iteration tags must be non-decreasing")
        self._masks.append(masks)
        self._states.append(np.asarray(states, DTYPE))
        self._actions.append(np.asarray(actions, DTYPE))
        self._iters.append(np.full(len(masks), iteration, np.uint32))
        self._cache = None

    def arrays(self):
        if self._cache is None:
            if not self._iters:
                empty = np.zeros((0, 8), DTYPE)
                self._cache = (np.zeros((0, 100, 100), np.uint8), empty, empty.copy(), np.zeros(0, np.uint32))
            else:
                self._cache = tuple(np.concatenate(p) for p in
                                    (self._masks, self._states, self._actions, self._iters))
        return self._cache

    @property
    def masks(self):
        return self.arrays()[0]

    @property
    def states(self):
        return self.arrays()[1]

    @property
    def actions(self):
        return self.arrays()[2]

    @property
    def iterations(self):
        return self.arrays()[3]


def save_dataset(path, data: AggDataset):
    masks, states, actions, iters = data.arrays()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<II", DATASET_VERSION, len(iters)))
        for m, s, a, it in zip(masks, states, actions, iters):
            f.write(struct.pack("<I", int(it)))
            f.write(np.ascontiguousarray(m, np.uint8).tobytes())
            f.write(np.asarray(s, "<f4").tobytes())
            f.write(np.asarray(a, "<f4").tobytes())


def load_dataset(path) -> AggDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a GDAG dataset (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    rec = np.dtype([("it", "<u4"), ("mask", "u1", (100, 100)), ("state", "<f4", 8), ("action", "<f4", 8)])
    body = np.frombuffer(raw, rec, count=count, offset=12)
    data = AggDataset()
    for it in np.unique(body["it"]):
        sel = body["it"] == it
        data.append(body["mask"][sel], body["state"][sel], body["action"][sel], int(it))
    return data


@dataclass
class DaggerConfig:
    frames_per_iter: int = 1000
    epochs_per_iter: int = 200
    lr: float = 0.001
    batch: int = 64
    iterations: int = 50
    beta: str = "delta"  # "delta": beta_n = 1 only at n = 1; "geometric:p": beta_n = p**(n-1)
    eval_every: int = 5
    eval_reps: int = 3
    grid: tuple = (10, 5)
    eval_frames: int = 100
    variant: str = "segmentation-supervised"
    seed: int = 0

    @staticmethod
    def desk(**kw):
        base = dict(frames_per_iter=200, epochs_per_iter=20, iterations=20, grid=(5, 4))
        base.update(kw)
        return DaggerConfig(**base)

    def beta_at(self, n: int) -> float:
        if self.beta == "delta":
            return 1.0 if n == 1 else 0.0
        if self.beta.startswith("geometric:"):
            return float(self.beta.split(":", 1)[1]) ** (n - 1)
        raise ValueError(f"unknown beta schedule {self.beta!r}")


@dataclass
class Frames:
    masks: list = field(default_factory=list)
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)

    def __len__(self):
        return len(self.masks)


def collect_iteration(net, chain, config: SimConfig, n_frames, beta, iteration=1, seed=0,
                      episode_base=None) -> Frames:
    """Roll episodes, executing the expert with probability ``beta`` and the net otherwise.

    Every visited state is labelled with the expert action.  Episodes start
    from sampled sphere positions, end at grasp or the step cap, and the last
    one is cut when ``n_frames`` is reached.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng([seed, 0xDA, iteration])
    base = iteration * 100_000 if episode_base is None else episode_base
    out = Frames()
    episode = 0
    while len(out) < n_frames:
        state = reset(config, chain, None, base + episode)
        expert = ExpertPolicy(chain, max_delta=config.max_delta)
        traj = [state]
        while True:
            mask = mask_observation(chain, state, config)
            sv = state_vector(chain, state)
            label = expert.act(state)
            out.masks.append(mask)
            out.states.append(sv)
            out.actions.append(label.vector())
            if beta >= 1 or rng.random() < beta:
                action = label
            else:
                action = Action.from_vector(controller_forward(net, mask, sv))
            res = step(chain, state, action, config)
            state = res.next_state
            traj.append(state)
            if res.terminal or len(out) >= n_frames:
                break
        out.trajectories.append(traj)
        episode += 1
    return out


def dataset_loss(net, data: AggDataset, batch=256) -> float:
    masks, states, actions, _ = data.arrays()
    return frames_loss(net, masks, states, actions, batch)


def frames_loss(net, masks, states, actions, batch=256) -> float:
    total = 0.0
    for i in range(0, len(masks), batch):
        pred = net.forward(masks[i:i + batch].astype(DTYPE), states[i:i + batch])
        total += imitation_loss(pred, actions[i:i + batch], "sum")[0]
    return total / max(len(masks), 1)


def train_on_dataset(net: ControllerNet, data: AggDataset, epochs, lr=0.001, batch=64, seed=0,
                     optimizer=None) -> list:
    """Shuffled mini-batch ADAM on the mean imitation loss; returns per-epoch mean losses."""
    masks, states, actions, _ = data.arrays()
    n = len(masks)
    if n == 0:
        raise ValueError("train_on_dataset: empty dataset")
    opt = optimizer or Adam(net, lr=lr)
    rng = np.random.default_rng([seed, 0x5F])
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            net.zero_grad()
            pred = net.forward(masks[idx].astype(DTYPE), states[idx])
            loss, grad = imitation_loss(pred, actions[idx], "mean")
            net.backward(grad)
            opt.step()
            total += loss * len(idx)
        history.append(total / n)
    return history


def updates_per_epoch(n, batch):
    return math.ceil(n / batch)


@dataclass
class DaggerResult:
    net: ControllerNet
    dataset: AggDataset
    metrics: list
    snapshots: dict


def dagger_run(cfg: DaggerConfig, chain, sim: SimConfig, net=None, evaluate=True, log=None,
               snapshot_at=(1,)) -> DaggerResult:
    """collect -> aggregate -> train, evaluating on the grid at iteration 1, every
    ``eval_every`` iterations and at the end."""
    from .evaluation import GridSpec, eval_grid

    net = net or ControllerNet(cfg.variant, seed=cfg.seed)
    data = AggDataset()
    metrics, snapshots = [], {}
    grid = GridSpec(*cfg.grid, repetitions=cfg.eval_reps)
    for n in range(1, cfg.iterations + 1):
        frames = collect_iteration(net, chain, sim, cfg.frames_per_iter, cfg.beta_at(n), n, cfg.seed)
        data.append(frames.masks, frames.states, frames.actions, n)
        hist = train_on_dataset(net, data, cfg.epochs_per_iter, cfg.lr, cfg.batch, seed=cfg.seed * 1000 + n)
        # on-policy check: fresh frames from the new policy, labelled by the expert, never stored
        fresh = collect_iteration(net, chain, sim, cfg.eval_frames, 0.0, n, cfg.seed + 7919,
                                  episode_base=n * 100_000 + 50_000)
        eval_loss = frames_loss(net, np.asarray(fresh.masks), np.asarray(fresh.states, DTYPE),
                                np.asarray(fresh.actions, DTYPE))
        row = {"iteration": n, "frames": len(data), "train_loss": hist[-1] if hist else float("nan"),
               "eval_loss": eval_loss, "success_rate": None}
        if evaluate and (n == 1 or n % cfg.eval_every == 0 or n == cfg.iterations):
            from .controller import ControllerPolicy

            row["success_rate"] = eval_grid(ControllerPolicy(net, chain, sim), grid, sim, chain).success_rate
        if n in snapshot_at:
            snapshots[n] = {k: v.copy() for k, v in net.parameters().items()}
        metrics.append(row)
        if log:
            log(row)
    return DaggerResult(net, data, metrics, snapshots)


# -- end-to-end variant: RGB -> vision net -> controller ----------------------------

E2E_VARIANTS = ("segmentation-supervised", "unsupervised-mask", "spatial-softmax-32")


def e2e_epochs(iteration, budget=250):
    """Epochs at DAGGER iteration i: ceil(budget / i)."""
    if iteration < 1:
        raise ValueError("iterations count from 1")
    return math.ceil(budget / iteration)


@dataclass
class E2EConfig:
    iterations: int = 5
    frames_per_iter: int = 50
    epoch_budget: int = 250
    lr: float = 0.001
    batch: int = 64
    chunk: int = 8
    seg_weight: float = 1.0
    vision_widths: tuple = (4, 4, 8, 8)
    n_backgrounds: int = 20
    seed: int = 0


@dataclass
class E2EResult:
    vision: object
    controller: ControllerNet
    metrics: list


def _e2e_nets(variant, cfg: E2EConfig):
    from .vision import VisionNet

    if variant not in E2E_VARIANTS:
        raise ValueError(f"unknown end-to-end variant {variant!r}")
    channels = 32 if variant == "spatial-softmax-32" else 1
    vision = VisionNet(cfg.vision_widths, seed=cfg.seed, out_channels=channels)
    controller = ControllerNet(variant, in_channels=channels, seed=cfg.seed)
    return vision, controller


def _e2e_frame(chain, state, sim, pool, rng):
    from .render import SPHERE_ID, compose, render_mask, render_rgb, scene_for_state

    camera, scene = scene_for_state(chain, state, sim)
    fg, ids = render_rgb(camera, scene, only={SPHERE_ID, 3, 4})
    alpha = np.isin(ids, (SPHERE_ID, 3, 4))
    bg = pool[int(rng.integers(len(pool)))].astype(float) / 255
    img = compose(fg, alpha.astype(float), bg)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), render_mask(camera, scene)


def e2e_step_loss(vision, controller, images, masks, states, actions, seg_weight, n_total,
                  backward=True):
    """Action loss (+ weighted seg loss on the interface) summed over a chunk, scaled by 1/n_total."""
    from .vision import seg_loss_logits

    z = vision.logits(images.astype(DTYPE) / 255.0)
    prob = sigmoid(z)
    pred = controller.forward(prob, states)
    act_loss, dpred = imitation_loss(pred, actions, "sum")
    act_loss /= n_total
    seg = 0.0
    if backward:
        dprob = controller.backward(dpred / n_total, input_grad=True)
        dz = dprob * prob * (1 - prob)
    if seg_weight:
        seg, dz_seg = seg_loss_logits(z[..., 0], masks, mean_over=masks[0].size * n_total)
        if backward:
            dz[..., 0] += seg_weight * dz_seg
    if backward:
        vision.backward_logits(dz.astype(DTYPE))
    return act_loss, seg


def end_to_end_run(cfg: E2EConfig, variant, chain, sim: SimConfig, log=None) -> E2EResult:
    """DAGGER with the vision net in the loop.

    Each visited state is rendered, composed over a background and passed
    through the vision net into the controller.  The segmentation-supervised
    variant adds ``seg_weight`` x BCE against the true mask on the interface;
    the others learn from the action loss alone.  Reported losses are the
    action part so the variants are comparable.
    """
    from .datagen import background_pool
    from .vision import vision_forward

    vision, controller = _e2e_nets(variant, cfg)
    pool = background_pool(cfg.n_backgrounds, cfg.seed)
    seg_weight = cfg.seg_weight if variant == "segmentation-supervised" else 0.0
    params = {**{f"vision.{k}": v for k, v in vision.parameters().items()},
              **{f"controller.{k}": v for k, v in controller.parameters().items()}}
    images, masks, states, actions = [], [], [], []
    metrics = []
    for n in range(1, cfg.iterations + 1):
        rng = np.random.default_rng([cfg.seed, 0xE2E, n])
        beta = 1.0 if n == 1 else 0.0
        collected = 0
        episode = 0
        while collected < cfg.frames_per_iter:
            state = reset(sim, chain, None, n * 100_000 + episode)
            expert = ExpertPolicy(chain, max_delta=sim.max_delta)
            while True:
                img, mask = _e2e_frame(chain, state, sim, pool, rng)
                sv = state_vector(chain, state)
                label = expert.act(state)
                images.append(img), masks.append(mask), states.append(sv), actions.append(label.vector())
                collected += 1
                if beta >= 1:
                    action = label
                else:
                    prob = vision_forward(vision, img.astype(DTYPE) / 255.0) if vision.out_channels == 1 \
                        else vision.forward(img[None].astype(DTYPE) / 255.0)[0]
                    action = Action.from_vector(controller_forward(controller, prob, sv))
                res = step(chain, state, action, sim)
                state = res.next_state
                if res.terminal or collected >= cfg.frames_per_iter:
                    break
            episode += 1
        I, M = np.stack(images), np.stack(masks)
        S, A = np.asarray(states, DTYPE), np.asarray(actions, DTYPE)
        opt = AdamState(lr=cfg.lr)
        shuffle = np.random.default_rng([cfg.seed, 0xE5F, n])
        epochs = e2e_epochs(n, cfg.epoch_budget)
        for _ in range(epochs):
            order = shuffle.permutation(len(I))
            act_total = seg_total = 0.0
            for b in range(0, len(I), cfg.batch):
                idx = order[b:b + cfg.batch]
                vision.zero_grad(), controller.zero_grad()
                grads = {**{f"vision.{k}": v for k, v in vision.gradients().items()},
                         **{f"controller.{k}": v for k, v in controller.gradients().items()}}
                for c in range(0, len(idx), cfg.chunk):
                    sub = np.sort(idx[c:c + cfg.chunk])
                    a, s = e2e_step_loss(vision, controller, I[sub], M[sub], S[sub], A[sub],
                                         seg_weight, len(idx))
                    act_total += a * len(idx)
                    seg_total += s * len(idx)
                adam_step(params, grads, opt)
        row = {"iteration": n, "frames": len(I), "epochs": epochs,
               "train_loss": act_total / len(I), "seg_loss": seg_total / len(I) if seg_weight else float("nan")}
        metrics.append(row)
        if log:
            log(row)
    return E2EResult(vision, controller, metrics)
