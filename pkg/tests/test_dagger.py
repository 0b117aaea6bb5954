import numpy as np
import pytest

from seggrasp.controller import ControllerNet, controller_forward, imitation_loss, state_vector
from seggrasp.dagger import (AggDataset, DaggerConfig, E2EConfig, _e2e_nets, collect_iteration, dagger_run,
                             e2e_epochs, e2e_step_loss, load_dataset, save_dataset, train_on_dataset,
                             updates_per_epoch)
from seggrasp.expert import ExpertPolicy, expert_rollout
from seggrasp.kinematics import reference_chain
from seggrasp.simenv import SimConfig
from seggrasp.tensor import DTYPE, FormatError, sigmoid

CHAIN = reference_chain()
CFG = SimConfig(contact_noise=0.2)


def _random_dataset(n_per_iter=(3, 4), seed=0):
    rng = np.random.default_rng(seed)
    data = AggDataset()
    for it, n in enumerate(n_per_iter, start=1):
        data.append(rng.integers(0, 2, (n, 100, 100)), rng.uniform(-1, 1, (n, 8)), rng.uniform(-1, 1, (n, 8)), it)
    return data


def test_gdag_round_trip(tmp_path):
    data = _random_dataset()
    save_dataset(tmp_path / "d.gdag", data)
    raw = (tmp_path / "d.gdag").read_bytes()
    assert raw[:4] == b"GDAG" and len(raw) == 12 + 7 * (4 + 10000 + 32 + 32)
    back = load_dataset(tmp_path / "d.gdag")
    for a, b in zip(data.arrays(), back.arrays()):
        np.testing.assert_array_equal(a, b)


def test_gdag_rejects_bad_version_and_magic(tmp_path):
    save_dataset(tmp_path / "d.gdag", _random_dataset())
    raw = bytearray((tmp_path / "d.gdag").read_bytes())
    raw[4] = 9
    (tmp_path / "v.gdag").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 9, expected 1"):
        load_dataset(tmp_path / "v.gdag")
    (tmp_path / "m.gdag").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "m.gdag")


def test_iteration_tags_non_decreasing():
    data = _random_dataset()
    with pytest.raises(ValueError):
        data.append(np.zeros((1, 100, 100)), np.zeros((1, 8)), np.zeros((1, 8)), 1)


def test_beta_schedules():
    cfg = DaggerConfig()
    assert cfg.beta_at(1) == 1.0 and cfg.beta_at(2) == 0.0 and cfg.beta_at(50) == 0.0
    geo = DaggerConfig(beta="geometric:0.5")
    assert [geo.beta_at(n) for n in (1, 2, 3)] == [1.0, 0.5, 0.25]
    with pytest.raises(ValueError):
        DaggerConfig(beta="bogus").beta_at(1)


def test_default_and_desk_configs():
    cfg = DaggerConfig()
    assert (cfg.frames_per_iter, cfg.epochs_per_iter, cfg.lr, cfg.batch, cfg.eval_every) == (1000, 200, 0.001, 64, 5)
    desk = DaggerConfig.desk()
    assert (desk.iterations, desk.frames_per_iter, desk.epochs_per_iter, desk.grid) == (20, 200, 20, (5, 4))


def test_beta_one_reproduces_expert_rollout():
    frames = collect_iteration(ControllerNet(seed=1), CHAIN, CFG, 200, beta=1.0, iteration=1)
    first = frames.trajectories[0]
    ref = expert_rollout(CFG, CHAIN, episode=100_000)
    n = min(len(first), len(ref.states))
    for a, b in zip(first[:n], ref.states[:n]):
        np.testing.assert_array_equal(a.joints, b.joints)
        np.testing.assert_array_equal(a.sphere_pos, b.sphere_pos)
    if len(frames.trajectories) > 1:
        assert len(first) == len(ref.states)
    labels = np.asarray(frames.actions[:ref.length])
    np.testing.assert_array_equal(labels, [a.vector() for a in ref.actions[:len(labels)]])


def test_labels_are_expert_outputs_under_learner_control():
    net = ControllerNet(seed=4)
    frames = collect_iteration(net, CHAIN, CFG, 40, beta=0.0, iteration=3)
    # each trajectory ends with the state after its last labelled step
    labelled = [s for traj in frames.trajectories for s in traj[:-1]]
    assert len(frames) == len(labelled) == 40
    for s, sv, a in zip(labelled, frames.states, frames.actions):
        np.testing.assert_array_equal(sv, state_vector(CHAIN, s))
        np.testing.assert_array_equal(a, ExpertPolicy(CHAIN, max_delta=CFG.max_delta).act(s).vector())
    # the learner's own commands were executed, not the labels
    s0, s1 = frames.trajectories[0][:2]
    executed = controller_forward(net, frames.masks[0], frames.states[0])
    assert not np.allclose(executed, frames.actions[0])
    assert not np.array_equal(s1.joints, expert_step_joints(s0))


def expert_step_joints(state):
    from seggrasp.simenv import step

    a = ExpertPolicy(CHAIN, max_delta=CFG.max_delta).act(state)
    return step(CHAIN, state, a, CFG).next_state.joints


def test_collection_rejects_empty():
    with pytest.raises(ValueError):
        collect_iteration(ControllerNet(), CHAIN, CFG, 0, 1.0)


@pytest.fixture(scope="module")
def small_run():
    cfg = DaggerConfig(frames_per_iter=15, epochs_per_iter=2, iterations=3, eval_frames=5)
    return cfg, dagger_run(cfg, CHAIN, CFG, evaluate=False)


def test_dataset_grows_monotonically(small_run):
    cfg, res = small_run
    assert [m["frames"] for m in res.metrics] == [15, 30, 45]
    np.testing.assert_array_equal(np.bincount(res.dataset.iterations), [0, 15, 15, 15])
    assert all(m["success_rate"] is None for m in res.metrics)
    assert set(res.snapshots) == {1}


def test_run_deterministic(small_run):
    cfg, res = small_run
    again = dagger_run(cfg, CHAIN, CFG, evaluate=False)
    assert again.metrics == res.metrics
    for k, v in res.net.parameters().items():
        np.testing.assert_array_equal(v, again.net.parameters()[k])


class _CountingOptimizer:
    def __init__(self):
        self.steps = 0

    def step(self):
        self.steps += 1


@pytest.mark.parametrize("n,batch", [(130, 64), (128, 64), (1, 64), (65, 64)])
def test_updates_per_epoch(n, batch):
    data = _random_dataset((n,))
    opt = _CountingOptimizer()
    train_on_dataset(ControllerNet(), data, 2, batch=batch, optimizer=opt)
    assert opt.steps == 2 * updates_per_epoch(n, batch) == 2 * -(-n // batch)


def test_training_lowers_loss():
    data = _random_dataset((64,))
    hist = train_on_dataset(ControllerNet(), data, 20, lr=0.001)
    assert hist[-1] < hist[0]
    with pytest.raises(ValueError):
        train_on_dataset(ControllerNet(), AggDataset(), 1)


def test_e2e_epoch_schedule():
    assert [e2e_epochs(i) for i in (1, 5, 250)] == [250, 50, 1]
    assert e2e_epochs(3) == 84
    with pytest.raises(ValueError):
        e2e_epochs(0)


def _e2e_batch(seed=0, n=2):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 400, 400, 3)).astype(np.uint8)
    masks = rng.integers(0, 2, (n, 100, 100)).astype(np.uint8)
    return images, masks, rng.uniform(-1, 1, (n, 8)).astype(DTYPE), rng.uniform(-1, 1, (n, 8)).astype(DTYPE)


def test_seg_weight_zero_is_pure_action_loss():
    vision, controller = _e2e_nets("segmentation-supervised", E2EConfig(vision_widths=(2, 2, 2, 2)))
    images, masks, states, actions = _e2e_batch()
    act, seg = e2e_step_loss(vision, controller, images, masks, states, actions, 0.0, 2)
    g0 = {k: v.copy() for k, v in vision.gradients().items()}
    prob = sigmoid(vision.logits(images.astype(DTYPE) / 255.0))
    direct = imitation_loss(controller.forward(prob, states), actions, "sum")[0] / 2
    assert seg == 0.0 and act == pytest.approx(direct, rel=1e-6)
    vision.zero_grad(), controller.zero_grad()
    act1, seg1 = e2e_step_loss(vision, controller, images, masks, states, actions, 1.0, 2)
    assert act1 == pytest.approx(act, rel=1e-6) and seg1 > 0
    assert any(not np.allclose(g0[k], v) for k, v in vision.gradients().items())


def test_e2e_variant_names():
    with pytest.raises(ValueError):
        _e2e_nets("bogus", E2EConfig())
    v, c = _e2e_nets("spatial-softmax-32", E2EConfig(vision_widths=(2, 2, 2, 2)))
    assert v.out_channels == 32 and c.in_channels == 32
