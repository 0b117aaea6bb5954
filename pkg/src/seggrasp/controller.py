"""Closed-loop controller network: (mask, robot state) -> 8 tanh-bounded commands."""

from __future__ import annotations

import numpy as np

from .tensor import (DTYPE, Conv2D, Dense, Flatten, Module, ReLU, ShapeError, SpatialSoftmax, Tanh)

VARIANTS = ("segmentation-supervised", "unsupervised-mask", "spatial-softmax-32")
MASK_SIZE = 100


def state_vector(chain, state) -> np.ndarray:
    """Joint angles scaled to [-1, 1] by the joint limits, then the gripper flag (+1 closed)."""
    q = np.asarray(state.joints, float)
    scaled = 2 * (q - chain.lower) / (chain.upper - chain.lower) - 1
    return np.append(scaled, -1.0 if state.gripper_open else 1.0).astype(DTYPE)


class ControllerNet(Module):
    """Two pathways merged by concatenation.

    Vision: conv 5x5/16 stride 4 -> conv 5x5/32 stride 4 -> fc 128 (ReLU after
    each).  State: fc 8 -> 128.  Merge: fc 256 -> 128 -> 8, tanh.  The
    spatial-softmax variant swaps the vision fc for expected keypoint
    coordinates of the 32 conv2 maps (64 numbers).
    """

    def __init__(self, variant="segmentation-supervised", in_channels=1, seed=0, size=MASK_SIZE):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown controller variant {variant!r}")
        self.variant = variant
        self.size = size
        self.in_channels = in_channels
        rng = np.random.default_rng([seed, 0xC7])
        L = self.layers
        L["conv1"] = Conv2D(5, 5, in_channels, 16, stride=4, rng=rng)
        L["conv2"] = Conv2D(5, 5, 16, 32, stride=4, rng=rng)
        self.relu1, self.relu2 = ReLU(), ReLU()
        if variant == "spatial-softmax-32":
            self.keypoints = SpatialSoftmax()
            vision_width = 64
        else:
            self.flatten = Flatten()
            side = (((size - 5) // 4 + 1) - 5) // 4 + 1
            L["fc_vision"] = Dense(side * side * 32, 128, rng=rng)
            self.relu3 = ReLU()
            vision_width = 128
        L["fc_state"] = Dense(8, 128, rng=rng)
        L["fc_merge1"] = Dense(vision_width + 128, 128, rng=rng)
        L["fc_out"] = Dense(128, 8, rng=rng, init="xavier")
        self.relu_s, self.relu_m = ReLU(), ReLU()
        self.tanh = Tanh()
        self.vision_width = vision_width

    def vision_path(self, mask):
        L = self.layers
        h = self.relu1.forward(L["conv1"].forward(mask))
        h = self.relu2.forward(L["conv2"].forward(h))
        if self.variant == "spatial-softmax-32":
            return self.keypoints.forward(h)
        return self.relu3.forward(L["fc_vision"].forward(self.flatten.forward(h)))

    def forward(self, mask, sv):
        """mask: (N, 100, 100, C) in [0, 1]; sv: (N, 8).  Returns (N, 8) in (-1, 1)."""
        mask = np.asarray(mask)
        if mask.ndim == 3:
            mask = mask[..., None]
        if mask.shape[1:] != (self.size, self.size, self.in_channels):
            raise ShapeError(f"controller: mask shape {mask.shape[1:]}, expected "
                             f"{(self.size, self.size, self.in_channels)}")
        dtype = self.layers["fc_out"].params["w"].dtype
        mask = mask.astype(dtype, copy=False)
        sv = np.asarray(sv, dtype)
        L = self.layers
        v = self.vision_path(mask)
        s = self.relu_s.forward(L["fc_state"].forward(sv))
        h = np.concatenate([v, s], axis=1)
        h = self.relu_m.forward(L["fc_merge1"].forward(h))
        return self.tanh.forward(L["fc_out"].forward(h))

    def backward(self, dout, input_grad=False):
        """Backpropagate d(loss)/d(output); returns d(loss)/d(mask) when asked."""
        L = self.layers
        d = L["fc_out"].backward(self.tanh.backward(dout))
        d = L["fc_merge1"].backward(self.relu_m.backward(d))
        dv, ds = d[:, :self.vision_width], d[:, self.vision_width:]
        L["fc_state"].backward(self.relu_s.backward(ds))
        if self.variant == "spatial-softmax-32":
            dh = self.keypoints.backward(dv)
        else:
            dh = self.flatten.backward(L["fc_vision"].backward(self.relu3.backward(dv)))
        dh = L["conv2"].backward(self.relu2.backward(dh))
        L["conv1"].input_grad = input_grad
        dmask = L["conv1"].backward(self.relu1.backward(dh))
        L["conv1"].input_grad = True
        return dmask


def controller_variant(kind: str, seed=0, in_channels=None) -> ControllerNet:
    """Network builder per variant; the spatial-softmax one reads a 32-channel interface."""
    if in_channels is None:
        in_channels = 32 if kind == "spatial-softmax-32" else 1
    return ControllerNet(kind, in_channels=in_channels, seed=seed)


def controller_forward(net: ControllerNet, mask, sv):
    """Single-sample convenience wrapper returning the 8-vector."""
    return net.forward(np.asarray(mask)[None], np.asarray(sv)[None])[0]


def imitation_loss(pred, target, reduction="mean"):
    """Squared L2 action error and its gradient w.r.t. ``pred``.

    ``mean`` divides the batch sum by the batch size; ``sum`` is the plain sum.
    """
    diff = np.asarray(pred) - np.asarray(target, dtype=np.asarray(pred).dtype)
    if len(diff) == 0:
        raise ValueError("imitation_loss: empty batch")
    total = float(np.sum(diff.astype(np.float64) ** 2))
    scale = 1.0 / len(diff) if reduction == "mean" else 1.0
    return total * scale, (2 * scale) * diff


class ControllerPolicy:
    """Runs the controller in the loop, observing a mask each step."""

    name = "controller"

    def __init__(self, net: ControllerNet, chain, config, mask_fn=None):
        from .render import mask_observation

        self.net, self.chain, self.config = net, chain, config
        self.mask_fn = mask_fn or (lambda state: mask_observation(chain, state, config))

    def reset(self):
        pass

    def act(self, state):
        from .simenv import Action

        mask = self.mask_fn(state)
        out = controller_forward(self.net, mask, state_vector(self.chain, state))
        return Action.from_vector(out)
