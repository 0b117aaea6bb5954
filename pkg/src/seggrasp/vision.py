"""Segmentation net: 400x400 RGB eye-in-hand frame -> 100x100 sphere probability map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, Adam, Conv2D, MaxPool2D, Module, ReLU, ShapeError, sigmoid

DEFAULT_WIDTHS = (16, 16, 32, 32)
INPUT_SIZE, OUTPUT_SIZE = 400, 100


class VisionNet(Module):
    """Five same-padded 5x5 convs; max pools after conv1 and conv3; dilation 2 on conv2 and conv4.

    ``out_channels`` is 1 for the segmentation interface.  The end-to-end
    keypoint variant widens it to feed a multi-channel interface.
    """

    def __init__(self, widths=None, seed=0, out_channels=1):
        super().__init__()
        widths = tuple(widths or DEFAULT_WIDTHS)
        if len(widths) != 4:
            raise ValueError(f"need 4 hidden widths, got {widths}")
        self.widths, self.out_channels = widths, out_channels
        rng = np.random.default_rng([seed, 0x715])
        chans = (3,) + widths + (out_channels,)
        dil = (1, 2, 1, 2, 1)
        for k in range(5):
            self.layers[f"conv{k + 1}"] = Conv2D(5, 5, chans[k], chans[k + 1], dilation=dil[k],
                                                 padding="same", rng=rng, input_grad=k > 0)
        # the logit layer starts near zero so early predictions sit at 0.5
        self.layers["conv5"].params["w"] *= 0.1
        self.relus = [ReLU() for _ in range(4)]
        self.pool1, self.pool2 = MaxPool2D(2), MaxPool2D(2)
        self._probs = None

    def logits(self, img):
        img = np.asarray(img)
        if img.ndim == 3:
            img = img[None]
        if img.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ShapeError(f"vision: input shape {img.shape[1:]}, expected {(INPUT_SIZE, INPUT_SIZE, 3)}")
        L, r = self.layers, self.relus
        h = img.astype(L["conv1"].params["w"].dtype, copy=False)
        h = self.pool1.forward(r[0].forward(L["conv1"].forward(h)))
        h = r[1].forward(L["conv2"].forward(h))
        h = self.pool2.forward(r[2].forward(L["conv3"].forward(h)))
        h = r[3].forward(L["conv4"].forward(h))
        return L["conv5"].forward(h)

    def forward(self, img):
        """(N, 400, 400, 3) in [0, 1] -> (N, 100, 100, C) probabilities."""
        return sigmoid(self.logits(img))

    def backward_logits(self, dz, input_grad=False):
        L, r = self.layers, self.relus
        d = L["conv5"].backward(dz)
        d = L["conv4"].backward(r[3].backward(d))
        d = L["conv3"].backward(r[2].backward(self.pool2.backward(d)))
        d = L["conv2"].backward(r[1].backward(d))
        L["conv1"].input_grad = input_grad
        d = L["conv1"].backward(r[0].backward(self.pool1.backward(d)))
        L["conv1"].input_grad = False
        return d


def vision_forward(net: VisionNet, img) -> np.ndarray:
    """Single image -> (100, 100) probability map."""
    return net.forward(np.asarray(img)[None])[0, ..., 0]


def seg_loss(probabilities, label, eps=1e-12):
    """Mean per-pixel binary cross-entropy and its gradient w.r.t. the probabilities."""
    p = np.asarray(probabilities, np.float64)
    y = np.asarray(label, np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"seg_loss: prediction {p.shape} vs label {y.shape}")
    pc = np.clip(p, eps, 1 - eps)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    grad = (pc - y) / (pc * (1 - pc)) / p.size
    return float(loss), grad


def seg_loss_logits(z, label, mean_over=None):
    """BCE from logits (stable form); gradient w.r.t. the logits.  ``mean_over`` overrides the divisor."""
    z64 = np.asarray(z, np.float64)
    y = np.asarray(label, np.float64)
    if z64.shape != y.shape:
        raise ShapeError(f"seg_loss: prediction {z64.shape} vs label {y.shape}")
    n = z64.size if mean_over is None else mean_over
    loss = np.sum(np.logaddexp(0, z64) - y * z64) / n
    grad = (sigmoid(z64) - y) / n
    return float(loss), grad.astype(np.asarray(z).dtype)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, pred, gt):
        p = np.asarray(pred) > 0.5
        g = np.asarray(gt) > 0.5
        self.tp += int(np.sum(p & g))
        self.fp += int(np.sum(p & ~g))
        self.fn += int(np.sum(~p & g))

    def precision_recall(self):
        precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0
        recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0
        return precision, recall


def precision_recall(pred, gt):
    """Pixel precision and recall of ``pred`` (thresholded at 0.5) against ``gt``.

    Several images are pooled into one count.  Nothing predicted gives
    precision 1; no positives gives recall 1.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"precision_recall: {pred.shape} vs {gt.shape}")
    c = Counts()
    c.add(pred, gt)
    return c.precision_recall()


def _batch(images, idx):
    return images[idx].astype(DTYPE) / 255.0


def evaluate_vision(net, data, batch=8):
    c = Counts()
    for i in range(0, len(data), batch):
        idx = np.arange(i, min(i + batch, len(data)))
        c.add(net.forward(_batch(data.images, idx))[..., 0], data.masks[idx])
    return c.precision_recall()


def train_vision(net: VisionNet, train, held_out, epochs, eval_every=10, batch=8, lr=0.001, seed=0,
                 log=None):
    """ADAM on the mean per-pixel BCE; held-out precision/recall every ``eval_every`` epochs.

    Returns (net, history) where each history row is
    {"epoch", "loss", "precision", "recall"} and ``loss`` is that epoch's mean training loss.
    """
    if len(train) == 0 or len(held_out) == 0:
        raise ValueError("train_vision needs non-empty train and held-out sets")
    opt = Adam(net, lr=lr)
    rng = np.random.default_rng([seed, 0x7E1])
    n = len(train)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch):
            idx = np.sort(order[i:i + batch])
            net.zero_grad()
            z = net.logits(_batch(train.images, idx))
            loss, dz = seg_loss_logits(z[..., 0], train.masks[idx])
            net.backward_logits(dz[..., None])
            opt.step()
            total += loss * len(idx)
        if epoch % eval_every == 0 or epoch == epochs:
            p, r = evaluate_vision(net, held_out, batch)
            row = {"epoch": epoch, "loss": total / n, "precision": p, "recall": r}
            history.append(row)
            if log:
                log(row)
    return net, history


def vision_mask_fn(net: VisionNet, chain, config, lights=None):
    """Observation function for closed-loop runs: ray-trace the RGB frame, segment, threshold."""
    from .render import render_rgb, scene_for_state

    def mask_fn(state):
        camera, scene = scene_for_state(chain, state, config, lights)
        img, _ = render_rgb(camera, scene)
        return (vision_forward(net, img) > 0.5).astype(np.uint8)

    return mask_fn
