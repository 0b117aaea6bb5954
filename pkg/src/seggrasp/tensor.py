"""Small NHWC layer library with hand-written backward passes and ADAM.

Arrays are plain numpy arrays laid out as (batch, height, width, channels)
for feature maps and (batch, features) for vectors.  Every layer caches
what its backward pass needs during ``forward``; ``backward`` consumes that
cache, accumulates parameter gradients and returns the input gradient.

Training runs in float32.  ``Module.astype(np.float64)`` converts a whole
network for finite-difference gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1) -> int:
    """Output extent of a valid (unpadded) convolution along one axis."""
    return (size - dilation * (kernel - 1) - 1) // stride + 1


class Layer:
    """Base class.  Parameterised layers fill ``params`` and ``grads``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


class Conv2D(Layer):
    """2-D convolution (cross-correlation) with stride, dilation and valid/same padding.

    Weights have shape (kh, kw, in_channels, out_channels).  ``same`` padding
    keeps the spatial extent when stride is 1 and pads symmetrically, with
    any odd leftover going to the bottom/right.
    """

    def __init__(self, kh, kw, cin, cout, stride=1, dilation=1, padding="valid",
                 rng=None, input_grad=True):
        super().__init__()
        if min(kh, kw) < 1 or stride < 1 or dilation < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = kh * kw * cin
        self.params["w"] = (rng.standard_normal((kh, kw, cin, cout)) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
        self.params["b"] = np.zeros(cout, DTYPE)
        self.zero_grad()

    def _pads(self, kh, kw):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        th, tw = self.dilation * (kh - 1), self.dilation * (kw - 1)
        return (th // 2, th - th // 2), (tw // 2, tw - tw // 2)

    def forward(self, x):
        w, b = self.params["w"], self.params["b"]
        kh, kw, cin, cout = w.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"conv2d: input shape {x.shape} does not match kernel shape {w.shape}")
        ph, pw = self._pads(kh, kw)
        if any(ph + pw):
            x = np.pad(x, ((0, 0), ph, pw, (0, 0)))
        n, hp, wp, _ = x.shape
        s, d = self.stride, self.dilation
        ho, wo = conv_output_size(hp, kh, s, d), conv_output_size(wp, kw, s, d)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {w.shape} (dilation {d}) larger than input {x.shape}")
        out = np.empty((n, ho, wo, cout), dtype=np.result_type(x, w))
        out[...] = b
        if cin < 8:
            # few input channels: a single im2col matmul beats 25 skinny ones
            cols = self._im2col(x, kh, kw, ho, wo)
            out += (cols @ w.reshape(-1, cout)).reshape(n, ho, wo, cout)
        else:
            cols = None
            for i in range(kh):
                for j in range(kw):
                    out += self._window(x, i, j, ho, wo) @ w[i, j]
        self._cache = (x, cols, ph, pw, ho, wo)
        return out

    def _window(self, x, i, j, ho, wo):
        s, d = self.stride, self.dilation
        return x[:, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s, :]

    def _im2col(self, x, kh, kw, ho, wo):
        s, d = self.stride, self.dilation
        eh, ew = d * (kh - 1) + 1, d * (kw - 1) + 1
        v = sliding_window_view(x, (eh, ew), axis=(1, 2))[:, ::s, ::s, :, ::d, ::d]
        v = v[:, :ho, :wo]
        return v.transpose(0, 1, 2, 4, 5, 3).reshape(x.shape[0] * ho * wo, kh * kw * x.shape[3])

    def backward(self, dout):
        x, cols, ph, pw, ho, wo = self._take_cache()
        w = self.params["w"]
        kh, kw, cin, cout = w.shape
        self.grads["b"] += dout.sum(axis=(0, 1, 2))
        d2 = dout.reshape(-1, cout)
        if cols is not None:
            self.grads["w"] += (cols.T @ d2).reshape(w.shape)
        else:
            for i in range(kh):
                for j in range(kw):
                    self.grads["w"][i, j] += self._window(x, i, j, ho, wo).reshape(-1, cin).T @ d2
        if not self.input_grad:
            return None
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                self._window(dx, i, j, ho, wo)[...] += dout @ w[i, j].T
        h, wd = dx.shape[1], dx.shape[2]
        return dx[:, ph[0]:h - ph[1], pw[0]:wd - pw[1], :]


class MaxPool2D(Layer):
    """Max pooling; the gradient goes to the first row-major maximum of each window."""

    def __init__(self, window, stride=None):
        super().__init__()
        stride = window if stride is None else stride
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be >= 1")
        self.window, self.stride = window, stride

    def forward(self, x):
        k, s = self.window, self.stride
        if x.shape[1] < k or x.shape[2] < k:
            raise ShapeError(f"maxpool: window {k} larger than input {x.shape}")
        v = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo, c = v.shape[:4]
        flat = v.reshape(n, ho, wo, c, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx, ho, wo)
        return out

    def backward(self, dout):
        shape, idx, ho, wo = self._take_cache()
        k, s = self.window, self.stride
        dx = np.zeros(shape, dtype=dout.dtype)
        for p in range(k * k):
            i, j = divmod(p, k)
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += np.where(idx == p, dout, 0)
        return dx


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, init="he"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(2.0 / n_in) if init == "he" else np.sqrt(2.0 / (n_in + n_out))
        self.params["w"] = (rng.standard_normal((n_in, n_out)) * scale).astype(DTYPE)
        self.params["b"] = np.zeros(n_out, DTYPE)
        self.zero_grad()

    def forward(self, x):
        w = self.params["w"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"fully_connected: input shape {x.shape} does not match weights {w.shape}")
        self._cache = x
        return x @ w + self.params["b"]

    def backward(self, dout):
        x = self._take_cache()
        self.grads["w"] += x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        return dout @ self.params["w"].T


class ReLU(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype)

    def backward(self, dout):
        return np.where(self._take_cache(), dout, 0).astype(dout.dtype)


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, dout):
        y = self._take_cache()
        return dout * (1 - y * y)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dout):
        y = self._take_cache()
        return dout * y * (1 - y)


class Flatten(Layer):
    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache())


class SpatialSoftmax(Layer):
    """Per-channel softmax over positions, then expected (x, y) in [-1, 1].

    Output is (batch, 2F) ordered x0, y0, x1, y1, ...; x follows columns.
    """

    def forward(self, x):
        n, h, w, f = x.shape
        gx = np.linspace(-1, 1, w) if w > 1 else np.zeros(1)
        gy = np.linspace(-1, 1, h) if h > 1 else np.zeros(1)
        z = x - x.max(axis=(1, 2), keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=(1, 2), keepdims=True)
        ex = np.einsum("nhwf,w->nf", p, gx)
        ey = np.einsum("nhwf,h->nf", p, gy)
        self._cache = (p, gx.astype(x.dtype), gy.astype(x.dtype), ex, ey)
        return np.stack([ex, ey], axis=2).reshape(n, 2 * f).astype(x.dtype)

    def backward(self, dout):
        p, gx, gy, ex, ey = self._take_cache()
        n, h, w, f = p.shape
        d = dout.reshape(n, f, 2)
        dx_, dy_ = d[:, None, None, :, 0], d[:, None, None, :, 1]
        cx = gx[None, None, :, None] - ex[:, None, None, :]
        cy = gy[None, :, None, None] - ey[:, None, None, :]
        return (p * (cx * dx_ + cy * dy_)).astype(dout.dtype)


def relu(x):
    return np.maximum(x, 0)


def tanh_act(x):
    return np.tanh(x)


def conv2d(x, kernels, stride=1, dilation=1, padding="valid"):
    """Functional convolution of one HxWxC image with khxkwxCxF kernels."""
    layer = Conv2D(*kernels.shape, stride=stride, dilation=dilation, padding=padding)
    layer.params["w"] = np.asarray(kernels)
    layer.params["b"] = np.zeros(kernels.shape[3], dtype=np.asarray(kernels).dtype)
    return layer.forward(np.asarray(x)[None])[0]


def maxpool2d(x, window, stride):
    return MaxPool2D(window, stride).forward(np.asarray(x)[None])[0]


def fully_connected(x, weights, bias):
    layer = Dense(*weights.shape)
    layer.params["w"], layer.params["b"] = np.asarray(weights), np.asarray(bias)
    return layer.forward(np.asarray(x)[None])[0]


def spatial_softmax(features):
    return SpatialSoftmax().forward(np.asarray(features)[None])[0]


class Module:
    """A network built from named layers; parameters are exposed as "layer.param"."""

    def __init__(self):
        self.layers: dict[str, Layer] = {}

    def named_layers(self):
        return self.layers.items()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{ln}.{pn}": g for ln, layer in self.named_layers() for pn, g in layer.grads.items()}

    def set_parameter(self, name, value):
        ln, pn = name.rsplit(".", 1)
        layer = self.layers[ln]
        if layer.params[pn].shape != value.shape:
            raise ShapeError(f"{name}: expected shape {layer.params[pn].shape}, got {value.shape}")
        layer.params[pn] = np.array(value, dtype=layer.params[pn].dtype)

    def load_parameters(self, params: dict[str, np.ndarray]):
        mine = self.parameters()
        if set(mine) != set(params):
            raise KeyError(f"parameter names differ: {sorted(set(mine) ^ set(params))}")
        for k, v in params.items():
            self.set_parameter(k, v)

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Bias-corrected ADAM update, applied to ``params`` in place."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ShapeError(f"adam: gradient {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    """ADAM bound to a module's parameter dict."""

    def __init__(self, module: Module, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.module = module
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        params = self.module.parameters()
        adam_step(params, self.module.gradients(), self.state)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"GDNN"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a GDNN checkpoint (magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(DTYPE)
        off += 4 * size
    return out


# -- gradient checking --------------------------------------------------------

def numerical_gradient(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))
