"""Small dense-tensor layer kernel with hand-written reverse-mode gradients.

Networks are plain lists of layer objects; parameters live in a flat dict
keyed ``"<layer index>.<name>"``.  Tensors are float64 numpy arrays with a
leading batch axis and channels-first image layout ``(B, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ParamStore = dict  # name -> np.ndarray


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# convolution helpers
# ---------------------------------------------------------------------------

def _im2col(x, k, stride, pad):
    """(B, C, H, W) -> (B, Ho, Wo, C, k, k) patches."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _col2im(cols, out_hw, stride, pad):
    """Scatter-add (B, Ho, Wo, C, k, k) patches into a (B, C, H, W) image."""
    B, Ho, Wo, C, k, _ = cols.shape
    H, W = out_hw
    buf = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B, C, k, k, Ho, Wo
    for di in range(k):
        for dj in range(k):
            buf[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += cols[:, :, di, dj]
    if pad:
        buf = buf[:, :, pad:pad + H, pad:pad + W]
    return buf


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"

    def init(self, rng) -> dict:
        return {}

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, x, y, gy, param_grads=True):
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = asdict(self) if hasattr(self, "__dataclass_fields__") else {}
        d["kind"] = self.kind
        return d


@dataclass
class Dense(Layer):
    in_features: int
    out_features: int
    kind = "dense"

    def init(self, rng):
        return {"weight": _he(rng, (self.out_features, self.in_features), self.in_features),
                "bias": np.zeros(self.out_features)}

    def out_shape(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, p, x):
        return x @ p["weight"].T + p["bias"]

    def backward(self, p, x, y, gy, param_grads=True):
        gx = gy @ p["weight"]
        if not param_grads:
            return {}, gx
        return {"weight": gy.T @ x, "bias": gy.sum(0)}, gx


@dataclass
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def init(self, rng):
        fan_in = self.in_channels * self.kernel ** 2
        return {"weight": _he(rng, (self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in),
                "bias": np.zeros(self.out_channels)}

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"expects ({self.in_channels}, H, W), got {shape}")
        _, H, W = shape
        k, s, pd = self.kernel, self.stride, self.padding
        Ho, Wo = (H + 2 * pd - k) // s + 1, (W + 2 * pd - k) // s + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"input {shape} too small for kernel {k}")
        return (self.out_channels, Ho, Wo)

    def forward(self, p, x):
        cols = _im2col(x, self.kernel, self.stride, self.padding)
        B, Ho, Wo = cols.shape[:3]
        W = p["weight"].reshape(self.out_channels, -1)
        y = cols.reshape(B * Ho * Wo, -1) @ W.T + p["bias"]
        return y.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)

    def backward(self, p, x, y, gy, param_grads=True):
        B, _, Ho, Wo = gy.shape
        k = self.kernel
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        W = p["weight"].reshape(self.out_channels, -1)
        gcols = (g2 @ W).reshape(B, Ho, Wo, self.in_channels, k, k)
        gx = _col2im(gcols, x.shape[2:], self.stride, self.padding)
        if not param_grads:
            return {}, gx
        cols = _im2col(x, k, self.stride, self.padding).reshape(B * Ho * Wo, -1)
        gW = (g2.T @ cols).reshape(p["weight"].shape)
        return {"weight": gW, "bias": g2.sum(0)}, gx


@dataclass
class ConvTranspose2d(Layer):
    """Transposed convolution; weight layout (in, out, k, k)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    kind = "conv_transpose2d"

    def init(self, rng):
        fan_in = self.in_channels * self.kernel ** 2 // self.stride ** 2
        return {"weight": _he(rng, (self.in_channels, self.out_channels, self.kernel, self.kernel), fan_in),
                "bias": np.zeros(self.out_channels)}

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"expects ({self.in_channels}, H, W), got {shape}")
        _, H, W = shape
        k, s, pd = self.kernel, self.stride, self.padding
        Ho, Wo = (H - 1) * s + k - 2 * pd, (W - 1) * s + k - 2 * pd
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"padding {pd} too large for input {shape}")
        return (self.out_channels, Ho, Wo)

    def forward(self, p, x):
        B, C, H, W = x.shape
        _, Ho, Wo = self.out_shape(x.shape[1:])
        k, s, pd = self.kernel, self.stride, self.padding
        t = np.tensordot(p["weight"], x, axes=([0], [1]))  # (out, k, k, B, H, W)
        buf = np.zeros((self.out_channels, B, Ho + 2 * pd, Wo + 2 * pd))
        for di in range(k):
            for dj in range(k):
                buf[:, :, di:di + s * H:s, dj:dj + s * W:s] += t[:, di, dj]
        y = buf[:, :, pd:pd + Ho, pd:pd + Wo].transpose(1, 0, 2, 3)
        return y + p["bias"][None, :, None, None]

    def backward(self, p, x, y, gy, param_grads=True):
        B, C, H, W = x.shape
        gcols = _im2col(gy, self.kernel, self.stride, self.padding).reshape(B * H * W, -1)
        Wm = p["weight"].reshape(C, -1)
        gx = (gcols @ Wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if not param_grads:
            return {}, gx
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, C)
        gW = (x2.T @ gcols).reshape(p["weight"].shape)
        return {"weight": gW, "bias": gy.sum((0, 2, 3))}, gx


@dataclass
class Affine(Layer):
    """Per-channel learnable scale and shift (stands in for batch-norm)."""

    channels: int
    kind = "affine"

    def init(self, rng):
        return {"scale": np.ones(self.channels), "shift": np.zeros(self.channels)}

    def out_shape(self, shape):
        if not shape or shape[0] != self.channels:
            raise ShapeError(f"expects {self.channels} channels, got {shape}")
        return shape

    def _bc(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, p, x):
        return x * self._bc(p["scale"], x.ndim) + self._bc(p["shift"], x.ndim)

    def backward(self, p, x, y, gy, param_grads=True):
        gx = gy * self._bc(p["scale"], x.ndim)
        if not param_grads:
            return {}, gx
        axes = (0,) + tuple(range(2, x.ndim))
        return {"scale": (gy * x).sum(axes), "shift": gy.sum(axes)}, gx


@dataclass
class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x):
        return np.maximum(x, 0.0)

    def backward(self, p, x, y, gy, param_grads=True):
        return {}, gy * (x > 0)


@dataclass
class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, p, x):
        return sigmoid(x)

    def backward(self, p, x, y, gy, param_grads=True):
        return {}, gy * y * (1.0 - y)


@dataclass
class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, p, x, y, gy, param_grads=True):
        return {}, gy.reshape(x.shape)


@dataclass
class Reshape(Layer):
    shape: tuple = field(default_factory=tuple)
    kind = "reshape"

    def __post_init__(self):
        self.shape = tuple(self.shape)

    def out_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {shape} to {self.shape}")
        return self.shape

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, p, x, y, gy, param_grads=True):
        return {}, gy.reshape(x.shape)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ConvTranspose2d, Affine, ReLU, Sigmoid, Flatten, Reshape)}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    return LAYER_TYPES[d.pop("kind")](**d)


def sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# network-level passes
# ---------------------------------------------------------------------------

def init_params(net: Sequence[Layer], rng) -> ParamStore:
    params = {}
    for i, layer in enumerate(net):
        for name, value in layer.init(rng).items():
            params[f"{i}.{name}"] = value
    return params


def _layer_params(params, i):
    prefix = f"{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def check_shapes(net: Sequence[Layer], in_shape: tuple) -> list[tuple]:
    """Walk the network's declared shapes; raise ShapeError naming the bad layer."""
    shapes = [tuple(in_shape)]
    for i, layer in enumerate(net):
        try:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
    return shapes


def forward(net: Sequence[Layer], params: ParamStore, x: np.ndarray) -> list[np.ndarray]:
    """Run ``x`` (batched) through ``net``; returns [input, act_1, ..., output]."""
    x = np.asarray(x, dtype=np.float64)
    check_shapes(net, x.shape[1:])
    acts = [x]
    for i, layer in enumerate(net):
        acts.append(layer.forward(_layer_params(params, i), acts[-1]))
    return acts


def backward(net: Sequence[Layer], params: ParamStore, activations: list, output_grad,
             param_grads: bool = True):
    """Reverse pass; returns (parameter gradients, input gradient).

    With ``param_grads=False`` only the input gradient is computed.
    """
    if len(activations) != len(net) + 1:
        raise ShapeError(f"{len(activations)} activations for a {len(net)}-layer network")
    if np.shape(output_grad) != activations[-1].shape:
        raise ShapeError(f"output grad shape {np.shape(output_grad)} != output {activations[-1].shape}")
    grads = {}
    g = np.asarray(output_grad, dtype=np.float64)
    for i in range(len(net) - 1, -1, -1):
        pg, g = net[i].backward(_layer_params(params, i), activations[i], activations[i + 1], g, param_grads)
        for name, value in pg.items():
            grads[f"{i}.{name}"] = value
    return grads, g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamStore, grads: ParamStore, state: AdamState) -> ParamStore:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters without a gradient entry are left alone (frozen).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
