"""Dense layer primitives with analytic gradients.

Every layer accepts either a single datum (shape == ``layer.in_shape``) or a
batch with one extra leading axis. Arrays are float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class GradBundle:
    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _split_batch(x: np.ndarray, in_shape: tuple[int, ...], name: str) -> tuple[np.ndarray, bool]:
    """Return ``x`` with a leading batch axis and whether one was added."""
    if x.shape == in_shape:
        return x[None], True
    if x.shape[1:] == in_shape:
        return x, False
    raise ShapeError(f"{name}: expected input shape {in_shape} (optionally batched), got {x.shape}")


class Layer:
    kind = "layer"
    has_params = False

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {}

    def with_params(self, params: dict[str, np.ndarray]) -> "Layer":
        return self

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> GradBundle:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"
    has_params = True

    def __init__(self, weight, bias, u=None):
        self.weight = _as_f64(weight)
        self.bias = _as_f64(bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"linear: weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        self.u = None if u is None else _as_f64(u)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_shape(self) -> tuple[int, ...]:
        return (self.in_dim,)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, params):
        return Linear(params["weight"], params["bias"], self.u)

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(f"linear: expected input shape {self.in_shape}, got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, x):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "linear")
        out = xb @ self.weight.T + self.bias
        return out[0] if single else out

    def backward(self, x, grad_out):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "linear")
        g = _as_f64(grad_out)
        if single and g.shape == (self.out_dim,):
            g = g[None]
        if g.shape != (xb.shape[0], self.out_dim):
            raise ShapeError(f"linear: grad_out shape {np.shape(grad_out)} does not match output {(xb.shape[0], self.out_dim)}")
        dx = g @ self.weight
        return GradBundle(dx[0] if single else dx, {"weight": g.T @ xb, "bias": g.sum(axis=0)})


class Conv2d(Layer):
    """Valid-padding 2-D convolution (cross-correlation), unit dilation."""

    kind = "conv2d"
    has_params = True

    def __init__(self, weight, bias, in_hw: tuple[int, int], stride: int = 1, u=None):
        self.weight = _as_f64(weight)
        self.bias = _as_f64(bias)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv2d: weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        self.in_hw = (int(in_hw[0]), int(in_hw[1]))
        self.stride = int(stride)
        kh, kw = self.weight.shape[2:]
        if self.in_hw[0] < kh or self.in_hw[1] < kw:
            raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than input {self.in_hw}")
        self.u = None if u is None else _as_f64(u)

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_shape(self):
        return (self.in_ch, *self.in_hw)

    @property
    def out_hw(self) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        s = self.stride
        return ((self.in_hw[0] - kh) // s + 1, (self.in_hw[1] - kw) // s + 1)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def with_params(self, params):
        return Conv2d(params["weight"], params["bias"], self.in_hw, self.stride, self.u)

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(f"conv2d: expected input shape {self.in_shape}, got {tuple(in_shape)}")
        return (self.out_ch, *self.out_hw)

    def _patches(self, xb):
        kh, kw = self.weight.shape[2:]
        ho, wo = self.out_hw
        s = self.stride
        win = np.lib.stride_tricks.sliding_window_view(xb, (kh, kw), axis=(2, 3))
        # (N, C, Ho, Wo, kh, kw)
        return win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]

    def forward(self, x):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "conv2d")
        out = np.einsum("nchwij,ocij->nohw", self._patches(xb), self.weight, optimize=True)
        out += self.bias[None, :, None, None]
        return out[0] if single else out

    def backward(self, x, grad_out):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "conv2d")
        expected = (xb.shape[0], self.out_ch, *self.out_hw)
        g = _as_f64(grad_out)
        if single:
            g = g[None]
        if g.shape != expected:
            raise ShapeError(f"conv2d: grad_out shape {np.shape(grad_out)} does not match output {expected}")
        dw = np.einsum("nohw,nchwij->ocij", g, self._patches(xb), optimize=True)
        db = g.sum(axis=(0, 2, 3))
        kh, kw = self.weight.shape[2:]
        ho, wo = self.out_hw
        s = self.stride
        dx = np.zeros_like(xb)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += np.einsum(
                    "nohw,oc->nchw", g, self.weight[:, :, i, j], optimize=True
                )
        return GradBundle(dx[0] if single else dx, {"weight": dw, "bias": db})


class ReLU(Layer):
    kind = "relu"

    def __init__(self, in_shape: tuple[int, ...] | None = None):
        self.in_shape = None if in_shape is None else tuple(in_shape)

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(_as_f64(x), 0.0)

    def backward(self, x, grad_out):
        x = _as_f64(x)
        g = _as_f64(grad_out)
        if g.shape != x.shape:
            raise ShapeError(f"relu: grad_out shape {g.shape} does not match input {x.shape}")
        # subgradient 0 at exactly 0
        return GradBundle(np.where(x > 0, g, 0.0))


class MaxPool2d(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    kind = "maxpool2d"

    def __init__(self, size: int, in_shape: tuple[int, int, int]):
        self.size = int(size)
        self.in_shape = tuple(int(v) for v in in_shape)
        if self.size < 1 or self.in_shape[1] < self.size or self.in_shape[2] < self.size:
            raise ShapeError(f"maxpool2d: window {self.size} does not fit input {self.in_shape}")

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(f"maxpool2d: expected input shape {self.in_shape}, got {tuple(in_shape)}")
        c, h, w = self.in_shape
        return (c, h // self.size, w // self.size)

    def _windows(self, xb):
        n, c, h, w = xb.shape
        s = self.size
        ho, wo = h // s, w // s
        v = xb[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s)
        return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)

    def forward(self, x):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "maxpool2d")
        out = self._windows(xb).max(axis=-1)
        return out[0] if single else out

    def backward(self, x, grad_out):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "maxpool2d")
        n, c, h, w = xb.shape
        s = self.size
        ho, wo = h // s, w // s
        g = _as_f64(grad_out)
        if single:
            g = g[None]
        if g.shape != (n, c, ho, wo):
            raise ShapeError(f"maxpool2d: grad_out shape {np.shape(grad_out)} does not match output {(n, c, ho, wo)}")
        arg = self._windows(xb).argmax(axis=-1)
        routed = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        dx = np.zeros_like(xb)
        dx[:, :, : ho * s, : wo * s] = routed
        return GradBundle(dx[0] if single else dx)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, in_shape: tuple[int, ...]):
        self.in_shape = tuple(int(v) for v in in_shape)

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(f"flatten: expected input shape {self.in_shape}, got {tuple(in_shape)}")
        return (int(np.prod(self.in_shape)),)

    def forward(self, x):
        xb, single = _split_batch(_as_f64(x), self.in_shape, "flatten")
        out = xb.reshape(xb.shape[0], -1)
        return out[0] if single else out

    def backward(self, x, grad_out):
        x = _as_f64(x)
        g = _as_f64(grad_out)
        if g.size != x.size:
            raise ShapeError(f"flatten: grad_out shape {g.shape} does not match input {x.shape}")
        return GradBundle(g.reshape(x.shape))


def forward(layer: Layer, x) -> np.ndarray:
    return layer.forward(x)


def backward(layer: Layer, x, grad_out) -> GradBundle:
    return layer.backward(x, grad_out)


def finite_difference_check(layer: Layer, x, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(r * layer.forward(x))`` for a fixed random
    ``r``; every input and parameter coordinate is perturbed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_f64(x).copy()
    r = np.random.default_rng(seed).standard_normal(layer.forward(x).shape)
    grads = layer.backward(x, r)

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-6)

    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(np.sum(r * layer.forward(x)))
        flat[k] = orig - eps
        fm = float(np.sum(r * layer.forward(x)))
        flat[k] = orig
        worst = max(worst, rel(grads.input_grad.reshape(-1)[k], (fp - fm) / (2 * eps)))

    params = {k: v.copy() for k, v in layer.params.items()}
    for name, arr in params.items():
        pflat = arr.reshape(-1)
        analytic = grads.param_grads[name].reshape(-1)
        for k in range(pflat.size):
            orig = pflat[k]
            pflat[k] = orig + eps
            fp = float(np.sum(r * layer.with_params(params).forward(x)))
            pflat[k] = orig - eps
            fm = float(np.sum(r * layer.with_params(params).forward(x)))
            pflat[k] = orig
            worst = max(worst, rel(analytic[k], (fp - fm) / (2 * eps)))
    return worst


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis, overflow-safe via max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = _as_f64(logits) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _as_f64(logits)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(probs, label: int) -> float:
    probs = _as_f64(probs)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], 1e-12)))
