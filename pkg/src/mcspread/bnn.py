"""MC-dropout networks: dropout on the input of every weight layer, kept on at test time."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import Conv2d, Flatten, Layer, Linear, MaxPool2d, ReLU, ShapeError, log_softmax, softmax

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Network:
    """A layer stack plus its dropout / spectral-normalization settings.

    ``arch`` is the list of layer descriptors the stack was built from; it is
    what gets serialized alongside the parameters.
    """

    layers: list[Layer]
    input_shape: tuple[int, ...]
    drop_prob: float = 0.1
    spectral_norm: bool = False
    init_seed: int = 0
    arch: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.drop_prob < 1:
            raise ValueError(f"drop_prob must be in [0, 1), got {self.drop_prob}")
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    @property
    def weight_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    @property
    def n_embeddings(self) -> int:
        return len(self.weight_layers)

    def capture_points(self) -> list[int]:
        """Layer indices after which an embedding is recorded.

        One per weight layer: the output of the block that starts at that
        weight layer and runs up to (not including) the next one.
        """
        w = self.weight_layers
        return [nxt - 1 for nxt in w[1:]] + [len(self.layers) - 1]

    def copy(self) -> "Network":
        layers = []
        for layer in self.layers:
            if layer.has_params:
                new = layer.with_params({k: v.copy() for k, v in layer.params.items()})
                new.u = None if layer.u is None else layer.u.copy()
                layers.append(new)
            else:
                layers.append(layer)
        return Network(layers, self.input_shape, self.drop_prob, self.spectral_norm, self.init_seed, list(self.arch))


def build_network(arch: list[dict], input_shape, drop_prob: float = 0.1,
                  spectral_norm: bool = False, init_seed: int = 0) -> Network:
    """Instantiate ``arch`` with uniform(+-1/sqrt(fan_in)) initialization.

    Descriptors: ``{"type": "linear", "out": 64}``, ``{"type": "conv2d",
    "out_ch": 6, "kernel": 5, "stride": 1}``, ``{"type": "relu"}``,
    ``{"type": "maxpool2d", "size": 2}``, ``{"type": "flatten"}``.
    """
    rng = np.random.default_rng(init_seed)
    shape = tuple(int(v) for v in input_shape)
    layers: list[Layer] = []
    for spec in arch:
        kind = spec["type"]
        if kind == "linear":
            if len(shape) != 1:
                raise ShapeError(f"linear layer needs rank-1 input, got {shape}; add a flatten layer")
            fan_in, out = shape[0], int(spec["out"])
            bound = 1.0 / np.sqrt(fan_in)
            layer = Linear(rng.uniform(-bound, bound, (out, fan_in)), rng.uniform(-bound, bound, out))
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(f"conv2d layer needs (C, H, W) input, got {shape}")
            k = spec["kernel"]
            kh, kw = (k, k) if np.isscalar(k) else k
            out = int(spec["out_ch"])
            fan_in = shape[0] * kh * kw
            bound = 1.0 / np.sqrt(fan_in)
            layer = Conv2d(rng.uniform(-bound, bound, (out, shape[0], kh, kw)),
                           rng.uniform(-bound, bound, out), shape[1:], spec.get("stride", 1))
        elif kind == "relu":
            layer = ReLU(shape)
        elif kind == "maxpool2d":
            layer = MaxPool2d(spec.get("size", 2), shape)
        elif kind == "flatten":
            layer = Flatten(shape)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if layer.has_params and spectral_norm:
            u = rng.standard_normal(layer.weight.shape[0])
            layer.u = u / np.linalg.norm(u)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Network(layers, input_shape, drop_prob, spectral_norm, init_seed, [dict(a) for a in arch])


def mlp_arch(hidden=(128, 64), n_classes: int = 10) -> list[dict]:
    arch: list[dict] = []
    for h in hidden:
        arch += [{"type": "linear", "out": h}, {"type": "relu"}]
    arch.append({"type": "linear", "out": n_classes})
    return arch


def lenet_arch(n_classes: int = 10) -> list[dict]:
    """LeNet5-style stack for 1x28x28 inputs (valid padding, ReLU, max-pool)."""
    return [
        {"type": "conv2d", "out_ch": 6, "kernel": 5}, {"type": "relu"}, {"type": "maxpool2d", "size": 2},
        {"type": "conv2d", "out_ch": 16, "kernel": 5}, {"type": "relu"}, {"type": "maxpool2d", "size": 2},
        {"type": "flatten"},
        {"type": "linear", "out": 120}, {"type": "relu"},
        {"type": "linear", "out": 84}, {"type": "relu"},
        {"type": "linear", "out": n_classes},
    ]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.epochs < 1:
            errors.append(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            errors.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1:
            errors.append(f"beta1 must be in (0, 1), got {self.beta1}")
        if not 0 < self.beta2 < 1:
            errors.append(f"beta2 must be in (0, 1), got {self.beta2}")
        return errors


@dataclass
class MCRun:
    softmax_samples: np.ndarray  # (T, C)
    layer_embeddings: list[np.ndarray]  # per layer (T, d_i)

    @property
    def T(self) -> int:
        return self.softmax_samples.shape[0]


def dropout_mask(shape, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``drop_prob``, else 1/(1-drop_prob)."""
    if not 0 <= drop_prob < 1:
        raise ValueError(f"drop_prob must be in [0, 1), got {drop_prob}")
    if drop_prob == 0:
        return np.ones(shape)
    return (rng.random(shape) >= drop_prob) / (1.0 - drop_prob)


def _power_iteration(mat: np.ndarray, u: np.ndarray, n_iters: int):
    v = np.zeros(mat.shape[1])
    for _ in range(max(1, int(n_iters))):
        v_new = mat.T @ u
        nv = np.linalg.norm(v_new)
        if nv == 0:
            break
        v = v_new / nv
        u_new = mat @ v
        nu = np.linalg.norm(u_new)
        if nu == 0:
            break
        u = u_new / nu
    sigma = max(float(u @ mat @ v), 1e-12)
    return u, v, sigma


def spectral_normalize(weight, u, n_iters: int = 1):
    """Power-iteration estimate of the top singular value.

    ``weight`` is viewed as ``(out, -1)``. Returns ``(weight / sigma, u, sigma)``
    with ``u`` the updated left singular vector estimate. A zero matrix keeps
    its ``u`` and gets ``sigma`` clamped at 1e-12.
    """
    w = np.asarray(weight, dtype=np.float64)
    u, _, sigma = _power_iteration(w.reshape(w.shape[0], -1), np.asarray(u, dtype=np.float64), n_iters)
    return w / sigma, u, sigma


def _sn_backward(grad_wn: np.ndarray, w_n: np.ndarray, sigma: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # d(W/sigma)/dW with sigma = u^T W v and u, v held fixed
    g = grad_wn.reshape(grad_wn.shape[0], -1)
    wn = w_n.reshape(w_n.shape[0], -1)
    out = (g - np.sum(g * wn) * np.outer(u, v)) / sigma
    return out.reshape(grad_wn.shape)


def _run(net: Network, x: np.ndarray, rng: np.random.Generator | None, layers: list[Layer] | None = None,
         keep_cache: bool = False):
    """Forward a batch, optionally with dropout, returning logits, embeddings and a backward cache."""
    layers = net.layers if layers is None else layers
    captures = set(net.capture_points())
    embeddings = []
    cache = []
    h = x
    for i, layer in enumerate(layers):
        mask = None
        if layer.has_params and rng is not None and net.drop_prob > 0:
            mask = dropout_mask(h.shape, net.drop_prob, rng)
            h = h * mask
        if keep_cache:
            cache.append((h, mask))
        h = layer.forward(h)
        if i in captures:
            embeddings.append(h.reshape(h.shape[0], -1))
    return h, embeddings, cache


def _batched(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] == net.input_shape:
        return x, False
    raise ShapeError(f"network expects input shape {net.input_shape}, got {x.shape}")


def forward_deterministic(net: Network, x) -> np.ndarray:
    xb, single = _batched(net, x)
    logits, _, _ = _run(net, xb, None)
    return logits[0] if single else logits


def forward_stochastic(net: Network, x, rng: np.random.Generator):
    """One dropout pass; returns ``(logits, embeddings)`` with flattened per-layer embeddings."""
    xb, single = _batched(net, x)
    logits, emb, _ = _run(net, xb, rng)
    if single:
        return logits[0], [e[0] for e in emb]
    return logits, emb


def predict(net: Network, x, batch_size: int = 1024) -> np.ndarray:
    xb, _ = _batched(net, x)
    out = [forward_deterministic(net, xb[i : i + batch_size]).argmax(axis=1) for i in range(0, len(xb), batch_size)]
    return np.concatenate(out)


def mc_sample(net: Network, x, T: int = DEFAULT_SAMPLES, rng: np.random.Generator | None = None) -> MCRun:
    """T stochastic passes of one datum; each pass draws fresh masks for every layer."""
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"network expects input shape {net.input_shape}, got {x.shape}")
    rng = np.random.default_rng(0) if rng is None else rng
    xb = np.broadcast_to(x, (T, *x.shape))
    logits, emb, _ = _run(net, xb, rng)
    return MCRun(softmax(logits), emb)


def mc_sample_many(net: Network, X, T: int = DEFAULT_SAMPLES, seed: int = 0) -> list[MCRun]:
    """MC runs for every row of ``X``; datum ``i`` uses generator ``default_rng([seed, i])``."""
    return [mc_sample(net, x, T, np.random.default_rng([seed, i])) for i, x in enumerate(np.asarray(X, dtype=np.float64))]


def embedding_component_variance(weight, x, keep_prob: float) -> np.ndarray:
    """Closed-form variance of each output of ``W (D * x) + b`` with ``D_i ~ Bernoulli(keep_prob)``.

    ``weight`` is ``(out, in)``; masks are NOT rescaled by 1/keep_prob here.
    """
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    w = np.asarray(weight, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.shape != (w.shape[1],):
        raise ShapeError(f"weight {w.shape} incompatible with input {x.shape}")
    return ((w * x) ** 2).sum(axis=1) * keep_prob * (1 - keep_prob)


def train(net: Network, inputs, labels, config: TrainConfig | None = None):
    """Adam on mean softmax cross-entropy with dropout active.

    Returns ``(trained_network, epoch_losses)``; ``net`` itself is untouched.
    With spectral normalization the normalized weights are written back into
    the returned network at the end, so inference needs no extra step.
    """
    config = TrainConfig() if config is None else config
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} inputs but {len(y)} labels")
    n_classes = net.output_shape[0]
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    if X.shape[1:] != net.input_shape:
        raise ShapeError(f"network expects input shape {net.input_shape}, got {X.shape[1:]}")

    net = net.copy()
    rng = np.random.default_rng(config.seed)
    widx = net.weight_layers
    m = {(i, k): np.zeros_like(v) for i in widx for k, v in net.layers[i].params.items()}
    s = {key: np.zeros_like(v) for key, v in m.items()}
    step = 0
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), config.batch_size):
            batch = order[start : start + config.batch_size]
            xb, yb = X[batch], y[batch]

            run_layers = list(net.layers)
            sn_state = {}
            if net.spectral_norm:
                for i in widx:
                    layer = net.layers[i]
                    u, v, sigma = _power_iteration(layer.weight.reshape(layer.weight.shape[0], -1), layer.u, 1)
                    w_n = layer.weight / sigma
                    layer.u = u
                    sn_state[i] = (w_n, sigma, u, v)
                    run_layers[i] = layer.with_params({"weight": w_n, "bias": layer.bias})

            logits, _, cache = _run(net, xb, rng, run_layers, keep_cache=True)
            logp = log_softmax(logits)
            loss = float(-logp[np.arange(len(yb)), yb].mean())
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch + 1}, step {step + 1}")
            total += loss * len(batch)

            grad = np.exp(logp)
            grad[np.arange(len(yb)), yb] -= 1.0
            grad /= len(yb)
            step += 1
            for i in range(len(run_layers) - 1, -1, -1):
                h_in, mask = cache[i]
                gb = run_layers[i].backward(h_in, grad)
                grad = gb.input_grad if mask is None else gb.input_grad * mask
                if not run_layers[i].has_params:
                    continue
                layer = net.layers[i]
                pg = dict(gb.param_grads)
                if i in sn_state:
                    w_n, sigma, u, v = sn_state[i]
                    pg["weight"] = _sn_backward(pg["weight"], w_n, sigma, u, v)
                new = {}
                for k, p in layer.params.items():
                    key = (i, k)
                    m[key] = config.beta1 * m[key] + (1 - config.beta1) * pg[k]
                    s[key] = config.beta2 * s[key] + (1 - config.beta2) * pg[k] ** 2
                    mhat = m[key] / (1 - config.beta1 ** step)
                    shat = s[key] / (1 - config.beta2 ** step)
                    new[k] = p - config.learning_rate * mhat / (np.sqrt(shat) + config.adam_eps)
                layer.weight, layer.bias = new["weight"], new["bias"]
        losses.append(total / len(X))
        log.info("epoch %d/%d mean loss %.6f", epoch + 1, config.epochs, losses[-1])

    if net.spectral_norm:
        for i in widx:
            layer = net.layers[i]
            w_n, u, _ = spectral_normalize(layer.weight, layer.u, 1)
            layer.weight, layer.u = w_n, u
    return net, losses
