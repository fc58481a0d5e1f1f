"""Dense neural-network engine: layers, losses, Adam, and quantiles.

All arithmetic is float64. Given the same RNG, layer initialization and
training updates are bit-reproducible. Batches are row-major: one sample
per row.
"""

from __future__ import annotations

import math

import numpy as np

ACTIVATIONS = ("relu", "linear", "sigmoid")


def as_batch(x, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally checking the column count."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D batch, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {a.shape[1]}")
    return a


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        return sigmoid(pre)
    if name == "linear":
        return pre
    raise ValueError(f"unknown activation {name!r}")


def _activation_backward(name: str, d_out, pre, out) -> np.ndarray:
    if name == "relu":
        return np.where(pre > 0.0, d_out, 0.0)
    if name == "sigmoid":
        return d_out * out * (1.0 - out)
    return d_out


def he_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / in_dim)
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


def glorot_uniform(rng: np.random.Generator, in_dim: int, out_dim: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


class DenseLayer:
    """Fully connected layer with an optional pointwise activation.

    Weights are He-uniform for relu and Glorot-uniform otherwise; biases
    start at zero.
    """

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, activation: str = "linear",
                 rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if in_dim < 1 or out_dim < 1:
            raise ValueError("layer dimensions must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        if rng is None:
            self.weights = np.zeros((in_dim, out_dim))
        elif activation == "relu":
            self.weights = he_uniform(rng, in_dim, out_dim)
        else:
            self.weights = glorot_uniform(rng, in_dim, out_dim)
        self.biases = np.zeros(out_dim)
        self._cache = None
        self.grad_weights = None
        self.grad_biases = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = as_batch(x, self.in_dim)
        pre = x @ self.weights + self.biases
        out = _activate(self.activation, pre)
        if train:
            self._cache = (x, pre, out)
        return out

    def cached_preactivation(self) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("no cached train-mode forward")
        return self._cache[1]

    def backward(self, d_out: np.ndarray, from_logits: bool = False) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward requires a preceding train-mode forward")
        x, pre, out = self._cache
        self._cache = None
        if from_logits:
            # Gradient already taken w.r.t. the pre-activation (e.g. BCE on logits).
            d_pre = np.asarray(d_out, dtype=np.float64)
        else:
            d_pre = _activation_backward(self.activation, d_out, pre, out)
        self.grad_weights = x.T @ d_pre
        self.grad_biases = d_pre.sum(axis=0)
        return d_pre @ self.weights.T

    def parameters(self) -> list[np.ndarray]:
        return [self.weights, self.biases]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_biases]


class BatchNormLayer:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes with batch statistics and updates the running
    mean/variance; eval mode is the deterministic affine map defined by
    the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, dim: int, activation: str = "linear",
                 momentum: float = 0.9, eps: float = 1e-5):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = dim
        self.out_dim = dim
        self.activation = activation
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._cache = None
        self.grad_gamma = None
        self.grad_beta = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = as_batch(x, self.in_dim)
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) * inv_std
        pre = self.gamma * x_hat + self.beta
        out = _activate(self.activation, pre)
        if train:
            self._cache = (x_hat, inv_std, pre, out)
        return out

    def cached_preactivation(self) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("no cached train-mode forward")
        return self._cache[2]

    def backward(self, d_out: np.ndarray, from_logits: bool = False) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward requires a preceding train-mode forward")
        x_hat, inv_std, pre, out = self._cache
        self._cache = None
        if from_logits:
            d_pre = np.asarray(d_out, dtype=np.float64)
        else:
            d_pre = _activation_backward(self.activation, d_out, pre, out)
        self.grad_gamma = (d_pre * x_hat).sum(axis=0)
        self.grad_beta = d_pre.sum(axis=0)
        d_hat = d_pre * self.gamma
        # Batch statistics depend on every row, hence the mean-subtraction terms.
        d_x = inv_std * (d_hat
                         - d_hat.mean(axis=0)
                         - x_hat * (d_hat * x_hat).mean(axis=0))
        return d_x

    def parameters(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_gamma, self.grad_beta]


class Mlp:
    """Sequence of dense/batchnorm layers with chained dimensions."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, batch, train: bool = False) -> list[np.ndarray]:
        """Run the net, returning all activations (input first, output last)."""
        h = as_batch(batch, self.in_dim)
        activations = [h]
        for layer in self.layers:
            h = layer.forward(h, train=train)
            activations.append(h)
        return activations

    def forward_logits(self, batch) -> np.ndarray:
        """Train-mode forward that returns the final pre-activation.

        Only valid when the last layer ends in a sigmoid; pair with
        ``backward(..., from_logits=True)`` for stable cross-entropy.
        """
        last = self.layers[-1]
        if last.activation != "sigmoid":
            raise ValueError("forward_logits requires a sigmoid final layer")
        self.forward(batch, train=True)
        return last.cached_preactivation()

    def backward(self, output_gradient, from_logits: bool = False) -> np.ndarray:
        """Backpropagate, populating per-layer parameter gradients.

        Returns the gradient w.r.t. the network input. Requires a
        train-mode forward on the same batch first.
        """
        d = np.asarray(output_gradient, dtype=np.float64)
        for i, layer in enumerate(reversed(self.layers)):
            d = layer.backward(d, from_logits=from_logits and i == 0)
        return d

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.gradients()]


class AdamState:
    """Adam accumulators for a fixed list of parameter arrays."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        """Apply one bias-corrected Adam update in place."""
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient count does not match state")
        for p, g, m in zip(params, grads, self.m):
            if g is None or p.shape != g.shape or p.shape != m.shape:
                raise ValueError("parameter/gradient shape mismatch")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def weighted_mse_loss(pred, target, weights):
    """Per-sample-weighted reconstruction loss.

    loss = sum_i w_i * mean_j (pred_ij - target_ij)^2. Returns the scalar
    loss and its gradient w.r.t. pred. Negative weights are permitted.
    """
    pred = as_batch(pred)
    target = as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (pred.shape[0],):
        raise ValueError("need exactly one weight per sample")
    diff = pred - target
    per_sample = np.square(diff).mean(axis=1)
    loss = float(w @ per_sample)
    grad = (2.0 / pred.shape[1]) * w[:, None] * diff
    return loss, grad


def weighted_bce_loss(logits, labels, weights):
    """Per-sample-weighted binary cross-entropy computed from logits.

    Stable for saturated logits: BCE_i = max(l,0) - l*y + log1p(exp(-|l|)).
    Returns the scalar loss and its gradient w.r.t. the logits.
    """
    logits = as_batch(logits, 1)
    n = logits.shape[0]
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if y.shape != (n,) or w.shape != (n,):
        raise ValueError("need one label and one weight per sample")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    flat = logits[:, 0]
    per_sample = np.maximum(flat, 0.0) - flat * y + np.log1p(np.exp(-np.abs(flat)))
    loss = float(w @ per_sample)
    grad = (w * (sigmoid(flat) - y))[:, None]
    return loss, grad


def mse_per_row(pred, target) -> np.ndarray:
    """Pixel-mean squared error of each row of pred against target."""
    pred = as_batch(pred)
    target = as_batch(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return np.square(pred - target).mean(axis=1)


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile at position (len-1)*q of the sorted values."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    s = np.sort(v)
    pos = (s.size - 1) * q
    lo = int(math.floor(pos))
    hi = int(math.ceil(pos))
    if lo == hi:
        return float(s[lo])
    frac = pos - lo
    return float(s[lo] * (1.0 - frac) + s[hi] * frac)
