"""Output heads: per-column softmax classifiers for categorical columns and a
single shared conditional denoiser for continuous columns, plus the
variance-exploding noise machinery used to train and sample it.

The denoiser predicts the standard-normal noise added to an encoded value:
eps_hat = trunk(lin(x_t) + MLP_t(PE(sigma)) + MLP_z(z)), where PE is a
sinusoidal embedding of the noise level (the time variable equals sigma) and
z is the backbone's latent for that column. All forward passes cache what
backward needs; gradients are exact.
"""

from __future__ import annotations

import math

import numpy as np

INIT_STD = 0.02

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
LOGNORMAL_MEAN = -1.2
LOGNORMAL_STD = 1.2


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _act_forward(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0), None
    s = _sigmoid(x)
    return x * s, s


def _act_backward(dout, x, cache, kind):
    if kind == "relu":
        return dout * (x > 0)
    s = cache
    return dout * (s * (1.0 + x * (1.0 - s)))


class _MLP:
    """Small fully connected stack; activation after every layer but the last."""

    def __init__(self, widths, activation, rng, dtype, prefix):
        self.widths = widths
        self.activation = activation
        self.prefix = prefix
        self.Ws = []
        self.bs = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.Ws.append(rng.normal(0.0, INIT_STD, (w_in, w_out)).astype(dtype))
            self.bs.append(np.zeros(w_out, dtype=dtype))

    def named_parameters(self):
        out = []
        for l, (W, b) in enumerate(zip(self.Ws, self.bs)):
            out.append((f"{self.prefix}.W{l}", W))
            out.append((f"{self.prefix}.b{l}", b))
        return out

    def forward(self, x):
        caches = []
        h = x
        last = len(self.Ws) - 1
        for l, (W, b) in enumerate(zip(self.Ws, self.bs)):
            u = h @ W + b
            if l < last:
                a, c = _act_forward(u, self.activation)
                caches.append((h, u, c))
                h = a
            else:
                caches.append((h, u, None))
                h = u
        return h, caches

    def backward(self, caches, dout):
        grads = {}
        last = len(self.Ws) - 1
        d = dout
        for l in range(last, -1, -1):
            h, u, c = caches[l]
            if l < last:
                d = _act_backward(d, u, c, self.activation)
            grads[f"{self.prefix}.W{l}"] = h.reshape(-1, h.shape[-1]).T @ d.reshape(
                -1, d.shape[-1]
            )
            grads[f"{self.prefix}.b{l}"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
            d = d @ self.Ws[l].T
        return d, grads


class DiscreteHead:
    """4-layer ReLU classifier d -> d -> d -> d -> K for one categorical column."""

    def __init__(self, d: int, n_classes: int, rng, dtype=np.float32, name="head"):
        self.n_classes = n_classes
        self.mlp = _MLP([d, d, d, d, n_classes], "relu", rng, dtype, name)

    def named_parameters(self):
        return self.mlp.named_parameters()

    def forward(self, z):
        """z (B, d) -> (logits (B, K), trace)."""
        return self.mlp.forward(z)

    def backward(self, trace, dlogits):
        """-> (dz, grads)."""
        return self.mlp.backward(trace, dlogits)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-row cross-entropy with the max-shift; returns (losses, dlogits).

    dlogits is the gradient of the summed loss; scale it by the caller's
    per-row weights before backprop if a mean is wanted.
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    K = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for {K} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(len(labels)), labels]
    losses = lse - picked
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return losses, dlogits


def sinusoidal_embedding(t: np.ndarray, d: int) -> np.ndarray:
    """Noise-level embedding: first half sin(t*w_k), second half cos(t*w_k),
    w_k = 10000^(-2k/d). Width d must be even."""
    if d % 2 != 0:
        raise ValueError("embedding width must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    k = np.arange(d // 2, dtype=np.float64)
    w = 10000.0 ** (-2.0 * k / d)
    ang = t * w
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Shared conditional noise predictor for all continuous columns."""

    def __init__(self, d: int, rng, dtype=np.float32):
        self.d = d
        self.dtype = dtype
        self.in_W = rng.normal(0.0, INIT_STD, (1, d)).astype(dtype)
        self.in_b = np.zeros(d, dtype=dtype)
        self.mlp_t = _MLP([d, d, d], "silu", rng, dtype, "den.t")
        self.mlp_z = _MLP([d, d, d], "silu", rng, dtype, "den.z")
        self.trunk = _MLP([d, d, d, d, 1], "silu", rng, dtype, "den.trunk")

    def named_parameters(self):
        out = [("den.in_W", self.in_W), ("den.in_b", self.in_b)]
        out += self.mlp_t.named_parameters()
        out += self.mlp_z.named_parameters()
        out += self.trunk.named_parameters()
        return out

    def forward(self, x_t, sigma, z):
        """x_t (B,), sigma (B,), z (B, d) -> (eps_hat (B,), trace)."""
        x_t = np.asarray(x_t, dtype=self.dtype).reshape(-1, 1)
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        pe = sinusoidal_embedding(sigma, self.d).astype(self.dtype)
        e_t, c_t = self.mlp_t.forward(pe)
        e_z, c_z = self.mlp_z.forward(z)
        e_x = x_t @ self.in_W + self.in_b
        combined = e_x + e_t + e_z
        out, c_trunk = self.trunk.forward(combined)
        trace = {"x_t": x_t, "c_t": c_t, "c_z": c_z, "c_trunk": c_trunk}
        return out[:, 0], trace

    def backward(self, trace, deps):
        """deps (B,) -> (dz (B, d), grads)."""
        deps = np.asarray(deps, dtype=self.dtype).reshape(-1, 1)
        dcombined, g_trunk = self.trunk.backward(trace["c_trunk"], deps)
        dz, g_z = self.mlp_z.backward(trace["c_z"], dcombined)
        _, g_t = self.mlp_t.backward(trace["c_t"], dcombined)
        grads = {
            "den.in_W": trace["x_t"].T @ dcombined,
            "den.in_b": dcombined.sum(axis=0),
        }
        grads.update(g_trunk)
        grads.update(g_z)
        grads.update(g_t)
        return dz, grads


def sample_training_sigma(rng: np.random.Generator, n: int) -> np.ndarray:
    """Training noise levels: ln sigma ~ N(-1.2, 1.2^2), clamped to
    [SIGMA_MIN, SIGMA_MAX]."""
    s = np.exp(rng.normal(LOGNORMAL_MEAN, LOGNORMAL_STD, size=n))
    return np.clip(s, SIGMA_MIN, SIGMA_MAX)


def perturb(x0, sigma, eps):
    """Variance-exploding forward process: x_t = x0 + sigma * eps."""
    return x0 + sigma * eps


def diffusion_loss_given(denoiser, x0, sigma, eps, z):
    """Deterministic per-row loss (eps_hat - eps)^2 with injected draws.

    Returns (losses (B,), trace, eps_hat) so the caller can backprop with
    dL/deps_hat = 2 * (eps_hat - eps) * row_weight.
    """
    x_t = perturb(np.asarray(x0, dtype=np.float64), sigma, eps)
    eps_hat, trace = denoiser.forward(x_t, sigma, z)
    losses = (eps_hat - eps) ** 2
    return losses, trace, eps_hat


def diffusion_loss(denoiser, x0: float, z, rng: np.random.Generator) -> float:
    """Single-row training loss with noise level and noise drawn from rng."""
    sigma = sample_training_sigma(rng, 1)
    eps = rng.standard_normal(1)
    losses, _, _ = diffusion_loss_given(denoiser, np.asarray([x0]), sigma, eps, z)
    return float(losses[0])
