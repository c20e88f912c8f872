"""Bidirectional pre-LayerNorm transformer encoder with exact reverse-mode
gradients, written directly in numpy.

Each block applies x <- x + MHSA(LN(x)) then x <- x + FFN(LN(x)) with a GELU
feed-forward of hidden width 4d. Attention is full and bidirectional; the pad
token (sequence position 0) attends and is attended to like any column token,
but its final output row is discarded. There is no dropout and no final
normalization, so a depth-0 model is the identity.

forward() returns a ForwardTrace caching every intermediate needed by
backward(); gradients are exact (they match central finite differences, which
the tests enforce).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

LN_EPS = 1e-5
INIT_STD = 0.02
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_BLOCK_KEYS = (
    "ln1_g", "ln1_b", "Wq", "Wk", "Wv", "Wo",
    "ln2_g", "ln2_b", "W1", "b1", "W2", "b2",
)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, xhat, inv


def _ln_backward(dout, g, xhat, inv):
    axes = tuple(range(dout.ndim - 1))
    dg = (dout * xhat).sum(axis=axes)
    db = dout.sum(axis=axes)
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu_forward(u):
    phi = ndtr(u)
    return (u * phi).astype(u.dtype), phi


def _gelu_backward(u, phi):
    pdf = np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    return (phi + u * pdf).astype(u.dtype)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    B, S, d = x.shape
    hd = d // n_heads
    return x.reshape(B, S, n_heads, hd).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, S, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, nh * hd)


@dataclass
class ForwardTrace:
    """Per-block activation caches from one forward pass."""

    x0: np.ndarray
    blocks: list
    out_shape: tuple
    single: bool


class Transformer:
    """Stack of pre-LN self-attention blocks over the token sequence."""

    def __init__(self, d: int, depth: int, n_heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        if d % n_heads != 0:
            raise ValueError(f"width {d} not divisible by {n_heads} heads")
        self.d = d
        self.depth = depth
        self.n_heads = n_heads
        self.dtype = dtype
        self.blocks = []
        for _ in range(depth):
            blk = {
                "ln1_g": np.ones(d, dtype=dtype),
                "ln1_b": np.zeros(d, dtype=dtype),
                "Wq": rng.normal(0.0, INIT_STD, (d, d)).astype(dtype),
                "Wk": rng.normal(0.0, INIT_STD, (d, d)).astype(dtype),
                "Wv": rng.normal(0.0, INIT_STD, (d, d)).astype(dtype),
                "Wo": rng.normal(0.0, INIT_STD, (d, d)).astype(dtype),
                "ln2_g": np.ones(d, dtype=dtype),
                "ln2_b": np.zeros(d, dtype=dtype),
                "W1": rng.normal(0.0, INIT_STD, (d, 4 * d)).astype(dtype),
                "b1": np.zeros(4 * d, dtype=dtype),
                "W2": rng.normal(0.0, INIT_STD, (4 * d, d)).astype(dtype),
                "b2": np.zeros(d, dtype=dtype),
            }
            self.blocks.append(blk)

    def named_parameters(self):
        return [
            (f"tf.{b}.{k}", blk[k])
            for b, blk in enumerate(self.blocks)
            for k in _BLOCK_KEYS
        ]

    def forward(self, tokens: np.ndarray):
        """Token sequence (B, D+1, d) or (D+1, d) -> (Z rows 1..D, trace)."""
        single = tokens.ndim == 2
        x = np.asarray(tokens, dtype=self.dtype)
        if single:
            x = x[None, :, :]
        if x.shape[-1] != self.d:
            raise ValueError(
                f"token width {x.shape[-1]} does not match model width {self.d}"
            )
        scale = 1.0 / math.sqrt(self.d // self.n_heads)
        x0 = x
        caches = []
        for blk in self.blocks:
            c = {"x_in": x}
            xn, xhat1, inv1 = _ln_forward(x, blk["ln1_g"], blk["ln1_b"])
            c.update(xhat1=xhat1, inv1=inv1, xn=xn)
            q = _split_heads(xn @ blk["Wq"], self.n_heads)
            k = _split_heads(xn @ blk["Wk"], self.n_heads)
            v = _split_heads(xn @ blk["Wv"], self.n_heads)
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            attn = _softmax(scores)
            heads = attn @ v
            concat = _merge_heads(heads)
            c.update(q=q, k=k, v=v, attn=attn, concat=concat)
            x = x + concat @ blk["Wo"]
            c["x_mid"] = x
            xn2, xhat2, inv2 = _ln_forward(x, blk["ln2_g"], blk["ln2_b"])
            c.update(xhat2=xhat2, inv2=inv2, xn2=xn2)
            u = xn2 @ blk["W1"] + blk["b1"]
            a, phi = _gelu_forward(u)
            c.update(u=u, phi=phi, a=a)
            x = x + a @ blk["W2"] + blk["b2"]
            caches.append(c)
        z = x[:, 1:, :]
        trace = ForwardTrace(x0=x0, blocks=caches, out_shape=z.shape, single=single)
        if single:
            return z[0], trace
        return z, trace

    def backward(self, trace: ForwardTrace, dz: np.ndarray):
        """Seed gradient dL/dZ -> (dL/dtokens, {param name: grad})."""
        dz = np.asarray(dz, dtype=self.dtype)
        if trace.single:
            dz = dz[None, :, :]
        if dz.shape != trace.out_shape:
            raise ValueError(
                f"gradient shape {dz.shape} does not match forward output "
                f"{trace.out_shape}"
            )
        B, S = trace.x0.shape[0], trace.x0.shape[1]
        scale = 1.0 / math.sqrt(self.d // self.n_heads)
        dx = np.zeros((B, S, self.d), dtype=self.dtype)
        dx[:, 1:, :] = dz
        grads = {}
        for b in range(self.depth - 1, -1, -1):
            blk, c = self.blocks[b], trace.blocks[b]
            pre = f"tf.{b}."
            # FFN sublayer: x_out = x_mid + gelu(LN2(x_mid) @ W1 + b1) @ W2 + b2
            da = dx @ blk["W2"].T
            grads[pre + "W2"] = np.einsum("bsh,bsd->hd", c["a"], dx)
            grads[pre + "b2"] = dx.sum(axis=(0, 1))
            du = da * _gelu_backward(c["u"], c["phi"])
            grads[pre + "W1"] = np.einsum("bsd,bsh->dh", c["xn2"], du)
            grads[pre + "b1"] = du.sum(axis=(0, 1))
            dxn2 = du @ blk["W1"].T
            dmid_ln, dg2, db2 = _ln_backward(dxn2, blk["ln2_g"], c["xhat2"], c["inv2"])
            grads[pre + "ln2_g"] = dg2
            grads[pre + "ln2_b"] = db2
            dx = dx + dmid_ln
            # attention sublayer: x_mid = x_in + merge(attn @ V) @ Wo
            grads[pre + "Wo"] = np.einsum("bsd,bse->de", c["concat"], dx)
            dconcat = dx @ blk["Wo"].T
            dheads = _split_heads(dconcat, self.n_heads)
            dattn = dheads @ c["v"].transpose(0, 1, 3, 2)
            dv = c["attn"].transpose(0, 1, 3, 2) @ dheads
            tmp = (dattn * c["attn"]).sum(axis=-1, keepdims=True)
            dscores = c["attn"] * (dattn - tmp) * scale
            dq = dscores @ c["k"]
            dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
            dq_f = _merge_heads(dq)
            dk_f = _merge_heads(dk)
            dv_f = _merge_heads(dv)
            grads[pre + "Wq"] = np.einsum("bsd,bse->de", c["xn"], dq_f)
            grads[pre + "Wk"] = np.einsum("bsd,bse->de", c["xn"], dk_f)
            grads[pre + "Wv"] = np.einsum("bsd,bse->de", c["xn"], dv_f)
            dxn = dq_f @ blk["Wq"].T + dk_f @ blk["Wk"].T + dv_f @ blk["Wv"].T
            din_ln, dg1, db1 = _ln_backward(dxn, blk["ln1_g"], c["xhat1"], c["inv1"])
            grads[pre + "ln1_g"] = dg1
            grads[pre + "ln1_b"] = db1
            dx = dx + din_ln
        if trace.single:
            return dx[0], grads
        return dx, grads
