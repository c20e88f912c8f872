"""Joint training of embedder, backbone, and heads on masked rows, plus
checkpoint serialization.

Each step samples one mask per row (M ~ Uniform{1..D}, then a uniform size-M
column subset), zeroes the masked tokens, runs the backbone, and scores only
the masked cells: cross-entropy at categorical cells, denoising MSE at
continuous cells. The step loss is the mean over rows of the per-row sum over
masked cells. All parameters take one Adam step jointly, with decoupled
weight decay (layer-norm parameters and the pad vector exempt) and a
global-norm gradient clip.
"""

from __future__ import annotations

import io
import json
import struct
import sys
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import CONTINUOUS, TableSchema, EncodedTable, transform_from_json_obj
from .heads import Denoiser, DiscreteHead, cross_entropy, diffusion_loss_given, \
    sample_training_sigma
from .tokenizer import TokenEmbedder, apply_mask
from .transformer import Transformer

CHECKPOINT_MAGIC = b"TDAR"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training failure."""


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the reference setup."""

    lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 5000
    batch_size: int = 4096
    depth: int = 6
    d: int = 32
    n_heads: int = 4
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 100
    min_lr: float = 1e-5
    clip_norm: float = 1.0

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


class Model:
    """Embedder + transformer + per-column heads + shared denoiser."""

    def __init__(self, schema: TableSchema, config: TrainConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.schema = schema
        self.config = config
        self.dtype = dtype
        d = config.d
        self.embedder = TokenEmbedder(schema, d, rng, dtype=dtype)
        self.transformer = Transformer(d, config.depth, config.n_heads, rng,
                                       dtype=dtype)
        self.heads = {}
        for i, col in enumerate(schema.columns):
            if col.kind != CONTINUOUS:
                self.heads[i] = DiscreteHead(d, col.cardinality, rng,
                                             dtype=dtype, name=f"head.{i}")
        self.denoiser = Denoiser(d, rng, dtype=dtype)

    def named_parameters(self):
        params = list(self.embedder.named_parameters())
        params += self.transformer.named_parameters()
        for i in sorted(self.heads):
            params += self.heads[i].named_parameters()
        params += self.denoiser.named_parameters()
        return params

    def encode_latents(self, rows: np.ndarray, masks: np.ndarray):
        """tokenize -> mask -> pad -> backbone. Returns (Z (B,D,d), caches)."""
        H = self.embedder.tokenize_batch(rows)
        Hm = apply_mask(H, masks)
        T = self.embedder.prepend_pad(Hm)
        Z, trace = self.transformer.forward(T)
        return Z, trace


def sample_mask(D: int, rng: np.random.Generator) -> np.ndarray:
    """One training mask: M ~ Uniform{1..D}, then a uniform size-M subset."""
    M = int(rng.integers(1, D + 1))
    m = np.zeros(D, dtype=np.int8)
    m[rng.choice(D, size=M, replace=False)] = 1
    return m


def sample_mask_batch(B: int, D: int, rng: np.random.Generator) -> np.ndarray:
    """B independent masks with the same law as sample_mask.

    The M smallest of D i.i.d. uniform keys form a uniform size-M subset.
    """
    M = rng.integers(1, D + 1, size=B)
    keys = rng.random((B, D))
    thresh = np.sort(keys, axis=1)[np.arange(B), M - 1]
    return (keys <= thresh[:, None]).astype(np.int8)


def masked_loss_and_grads(model: Model, batch: np.ndarray, masks: np.ndarray,
                          sigma_mat: np.ndarray, eps_mat: np.ndarray,
                          compute_grads: bool = True):
    """Deterministic loss (and gradients) given injected noise draws.

    batch is (B, D) encoded rows; masks (B, D) in {0,1}; sigma_mat/eps_mat are
    (B, D) and read only at masked continuous cells.
    """
    B, D = batch.shape
    schema = model.schema
    Z, tf_trace = model.encode_latents(batch, masks)
    total = 0.0
    backprops = []
    inv_b = 1.0 / B
    for i, col in enumerate(schema.columns):
        rows = np.nonzero(masks[:, i] == 1)[0]
        if len(rows) == 0:
            continue
        z_i = Z[rows, i, :]
        if col.kind == CONTINUOUS:
            sig = sigma_mat[rows, i]
            eps = eps_mat[rows, i]
            losses, trace, eps_hat = diffusion_loss_given(
                model.denoiser, batch[rows, i], sig, eps, z_i
            )
            col_loss = float(losses.sum())
            backprops.append(("den", i, rows, trace, 2.0 * (eps_hat - eps) * inv_b))
        else:
            logits, trace = model.heads[i].forward(z_i)
            losses, dlogits = cross_entropy(logits, batch[rows, i])
            col_loss = float(losses.sum())
            backprops.append(("cat", i, rows, trace, dlogits * inv_b))
        if not np.isfinite(col_loss):
            raise TrainingError(
                f"non-finite loss at column {col.name!r}"
            )
        total += col_loss
    loss = total * inv_b
    if not compute_grads:
        return loss, None
    grads = {}
    dZ = np.zeros_like(Z)
    for kind, i, rows, trace, seed in backprops:
        if kind == "den":
            dz, g = model.denoiser.backward(trace, seed)
        else:
            dz, g = model.heads[i].backward(trace, seed)
        dZ[rows, i, :] += dz
        for k, v in g.items():
            if k in grads:
                grads[k] += v
            else:
                grads[k] = v
    dT, tf_grads = model.transformer.backward(tf_trace, dZ)
    grads.update(tf_grads)
    grads["emb.pad"] = dT[:, 0, :].sum(axis=0)
    dH = dT[:, 1:, :].copy()
    dH[masks == 1] = 0.0
    grads.update(model.embedder.tokenize_backward(batch, dH))
    return loss, grads


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    sq = 0.0
    for g in grads.values():
        sq += float((np.asarray(g, dtype=np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Weight decay skips layer-norm gains/biases and the pad vector.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params, weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p) for name, p in self.params}
        self.v = {name: np.zeros_like(p) for name, p in self.params}
        self.t = 0

    @staticmethod
    def _decay_exempt(name: str) -> bool:
        return ".ln" in name or name == "emb.pad"

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.BETA1 ** self.t
        bc2 = 1.0 - self.BETA2 ** self.t
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay and not self._decay_exempt(name):
                p -= lr * self.weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + self.EPS)


class PlateauScheduler:
    """Halve the learning rate after `patience` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int, min_lr: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


def train_step(model: Model, batch: np.ndarray, opt: Adam, lr: float,
               rng: np.random.Generator, clip_norm: float = 1.0) -> float:
    """One optimization step on a batch of encoded rows; returns the loss."""
    B, D = batch.shape
    masks = sample_mask_batch(B, D, rng)
    sigma_mat = sample_training_sigma(rng, B * D).reshape(B, D)
    eps_mat = rng.standard_normal((B, D))
    loss, grads = masked_loss_and_grads(model, batch, masks, sigma_mat, eps_mat)
    if clip_norm:
        clip_global_norm(grads, clip_norm)
    opt.step(grads, lr)
    return loss


def train(dataset: EncodedTable, config: TrainConfig,
          progress=None) -> tuple[Model, "Checkpoint"]:
    """Full training loop; emits one JSON progress record per epoch.

    Returns the trained model and its checkpoint (final parameters).
    """
    if progress is None:
        progress = sys.stderr
    X = dataset.values
    N = X.shape[0]
    if N == 0:
        raise TrainingError("empty dataset")
    config = replace(config, batch_size=min(config.batch_size, N))
    rng = np.random.default_rng(config.seed)
    model = Model(dataset.schema, config, rng)
    opt = Adam(model.named_parameters(), weight_decay=config.weight_decay)
    sched = PlateauScheduler(config.lr, config.plateau_factor,
                             config.plateau_patience, config.min_lr)
    lr = config.lr
    B = config.batch_size
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(N)
        total, seen = 0.0, 0
        for start in range(0, N, B):
            idx = perm[start:start + B]
            loss = train_step(model, X[idx], opt, lr, rng, config.clip_norm)
            total += loss * len(idx)
            seen += len(idx)
        mean_loss = total / seen
        lr = sched.step(mean_loss)
        if progress is not None:
            print(json.dumps({"epoch": epoch, "mean_loss": mean_loss, "lr": lr}),
                  file=progress, flush=True)
    ckpt = checkpoint_from_model(model, dataset.transforms, config,
                                 epoch=config.epochs)
    return model, ckpt


@dataclass
class Checkpoint:
    """Schema, transforms, config, and all parameter tensors (f32)."""

    schema: TableSchema
    transforms: list
    config: TrainConfig
    epoch: int
    tensors: dict


def checkpoint_from_model(model: Model, transforms: list, config: TrainConfig,
                          epoch: int) -> Checkpoint:
    tensors = {
        name: np.ascontiguousarray(p, dtype="<f4")
        for name, p in model.named_parameters()
    }
    return Checkpoint(schema=model.schema, transforms=transforms,
                      config=config, epoch=epoch, tensors=tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = Model(ckpt.schema, ckpt.config, np.random.default_rng(ckpt.config.seed))
    for name, p in model.named_parameters():
        if name not in ckpt.tensors:
            raise ShapeMismatchError(f"checkpoint missing tensor {name!r}")
        t = ckpt.tensors[name]
        if tuple(t.shape) != tuple(p.shape):
            raise ShapeMismatchError(
                f"tensor {name!r}: checkpoint shape {tuple(t.shape)} != "
                f"model shape {tuple(p.shape)}"
            )
        p[...] = t
    return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    directory = []
    payload = io.BytesIO()
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.write(raw)
        offset += len(raw)
    header = {
        "schema": ckpt.schema.to_json_obj(),
        "transforms": [tf.to_json_obj() for tf in ckpt.transforms],
        "config": ckpt.config.to_json_obj(),
        "epoch": ckpt.epoch,
        "tensors": directory,
    }
    hdr = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise TruncatedCheckpointError(f"{path}: file shorter than fixed header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported checkpoint version {version}"
        )
    (hdr_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hdr_len:
        raise TruncatedCheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(blob[16:16 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = blob[16 + hdr_len:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: tensor {entry['name']!r} extends past end of file"
            )
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        tensors[entry["name"]] = arr
    return Checkpoint(
        schema=TableSchema.from_json_obj(header["schema"]),
        transforms=[transform_from_json_obj(o) for o in header["transforms"]],
        config=TrainConfig.from_json_obj(header["config"]),
        epoch=header["epoch"],
        tensors=tensors,
    )
