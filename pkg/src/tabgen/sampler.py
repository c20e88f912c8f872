"""Any-order autoregressive generation, conditional completion, and
imputation.

Rows are generated column by column in a per-row random order (or a caller
supplied one): at each round the still-unknown columns are masked out, the
backbone produces a latent for every position, and the next column in the
order is sampled from its head. Categorical cells are multinomial draws from
the classifier softmax; continuous cells are produced by integrating the
deterministic probability-flow ODE of the variance-exploding process from
sigma_max down to 0 with an Euler solver on a curved noise ladder.

Randomness is organized as one child RNG stream per generated row (spawned
from the caller's generator), so results are reproducible for a fixed seed no
matter how rows are grouped internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    CONTINUOUS,
    EncodeError,
    RawTable,
    TableSchema,
    decode_value,
    _parse_float,
)
from .trainer import Model


class SamplingError(RuntimeError):
    """Generation produced a non-finite state."""


@dataclass
class SamplerConfig:
    n_steps: int = 50
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    k_impute: int = 10


def sigma_ladder(config: SamplerConfig) -> np.ndarray:
    """Decreasing noise levels sigma_0=sigma_max .. sigma_min, then a final 0."""
    n, rho = config.n_steps, config.rho
    i = np.arange(n, dtype=np.float64)
    hi = config.sigma_max ** (1.0 / rho)
    lo = config.sigma_min ** (1.0 / rho)
    ladder = (hi + (i / (n - 1)) * (lo - hi)) ** rho
    return np.append(ladder, 0.0)


def _euler_flow(denoiser, x0: np.ndarray, z: np.ndarray,
                ladder: np.ndarray) -> np.ndarray:
    """Integrate x' = eps_hat(x, sigma, z) along the decreasing sigma ladder.

    The probability-flow ODE of dx = -2*sigma'*sigma*score dt under the
    identity schedule reduces to dx = eps_hat d sigma since score = -eps/sigma.
    """
    x = np.asarray(x0, dtype=np.float64)
    g = len(x)
    for i in range(len(ladder) - 1):
        eps_hat, _ = denoiser.forward(x, np.full(g, ladder[i]), z)
        x = x + (ladder[i + 1] - ladder[i]) * eps_hat
    if not np.all(np.isfinite(x)):
        raise SamplingError("non-finite state in reverse flow")
    return x


def sample_continuous(denoiser, z: np.ndarray, rng: np.random.Generator,
                      config: SamplerConfig | None = None) -> float:
    """Draw one encoded continuous value conditioned on latent z."""
    config = config or SamplerConfig()
    ladder = sigma_ladder(config)
    x0 = rng.normal(0.0, ladder[0], size=1)
    z = np.atleast_2d(z)
    return float(_euler_flow(denoiser, x0, z, ladder)[0])


def sample_from_logits(logits: np.ndarray, u: float) -> int:
    """Invert the softmax CDF at u in [0,1)."""
    shifted = logits - np.max(logits)
    p = np.exp(shifted)
    p /= p.sum()
    cum = np.cumsum(p)
    return int(min(np.searchsorted(cum, u, side="right"), len(p) - 1))


def sample_discrete(head, z: np.ndarray, rng: np.random.Generator) -> int:
    """Multinomial draw from the head's softmax at latent z."""
    logits, _ = head.forward(np.atleast_2d(z))
    return sample_from_logits(logits[0], rng.random())


def random_order(D: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(D)


def _check_order(order, D: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(D)):
        raise ValueError(f"order must be a permutation of 0..{D - 1}")
    return order


def _plan_orders(streams: list, known: np.ndarray, order, D: int) -> list:
    """Visit order of the unknown columns for each row.

    With order=None each row shuffles all columns with its own stream and
    keeps the unknown ones; a fixed permutation is filtered the same way.
    """
    if order is not None:
        fixed = _check_order(order, D)
    orders = []
    for r in range(known.shape[0]):
        per_row = fixed if order is not None else streams[r].permutation(D)
        orders.append([int(j) for j in per_row if not known[r, j]])
    return orders


def _generate_encoded(model: Model, X: np.ndarray, known: np.ndarray,
                      streams: list, order, config: SamplerConfig) -> np.ndarray:
    """Fill the unknown cells of X in place, column by column.

    X is (B, D) encoded values (unknown cells hold a placeholder), known is a
    boolean (B, D) matrix, streams has one Generator per row. order is None
    for per-row random orders or a fixed permutation of all columns.
    """
    B, D = X.shape
    schema = model.schema
    ladder = sigma_ladder(config)
    orders = _plan_orders(streams, known, order, D)
    mask = (~known).astype(np.int8)
    max_rounds = max((len(o) for o in orders), default=0)
    for t in range(max_rounds):
        Z, _ = model.encode_latents(X, mask)
        targets = {}
        for r in range(B):
            if t < len(orders[r]):
                targets.setdefault(orders[r][t], []).append(r)
        for j in sorted(targets):
            rows = np.asarray(targets[j], dtype=np.int64)
            z = Z[rows, j, :]
            if schema.columns[j].kind == CONTINUOUS:
                x0 = np.array([streams[r].normal(0.0, ladder[0]) for r in rows])
                X[rows, j] = _euler_flow(model.denoiser, x0, z, ladder)
            else:
                logits, _ = model.heads[j].forward(z)
                for pos, r in enumerate(rows):
                    X[r, j] = sample_from_logits(logits[pos], streams[r].random())
            mask[rows, j] = 0
    return X


def generate_unconditional(model: Model, transforms: list, n: int,
                           rng: np.random.Generator, order=None,
                           config: SamplerConfig | None = None) -> RawTable:
    """Sample n fresh rows; every column is generated."""
    config = config or SamplerConfig()
    schema = model.schema
    D = schema.ncols
    X = np.zeros((n, D), dtype=np.float64)
    known = np.zeros((n, D), dtype=bool)
    streams = rng.spawn(n)
    _generate_encoded(model, X, known, streams, order, config)
    rows = [
        [decode_value(X[r, j], schema.columns[j], transforms[j]) for j in range(D)]
        for r in range(n)
    ]
    return RawTable(header=schema.names, rows=rows)


def _encode_observed(table: RawTable, schema: TableSchema, transforms: list):
    """Encode the non-missing cells; None cells are left to generate."""
    B, D = table.nrows, schema.ncols
    X = np.zeros((B, D), dtype=np.float64)
    known = np.zeros((B, D), dtype=bool)
    for j, (col, tf) in enumerate(zip(schema.columns, transforms)):
        for r, row in enumerate(table.rows):
            cell = row[j]
            if cell is None:
                continue
            if col.kind == CONTINUOUS:
                v = _parse_float(cell) if isinstance(cell, str) else float(cell)
                if v is None:
                    raise EncodeError(
                        f"column {col.name!r}: non-numeric value {cell!r}"
                    )
                X[r, j] = tf.encode(np.asarray([v]))[0]
            else:
                X[r, j] = tf.encode_one(cell, col.name)
            known[r, j] = True
    return X, known


def _complete_rows(model: Model, transforms: list, table: RawTable,
                   streams: list, config: SamplerConfig) -> list:
    """Conditional generation over a batch; returns rows with observed cells
    passed through verbatim and generated cells decoded."""
    schema = model.schema
    X, known = _encode_observed(table, schema, transforms)
    _generate_encoded(model, X, known, streams, None, config)
    out = []
    for r, row in enumerate(table.rows):
        cells = []
        for j in range(schema.ncols):
            if known[r, j]:
                cells.append(row[j])
            else:
                cells.append(
                    decode_value(X[r, j], schema.columns[j], transforms[j])
                )
        out.append(cells)
    return out


def generate_conditional(model: Model, transforms: list, row: list,
                         rng: np.random.Generator,
                         config: SamplerConfig | None = None) -> list:
    """Complete one partial row (None marks cells to generate).

    Observed cells come back unchanged, byte for byte.
    """
    config = config or SamplerConfig()
    table = RawTable(header=model.schema.names, rows=[list(row)])
    return _complete_rows(model, transforms, table, rng.spawn(1), config)[0]


def complete_table(model: Model, transforms: list, table: RawTable,
                   rng: np.random.Generator,
                   config: SamplerConfig | None = None) -> RawTable:
    """generate_conditional over every row of a table, one stream per row."""
    config = config or SamplerConfig()
    rows = _complete_rows(model, transforms, table, rng.spawn(table.nrows), config)
    return RawTable(header=list(table.header), rows=rows)


def impute(model: Model, transforms: list, table: RawTable,
           rng: np.random.Generator, k: int | None = None,
           config: SamplerConfig | None = None) -> RawTable:
    """Fill missing cells by aggregating k conditional draws per row.

    Continuous cells take the mean of the k decoded draws; categorical cells
    take the most frequent draw, ties broken toward the lowest category index.
    Observed cells pass through untouched.
    """
    config = config or SamplerConfig()
    if k is None:
        k = config.k_impute
    if k < 1:
        raise ValueError("k must be >= 1")
    schema = model.schema
    B, D = table.nrows, schema.ncols
    X, known = _encode_observed(table, schema, transforms)
    Xk = np.repeat(X, k, axis=0)
    knownk = np.repeat(known, k, axis=0)
    streams = rng.spawn(B * k)
    _generate_encoded(model, Xk, knownk, streams, None, config)
    out = []
    for r, row in enumerate(table.rows):
        cells = []
        draws = Xk[r * k:(r + 1) * k]
        for j, (col, tf) in enumerate(zip(schema.columns, transforms)):
            if known[r, j]:
                cells.append(row[j])
                continue
            if col.kind == CONTINUOUS:
                decoded = tf.decode(draws[:, j])
                cells.append(float(decoded.mean()))
            else:
                votes = np.bincount(
                    draws[:, j].astype(np.int64), minlength=col.cardinality
                )
                cells.append(decode_value(int(votes.argmax()), col, tf))
        out.append(cells)
    return RawTable(header=schema.names, rows=out)
