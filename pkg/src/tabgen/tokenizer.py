"""Per-column token embedding, mask application, and pad prepending.

Each encoded cell becomes a d-dimensional token: continuous cells through a
learnable 1->d linear map, categorical cells by selecting the row of a
learnable embedding table. A column-specific positional vector is added
before masking, so masked positions are exactly the zero vector and carry no
column identity into the backbone.
"""

from __future__ import annotations

import numpy as np

from .data import CONTINUOUS, TableSchema

INIT_STD = 0.02


class TokenEmbedder:
    """Column-wise linear tokenizers plus positional and pad vectors.

    weights[i] has shape (1, d) for a continuous column and (K_i, d) for a
    categorical column with K_i categories.
    """

    def __init__(self, schema: TableSchema, d: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.schema = schema
        self.d = d
        self.dtype = dtype
        self.weights = []
        for col in schema.columns:
            rows = 1 if col.kind == CONTINUOUS else col.cardinality
            self.weights.append(
                rng.normal(0.0, INIT_STD, size=(rows, d)).astype(dtype)
            )
        self.positions = rng.normal(0.0, INIT_STD, size=(schema.ncols, d)).astype(dtype)
        self.pad = rng.normal(0.0, INIT_STD, size=(d,)).astype(dtype)
        self._cont = np.array(
            [col.kind == CONTINUOUS for col in schema.columns], dtype=bool
        )

    def named_parameters(self):
        params = [(f"emb.W.{i}", w) for i, w in enumerate(self.weights)]
        params.append(("emb.pos", self.positions))
        params.append(("emb.pad", self.pad))
        return params

    def tokenize_batch(self, rows: np.ndarray) -> np.ndarray:
        """Encoded rows (B, D) -> tokens (B, D, d), positional vectors added."""
        rows = np.atleast_2d(np.asarray(rows))
        B, D = rows.shape
        H = np.empty((B, D, self.d), dtype=self.dtype)
        for i, w in enumerate(self.weights):
            if self._cont[i]:
                H[:, i, :] = rows[:, i, None].astype(self.dtype) * w[0]
            else:
                idx = rows[:, i].astype(np.int64)
                H[:, i, :] = w[idx]
        H += self.positions
        return H

    def tokenize(self, row: np.ndarray) -> np.ndarray:
        """Single encoded row (D,) -> (D, d)."""
        return self.tokenize_batch(row[None, :])[0]

    def tokenize_backward(self, rows: np.ndarray, dH: np.ndarray) -> dict:
        """Gradients of the tokenize output w.r.t. embedder parameters.

        dH is (B, D, d), typically already zeroed at masked positions by the
        mask's backward rule.
        """
        rows = np.atleast_2d(np.asarray(rows))
        grads = {}
        for i, w in enumerate(self.weights):
            if self._cont[i]:
                grads[f"emb.W.{i}"] = (rows[:, i, None] * dH[:, i, :]).sum(
                    axis=0, keepdims=True
                )
            else:
                g = np.zeros_like(w)
                idx = rows[:, i].astype(np.int64)
                np.add.at(g, idx, dH[:, i, :])
                grads[f"emb.W.{i}"] = g
        grads["emb.pos"] = dH.sum(axis=0)
        return grads

    def prepend_pad(self, H: np.ndarray) -> np.ndarray:
        """(B, D, d) or (D, d) -> same with the pad vector as row 0."""
        if H.ndim == 2:
            return np.concatenate([self.pad[None, :], H], axis=0)
        B = H.shape[0]
        out = np.empty((B, H.shape[1] + 1, H.shape[2]), dtype=H.dtype)
        out[:, 0, :] = self.pad
        out[:, 1:, :] = H
        return out


def apply_mask(H: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Zero token rows where the mask is 1.

    Masked rows are assigned exactly 0.0 (not multiplied), so the output is
    bitwise independent of the masked tokens' values.
    """
    out = H.copy()
    mask = np.asarray(m, dtype=bool)
    out[mask] = 0.0
    return out
