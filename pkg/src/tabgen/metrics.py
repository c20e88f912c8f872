"""Fidelity and privacy metrics between a real table and a synthetic table.

Marginals: Kolmogorov-Smirnov statistic for continuous columns, total
variation distance for categorical columns. Joints: Pearson-correlation gap
for continuous pairs, contingency-table distance for categorical pairs, and
quartile-binned contingency for mixed pairs. Plus a classifier two-sample
test (logistic regression, 5-fold AUC), a distance-to-closest-record privacy
probability, and per-column Jensen-Shannon divergence.

Missing cells: categorical metrics count them as the reserved missing
category; continuous marginal metrics drop them; the classifier test fills
them with the combined column mean.

All scores live in [0, 1]; lower means the synthetic table is closer to the
real one (dcr_probability instead has an ideal value of 0.5).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import CONTINUOUS, MISSING_TOKEN, RawTable, TableSchema

JSD_BINS = 50


class MetricError(ValueError):
    """Invalid metric input (empty sample, size mismatch)."""


def _float(cell) -> float:
    return float(cell) if not isinstance(cell, float) else cell


def _cont_column(table: RawTable, j: int) -> np.ndarray:
    vals = [_float(c) for c in table.column(j) if c is not None]
    return np.asarray(vals, dtype=np.float64)


def _cat_column(table: RawTable, j: int) -> list:
    return [MISSING_TOKEN if c is None else str(c) for c in table.column(j)]


def kst(real: np.ndarray, synthetic: np.ndarray) -> float:
    """sup_x |F_real(x) - F_syn(x)| over the merged sample."""
    real = np.asarray(real, dtype=np.float64)
    synthetic = np.asarray(synthetic, dtype=np.float64)
    if len(real) == 0 or len(synthetic) == 0:
        raise MetricError("kst requires non-empty samples")
    rs = np.sort(real)
    ss = np.sort(synthetic)
    grid = np.concatenate([rs, ss])
    cdf_r = np.searchsorted(rs, grid, side="right") / len(rs)
    cdf_s = np.searchsorted(ss, grid, side="right") / len(ss)
    return float(np.max(np.abs(cdf_r - cdf_s)))


def _freqs(values, support):
    idx = {v: i for i, v in enumerate(support)}
    counts = np.zeros(len(support), dtype=np.float64)
    for v in values:
        counts[idx[v]] += 1
    return counts / counts.sum()


def tvd(real, synthetic) -> float:
    """Half the L1 distance between category frequencies (union support)."""
    real = list(real)
    synthetic = list(synthetic)
    if not real or not synthetic:
        raise MetricError("tvd requires non-empty samples")
    support = sorted(set(real) | set(synthetic))
    return float(0.5 * np.abs(_freqs(real, support) - _freqs(synthetic, support)).sum())


def _pearson(x: np.ndarray, y: np.ndarray):
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def pearson_pair_score(rx, ry, sx, sy) -> float:
    """|rho_real - rho_syn| / 2 for one continuous pair; 0.5 if undefined."""
    rho_r = _pearson(np.asarray(rx, float), np.asarray(ry, float))
    rho_s = _pearson(np.asarray(sx, float), np.asarray(sy, float))
    if rho_r is None or rho_s is None:
        warnings.warn("constant column in Pearson pair; scoring 0.5")
        return 0.5
    return abs(rho_r - rho_s) / 2.0


def pearson_score(real: RawTable, synthetic: RawTable, schema: TableSchema):
    """Per-pair |correlation gap|/2 over continuous pairs, plus the average."""
    cont = schema.continuous_indices()
    pairs = {}
    for a in range(len(cont)):
        for b in range(a + 1, len(cont)):
            i, j = cont[a], cont[b]
            key = f"{schema.columns[i].name}|{schema.columns[j].name}"
            pairs[key] = pearson_pair_score(
                _cont_column(real, i), _cont_column(real, j),
                _cont_column(synthetic, i), _cont_column(synthetic, j),
            )
    avg = float(np.mean(list(pairs.values()))) if pairs else None
    return pairs, avg


def contingency_score(real_pair, synthetic_pair) -> float:
    """Half L1 distance between joint frequency tables (union support)."""
    real_pair = list(real_pair)
    synthetic_pair = list(synthetic_pair)
    if not real_pair or not synthetic_pair:
        raise MetricError("contingency_score requires non-empty samples")
    support = sorted(set(real_pair) | set(synthetic_pair))
    return float(
        0.5 * np.abs(_freqs(real_pair, support) - _freqs(synthetic_pair, support)).sum()
    )


def _quartile_bins(values: np.ndarray, edges: np.ndarray) -> list:
    return [f"q{k}" for k in np.digitize(values, edges)]


def _mixed_pair(real_cont, real_cat, syn_cont, syn_cat):
    """Bin the continuous side on real-data quartiles, then contingency."""
    edges = np.quantile(real_cont, [0.25, 0.5, 0.75])
    rb = _quartile_bins(real_cont, edges)
    sb = _quartile_bins(syn_cont, edges)
    return contingency_score(list(zip(rb, real_cat)), list(zip(sb, syn_cat)))


def joint_report(real: RawTable, synthetic: RawTable, schema: TableSchema):
    """Pairwise column-dependence scores and their average.

    A single-column table has no pairs; the average is reported absent.
    """
    pairs = {}
    D = schema.ncols
    for i in range(D):
        for j in range(i + 1, D):
            ci, cj = schema.columns[i], schema.columns[j]
            key = f"{ci.name}|{cj.name}"
            if ci.kind == CONTINUOUS and cj.kind == CONTINUOUS:
                pairs[key] = pearson_pair_score(
                    _cont_column(real, i), _cont_column(real, j),
                    _cont_column(synthetic, i), _cont_column(synthetic, j),
                )
            elif ci.kind != CONTINUOUS and cj.kind != CONTINUOUS:
                pairs[key] = contingency_score(
                    list(zip(_cat_column(real, i), _cat_column(real, j))),
                    list(zip(_cat_column(synthetic, i), _cat_column(synthetic, j))),
                )
            else:
                if ci.kind == CONTINUOUS:
                    cont_i, cat_j = i, j
                else:
                    cont_i, cat_j = j, i
                pairs[key] = _mixed_pair(
                    _cont_column(real, cont_i), _cat_column(real, cat_j),
                    _cont_column(synthetic, cont_i), _cat_column(synthetic, cat_j),
                )
    avg = float(np.mean(list(pairs.values()))) if pairs else None
    return pairs, avg


def _feature_matrix(tables, schema: TableSchema):
    """Standardized continuous + one-hot categorical features, shared layout.

    Continuous statistics and category supports come from the concatenation
    of all given tables, so every table maps into the same feature space.
    """
    cols = []
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            combined = np.concatenate([_cont_column(t, j) for t in tables])
            mu = combined.mean() if len(combined) else 0.0
            sd = combined.std() if len(combined) else 1.0
            if sd == 0.0:
                sd = 1.0
            blocks = []
            for t in tables:
                raw = [
                    mu if c is None else _float(c) for c in t.column(j)
                ]
                blocks.append(((np.asarray(raw) - mu) / sd)[:, None])
            cols.append(blocks)
        else:
            support = sorted(
                {v for t in tables for v in _cat_column(t, j)}
            )
            index = {v: k for k, v in enumerate(support)}
            blocks = []
            for t in tables:
                onehot = np.zeros((t.nrows, len(support)))
                for r, v in enumerate(_cat_column(t, j)):
                    onehot[r, index[v]] = 1.0
                blocks.append(onehot)
            cols.append(blocks)
    mats = []
    for ti in range(len(tables)):
        mats.append(np.hstack([blocks[ti] for blocks in cols]))
    return mats


def _logreg_fit(X, y, iters=300, lr=0.5):
    """Full-batch gradient-descent logistic regression; returns (w, b)."""
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(iters):
        logits = X @ w + b
        p = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
        err = p - y
        w -= lr * (X.T @ err) / n
        b -= lr * err.mean()
    return w, b


def _auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    ranks = rankdata(scores)
    return (ranks[labels == 1].sum() - n1 * (n1 + 1) / 2) / (n0 * n1)


def c2st(real: RawTable, synthetic: RawTable, schema: TableSchema,
         seed: int = 0) -> float:
    """Classifier two-sample test: 5-fold CV AUC a, score max(0, 2a - 1)."""
    if real.nrows < 50 or synthetic.nrows < 50:
        raise MetricError("c2st requires at least 50 rows per table")
    Xr, Xs = _feature_matrix([real, synthetic], schema)
    X = np.vstack([Xr, Xs])
    y = np.concatenate([np.zeros(len(Xr)), np.ones(len(Xs))])
    n_folds = 5
    for attempt in range(3):
        rng = np.random.default_rng(seed + attempt)
        perm = rng.permutation(len(X))
        folds = np.array_split(perm, n_folds)
        if any(
            len(np.unique(y[np.concatenate([folds[k] for k in range(n_folds) if k != i])])) < 2
            or len(np.unique(y[folds[i]])) < 2
            for i in range(n_folds)
        ):
            continue
        aucs = []
        for i in range(n_folds):
            test_idx = folds[i]
            train_idx = np.concatenate([folds[k] for k in range(n_folds) if k != i])
            w, b = _logreg_fit(X[train_idx], y[train_idx])
            scores = X[test_idx] @ w + b
            aucs.append(_auc(scores, y[test_idx]))
        a = float(np.mean(aucs))
        return max(0.0, 2.0 * a - 1.0)
    raise MetricError("c2st: degenerate single-class fold after 3 attempts")


def _dcr_distances(A: np.ndarray, B: np.ndarray, cat_mask: np.ndarray) -> np.ndarray:
    """Min distance from each row of A to the rows of B.

    Distance = sqrt(sum of squared continuous gaps) + count of categorical
    mismatches; columns flagged by cat_mask are categorical.
    """
    cont = ~cat_mask
    out = np.empty(len(A))
    Bc = B[:, cont]
    Bk = B[:, cat_mask]
    for i, row in enumerate(A):
        d2 = ((Bc - row[cont]) ** 2).sum(axis=1)
        ham = (Bk != row[cat_mask]).sum(axis=1)
        out[i] = (np.sqrt(d2) + ham).min()
    return out


def _dcr_encode(table: RawTable, schema: TableSchema, stats):
    cols = []
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            mu, sd = stats[j]
            raw = np.asarray(
                [mu if c is None else _float(c) for c in table.column(j)]
            )
            cols.append((raw - mu) / sd)
        else:
            vals = _cat_column(table, j)
            support = stats[j]
            cols.append(np.asarray([support.get(v, -1) for v in vals], float))
    return np.column_stack(cols)


def dcr_probability(train: RawTable, holdout: RawTable, synthetic: RawTable,
                    schema: TableSchema) -> float:
    """Fraction of synthetic rows closer to the train half than the holdout
    half (ties count 0.5); 0.5 means no memorization signal."""
    if train.nrows == 0 or holdout.nrows == 0 or synthetic.nrows == 0:
        raise MetricError("dcr_probability requires non-empty tables")
    if train.nrows != holdout.nrows:
        raise MetricError("train and holdout halves must be equal-sized")
    stats = {}
    cat_mask = np.zeros(schema.ncols, dtype=bool)
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            vals = _cont_column(train, j)
            sd = vals.std()
            stats[j] = (vals.mean(), sd if sd > 0 else 1.0)
        else:
            cat_mask[j] = True
            support = sorted(
                set(_cat_column(train, j))
                | set(_cat_column(holdout, j))
                | set(_cat_column(synthetic, j))
            )
            stats[j] = {v: k for k, v in enumerate(support)}
    S = _dcr_encode(synthetic, schema, stats)
    T = _dcr_encode(train, schema, stats)
    H = _dcr_encode(holdout, schema, stats)
    d_train = _dcr_distances(S, T, cat_mask)
    d_hold = _dcr_distances(S, H, cat_mask)
    wins = (d_train < d_hold).sum() + 0.5 * (d_train == d_hold).sum()
    return float(wins / len(S))


def _jsd_vectors(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 Jensen-Shannon divergence between two frequency vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, ref):
        mask = a > 0
        return float((a[mask] * np.log2(a[mask] / ref[mask])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def jsd(real: RawTable, synthetic: RawTable, schema: TableSchema) -> float:
    """Average per-column Jensen-Shannon divergence (base 2).

    Continuous columns use 50 equal-width bins over the combined range.
    """
    if real.nrows == 0 or synthetic.nrows == 0:
        raise MetricError("jsd requires non-empty tables")
    scores = []
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            rv = _cont_column(real, j)
            sv = _cont_column(synthetic, j)
            lo = min(rv.min(), sv.min())
            hi = max(rv.max(), sv.max())
            if lo == hi:
                hi = lo + 1.0
            p, _ = np.histogram(rv, bins=JSD_BINS, range=(lo, hi))
            q, _ = np.histogram(sv, bins=JSD_BINS, range=(lo, hi))
            scores.append(_jsd_vectors(p / p.sum(), q / q.sum()))
        else:
            rv = _cat_column(real, j)
            sv = _cat_column(synthetic, j)
            support = sorted(set(rv) | set(sv))
            scores.append(_jsd_vectors(_freqs(rv, support), _freqs(sv, support)))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    """Everything the evaluation step produces, JSON-ready."""

    marginal_per_column: dict
    marginal_average: float
    joint_per_pair: dict
    joint_average: float | None
    c2st: float
    dcr_probability: float | None
    jsd: float
    metadata: dict

    def to_json_obj(self) -> dict:
        return {
            "marginal": {
                "per_column": self.marginal_per_column,
                "average": self.marginal_average,
            },
            "joint": {
                "per_pair": self.joint_per_pair,
                "average": self.joint_average,
            },
            "c2st": self.c2st,
            "dcr_probability": self.dcr_probability,
            "jsd": self.jsd,
            "metadata": self.metadata,
        }


def marginal_report(real: RawTable, synthetic: RawTable, schema: TableSchema):
    per_column = {}
    for j, col in enumerate(schema.columns):
        if col.kind == CONTINUOUS:
            per_column[col.name] = kst(_cont_column(real, j), _cont_column(synthetic, j))
        else:
            per_column[col.name] = tvd(_cat_column(real, j), _cat_column(synthetic, j))
    return per_column, float(np.mean(list(per_column.values())))


def evaluate(real: RawTable, synthetic: RawTable, schema: TableSchema,
             seed: int = 0, holdout: RawTable | None = None) -> MetricReport:
    """Full fidelity/privacy report.

    The DCR probability is computed only when a holdout table (same size as
    the real table, disjoint from it) is supplied; it is reported absent
    otherwise.
    """
    per_col, marg_avg = marginal_report(real, synthetic, schema)
    pairs, joint_avg = joint_report(real, synthetic, schema)
    c2st_score = c2st(real, synthetic, schema, seed)
    dcr = None
    if holdout is not None:
        dcr = dcr_probability(real, holdout, synthetic, schema)
    return MetricReport(
        marginal_per_column=per_col,
        marginal_average=marg_avg,
        joint_per_pair=pairs,
        joint_average=joint_avg,
        c2st=c2st_score,
        dcr_probability=dcr,
        jsd=jsd(real, synthetic, schema),
        metadata={
            "n_real": real.nrows,
            "n_synthetic": synthetic.nrows,
            "seed": seed,
        },
    )
