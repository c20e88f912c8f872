import math

import numpy as np
import pytest

from tabgen.data import (
    CATEGORICAL,
    CONTINUOUS,
    Column,
    EncodeError,
    RawTable,
    TableSchema,
    encode,
    fit_transforms,
)
from tabgen.sampler import (
    SamplerConfig,
    SamplingError,
    _euler_flow,
    _plan_orders,
    complete_table,
    generate_conditional,
    generate_unconditional,
    impute,
    random_order,
    sample_continuous,
    sample_discrete,
    sample_from_logits,
    sigma_ladder,
)
from tabgen.trainer import Model, TrainConfig


class StubHead:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def forward(self, z):
        return np.tile(self.logits, (len(np.atleast_2d(z)), 1)), None


class StubDenoiser:
    def __init__(self, fn):
        self.fn = fn

    def forward(self, x_t, sigma, z):
        return self.fn(np.asarray(x_t, dtype=np.float64), np.asarray(sigma)), None


def fitted_model(seed=0, epochs=0):
    rng = np.random.default_rng(seed)
    n = 80
    rows = [
        [repr(float(rng.normal())), str(rng.choice(["a", "b", "z"])),
         repr(float(rng.normal(2.0, 0.5)))]
        for _ in range(n)
    ]
    table = RawTable(header=["x", "c", "y"], rows=rows)
    schema = TableSchema(
        columns=(
            Column("x", CONTINUOUS),
            Column("c", CATEGORICAL, vocabulary=("a", "b", "z")),
            Column("y", CONTINUOUS),
        )
    )
    tfs = fit_transforms(table, schema)
    cfg = TrainConfig(d=8, depth=1, n_heads=2, seed=seed)
    model = Model(schema, cfg, np.random.default_rng(seed))
    return model, tfs, table


class TestSigmaLadder:
    def test_endpoints(self):
        cfg = SamplerConfig()
        ladder = sigma_ladder(cfg)
        assert len(ladder) == cfg.n_steps + 1
        assert ladder[0] == pytest.approx(80.0, rel=1e-12)
        assert ladder[-2] == pytest.approx(0.002, rel=1e-12)
        assert ladder[-1] == 0.0

    def test_strictly_decreasing(self):
        ladder = sigma_ladder(SamplerConfig())
        assert np.all(np.diff(ladder) < 0)


class TestSampleContinuous:
    def test_zero_denoiser_returns_initial_draw(self):
        cfg = SamplerConfig()
        den = StubDenoiser(lambda x, s: np.zeros_like(x))
        out = sample_continuous(den, np.zeros((1, 8)), np.random.default_rng(42), cfg)
        expected = np.random.default_rng(42).normal(0.0, sigma_ladder(cfg)[0])
        assert out == expected

    def test_point_mass_score_contracts_to_zero(self):
        # eps_hat = x / sigma is the exact noise posterior for a point mass
        # at 0; the flow then telescopes x_{i+1} = x_i * sigma_{i+1}/sigma_i.
        cfg = SamplerConfig()
        den = StubDenoiser(lambda x, s: x / s)
        out = sample_continuous(den, np.zeros((1, 8)), np.random.default_rng(7), cfg)
        assert abs(out) <= 1e-2

    def test_gaussian_posterior_denoiser_recovers_distribution(self):
        # closed-form optimal denoiser for x0 ~ N(mu, s^2):
        # eps_hat = sigma * (x - mu) / (s^2 + sigma^2)
        mu, s = 0.3, 0.7
        den = StubDenoiser(lambda x, sig: sig * (x - mu) / (s**2 + sig**2))
        cfg = SamplerConfig()
        ladder = sigma_ladder(cfg)
        rng = np.random.default_rng(11)
        x0 = rng.normal(0.0, ladder[0], size=4000)
        out = _euler_flow(den, x0, None, ladder)
        assert out.mean() == pytest.approx(mu, abs=0.05)
        assert out.std() == pytest.approx(s, abs=0.07)

    def test_non_finite_state_raises(self):
        den = StubDenoiser(lambda x, s: np.full_like(x, 1e308))
        with np.errstate(invalid="ignore", over="ignore"), pytest.raises(SamplingError):
            sample_continuous(den, np.zeros((1, 8)), np.random.default_rng(0))


class TestSampleDiscrete:
    def test_saturated_softmax(self):
        head = StubHead([1000.0, 0.0])
        rng = np.random.default_rng(3)
        draws = {sample_discrete(head, np.zeros(8), rng) for _ in range(1000)}
        assert draws == {0}

    def test_uniform_logits(self):
        head = StubHead([0.0, 0.0, 0.0, 0.0])
        rng = np.random.default_rng(5)
        draws = np.array([sample_discrete(head, np.zeros(8), rng) for _ in range(10_000)])
        freqs = np.bincount(draws, minlength=4) / len(draws)
        np.testing.assert_allclose(freqs, 0.25, atol=0.02)

    def test_single_class(self):
        head = StubHead([0.7])
        rng = np.random.default_rng(9)
        assert all(sample_discrete(head, np.zeros(8), rng) == 0 for _ in range(20))

    def test_cdf_inversion_edges(self):
        logits = np.log(np.array([0.5, 0.5]))
        assert sample_from_logits(logits, 0.0) == 0
        assert sample_from_logits(logits, 0.4999) == 0
        assert sample_from_logits(logits, 0.5001) == 1
        assert sample_from_logits(logits, 0.999999) == 1


class TestOrders:
    def test_random_order_is_permutation(self):
        order = random_order(6, np.random.default_rng(0))
        assert sorted(order.tolist()) == list(range(6))

    def test_rows_get_distinct_orders(self):
        rng = np.random.default_rng(1)
        streams = rng.spawn(1000)
        known = np.zeros((1000, 5), dtype=bool)
        orders = _plan_orders(streams, known, None, 5)
        assert len({tuple(o) for o in orders}) >= 2

    def test_fixed_order_filtered_to_missing(self):
        rng = np.random.default_rng(2)
        streams = rng.spawn(1)
        known = np.array([[False, True, False, True]])
        orders = _plan_orders(streams, known, [3, 2, 1, 0], 4)
        assert orders == [[2, 0]]

    def test_invalid_order_raises(self):
        rng = np.random.default_rng(3)
        streams = rng.spawn(1)
        known = np.zeros((1, 3), dtype=bool)
        with pytest.raises(ValueError, match="permutation"):
            _plan_orders(streams, known, [0, 1, 1], 3)


class TestGenerateUnconditional:
    def test_shapes_and_vocabulary(self):
        model, tfs, _ = fitted_model()
        out = generate_unconditional(model, tfs, 25, np.random.default_rng(0))
        assert out.header == ["x", "c", "y"]
        assert out.nrows == 25
        for row in out.rows:
            assert isinstance(row[0], float) and math.isfinite(row[0])
            assert row[1] in ("a", "b", "z")
            assert isinstance(row[2], float) and math.isfinite(row[2])

    def test_reproducible_with_seed(self):
        model, tfs, _ = fitted_model()
        t1 = generate_unconditional(model, tfs, 10, np.random.default_rng(77))
        t2 = generate_unconditional(model, tfs, 10, np.random.default_rng(77))
        assert t1.rows == t2.rows
        t3 = generate_unconditional(model, tfs, 10, np.random.default_rng(78))
        assert t1.rows != t3.rows

    def test_fixed_order_accepted(self):
        model, tfs, _ = fitted_model()
        out = generate_unconditional(
            model, tfs, 5, np.random.default_rng(0), order=[0, 1, 2]
        )
        assert out.nrows == 5

    def test_zero_rows(self):
        model, tfs, _ = fitted_model()
        out = generate_unconditional(model, tfs, 0, np.random.default_rng(0))
        assert out.nrows == 0

    def test_mask_cleared_one_per_round(self):
        model, tfs, _ = fitted_model()
        seen = []
        orig = model.encode_latents

        def spy(rows, masks):
            seen.append(masks.sum(axis=1).copy())
            return orig(rows, masks)

        model.encode_latents = spy
        generate_unconditional(model, tfs, 4, np.random.default_rng(1))
        counts = np.stack(seen)
        # every forward pass sees one fewer masked column per row
        np.testing.assert_array_equal(counts[:, 0], [3, 2, 1])


class TestGenerateConditional:
    def test_no_missing_returns_row_verbatim(self):
        model, tfs, _ = fitted_model()
        row = ["1.25", "b", "2.5"]
        out = generate_conditional(model, tfs, row, np.random.default_rng(0))
        assert out == row
        assert out[0] is row[0]

    def test_observed_cells_unchanged_missing_filled(self):
        model, tfs, _ = fitted_model()
        row = ["0.5", None, None]
        out = generate_conditional(model, tfs, row, np.random.default_rng(4))
        assert out[0] == "0.5"
        assert out[1] in ("a", "b", "z")
        assert isinstance(out[2], float)

    def test_all_missing_equals_unconditional(self):
        model, tfs, _ = fitted_model()
        cond = generate_conditional(
            model, tfs, [None, None, None], np.random.default_rng(21)
        )
        uncond = generate_unconditional(model, tfs, 1, np.random.default_rng(21))
        assert cond == uncond.rows[0]

    def test_unseen_observed_category_errors(self):
        model, tfs, _ = fitted_model()
        with pytest.raises(EncodeError, match="'c'"):
            generate_conditional(model, tfs, [None, "nope", None], np.random.default_rng(0))

    def test_complete_table_preserves_observed(self):
        model, tfs, _ = fitted_model()
        table = RawTable(
            header=["x", "c", "y"],
            rows=[["0.1", None, "2.0"], [None, "a", None]],
        )
        out = complete_table(model, tfs, table, np.random.default_rng(5))
        assert out.rows[0][0] == "0.1"
        assert out.rows[0][2] == "2.0"
        assert out.rows[1][1] == "a"


class TestImpute:
    def test_no_missing_unchanged(self):
        model, tfs, _ = fitted_model()
        table = RawTable(header=["x", "c", "y"], rows=[["0.3", "a", "1.9"]])
        out = impute(model, tfs, table, np.random.default_rng(0), k=5)
        assert out.rows == table.rows

    def test_k1_equals_single_conditional_draw(self):
        model, tfs, _ = fitted_model()
        table = RawTable(
            header=["x", "c", "y"], rows=[[None, "b", None], ["0.2", None, "2.1"]]
        )
        imp = impute(model, tfs, table, np.random.default_rng(13), k=1)
        cond = complete_table(model, tfs, table, np.random.default_rng(13))
        assert imp.rows == cond.rows

    def test_k_must_be_positive(self):
        model, tfs, _ = fitted_model()
        table = RawTable(header=["x", "c", "y"], rows=[[None, "a", "1.0"]])
        with pytest.raises(ValueError):
            impute(model, tfs, table, np.random.default_rng(0), k=0)

    def test_vote_tie_breaks_to_lowest_index(self):
        # the vote relies on bincount+argmax returning the first maximum
        votes = np.bincount(np.array([2, 2, 1, 1]), minlength=3)
        assert votes.argmax() == 1

    def test_continuous_imputation_averages(self):
        model, tfs, _ = fitted_model()
        table = RawTable(header=["x", "c", "y"], rows=[[None, "a", "2.0"]])
        out = impute(model, tfs, table, np.random.default_rng(3), k=10)
        assert isinstance(out.rows[0][0], float)
        assert out.rows[0][1] == "a"
