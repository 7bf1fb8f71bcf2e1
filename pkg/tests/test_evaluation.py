import math
import warnings

import numpy as np
import pytest
import scipy.special
import scipy.stats as st

import kexpfam.evaluation as evaluation
import kexpfam.score_fit as score_fit_mod
from kexpfam.data_io import standardize
from kexpfam.errors import DataError, NumericalError
from kexpfam.evaluation import (
    CvConfig,
    LogPartitionEstimate,
    _LogMeanExpAccumulator,
    cross_validate,
    disjoint_support_demo,
    fisher_divergence,
    log_partition_from_draws,
    log_partition_is,
)
from kexpfam.factorization import JointModel, NodeHyperparams, fit_joint, make_dag
from kexpfam.kernels import ConstantKernel, GaussianKernelSpec
from kexpfam.sampling import GridDatasetConfig, rejection_sample_grid
from kexpfam.score_fit import FactorModel, eval_T, unnorm_logpdf_rows


def zero_T_factor(n=4, d=1, p=0):
    return FactorModel(x_train=np.zeros((n, p)), y_train=np.zeros((n, d)),
                       kernel_x=(ConstantKernel() if p == 0
                                 else GaussianKernelSpec(np.ones(p))),
                       kernel_y=GaussianKernelSpec(np.ones(d)),
                       lam=1.0, beta=np.zeros(n * d), xi_coeff=0.0)


@pytest.fixture(scope="module")
def fitted_1d():
    """Unconditional 1-D fit on grid-marginal data."""
    raw = rejection_sample_grid(GridDatasetConfig(dim=1, n=200, seed=3))
    ds = standardize(raw)
    model = fit_joint(ds, make_dag("full", 1), NodeHyperparams(lam=1e-2))
    return model, ds


def quadrature_log_z(factor, x_row, half_width_stds=8.0, points=4097):
    std = factor.base.std
    grid = np.linspace(-half_width_stds * std, half_width_stds * std, points)
    if x_row is None:
        X = np.empty((grid.size, 0))
    else:
        X = np.repeat(np.atleast_2d(x_row), grid.size, axis=0)
    # log Z = log E_q0[exp T] = log int exp(log q0 + T) dy for a normalized q0
    logp = unnorm_logpdf_rows(factor, X, grid[:, None])
    return float(np.log(np.trapezoid(np.exp(logp), grid)))


class TestLogPartitionEstimateType:
    def test_validation(self):
        with pytest.raises(DataError):
            LogPartitionEstimate(log_z=0.0, std_err=-1.0, sample_count=10)
        with pytest.raises(DataError):
            LogPartitionEstimate(log_z=0.0, std_err=0.0, sample_count=0)


class TestLogPartition:
    def test_zero_T_is_exactly_zero(self):
        est = log_partition_is(zero_T_factor(), None, 1000, seed=0)
        assert est.log_z == 0.0
        assert est.std_err == 0.0
        assert est.sample_count == 1000

    def test_matches_quadrature(self, fitted_1d):
        model, _ = fitted_1d
        factor = model.factors[0]
        est = log_partition_is(factor, None, 100_000, seed=21)
        log_z_quad = quadrature_log_z(factor, None)
        assert abs(est.log_z - log_z_quad) < 3 * est.std_err
        assert abs(est.log_z - log_z_quad) < 0.02

    def test_pooled_streams_shrink_std_err(self, fitted_1d):
        model, _ = fitted_1d
        factor = model.factors[0]
        ratios = []
        for rep in range(20):
            rng_a = np.random.default_rng((rep, 1))
            rng_b = np.random.default_rng((rep, 2))
            d_a = factor.base.sample(rng_a, 4000, 1)
            d_b = factor.base.sample(rng_b, 4000, 1)
            single = log_partition_from_draws(factor, None, d_a)
            pooled = log_partition_from_draws(factor, None,
                                              np.vstack([d_a, d_b]))
            ratios.append(single.std_err / pooled.std_err)
        assert 1.2 <= np.mean(ratios) <= 1.7

    def test_reordering_draws_is_invariant(self, fitted_1d, rng):
        model, _ = fitted_1d
        factor = model.factors[0]
        draws = factor.base.sample(np.random.default_rng(5), 3000, 1)
        before = log_partition_from_draws(factor, None, draws)
        after = log_partition_from_draws(factor, None,
                                         draws[rng.permutation(3000)])
        assert abs(before.log_z - after.log_z) <= 1e-12

    def test_streaming_matches_direct_logsumexp(self, fitted_1d, monkeypatch):
        model, _ = fitted_1d
        factor = model.factors[0]
        draws = factor.base.sample(np.random.default_rng(9), 300, 1)
        t_vals = np.array([eval_T(factor, None, y) for y in draws])
        expect = float(scipy.special.logsumexp(t_vals) - math.log(300))
        est = log_partition_from_draws(factor, None, draws)
        assert est.log_z == pytest.approx(expect, abs=1e-12)
        # exercise the chunked accumulator path explicitly
        acc = _LogMeanExpAccumulator(1)
        for lo in range(0, 300, 64):
            acc.add(t_vals[None, lo:lo + 64])
        log_z, _ = acc.finalize()
        assert log_z[0] == pytest.approx(expect, abs=1e-12)

    def test_accumulator_rejects_nonfinite(self):
        acc = _LogMeanExpAccumulator(1)
        with pytest.raises(NumericalError):
            acc.add(np.array([[1.0, np.inf]]))

    def test_cache_returns_identical_estimates(self, fitted_1d):
        model, _ = fitted_1d
        factor = model.factors[0]
        e1 = log_partition_is(factor, None, 5000, seed=3)
        e2 = log_partition_is(factor, None, 5000, seed=3)
        assert e1.log_z == e2.log_z and e1.std_err == e2.std_err

    def test_cache_rounds_conditioning_point(self):
        raw = rejection_sample_grid(GridDatasetConfig(dim=2, n=100, seed=3))
        model = fit_joint(standardize(raw), make_dag("markov", 2),
                          NodeHyperparams(lam=0.02))
        factor = model.factors[1]
        e1 = log_partition_is(factor, [0.25], 2000, seed=1)
        e2 = log_partition_is(factor, [0.25 + 1e-15], 2000, seed=1)
        assert e1.log_z == e2.log_z


class TestTestLoglik:
    def test_zero_T_reduces_to_base_plus_jacobian(self, rng):
        n = 6
        factors = (zero_T_factor(n=n, d=1, p=0), zero_T_factor(n=n, d=1, p=1))
        means = np.array([1.0, -2.0])
        stds = np.array([2.0, 0.5])
        model = JointModel(dag=make_dag("markov", 2), factors=factors,
                           column_means=means, column_stds=stds,
                           column_names=("a", "b"))
        rows = rng.normal(size=(10, 2))
        mean, per_row = evaluation.test_loglik(model, rows, is_samples=500, seed=0)
        z = (rows - means) / stds
        base = factors[0].base
        expect = (base.log_pdf_rows(z[:, [0]]) + base.log_pdf_rows(z[:, [1]])
                  - np.sum(np.log(stds)))
        np.testing.assert_array_equal(per_row, expect)
        assert mean == np.mean(per_row)

    def test_matches_full_quadrature_normalization(self, fitted_1d):
        model, ds = fitted_1d
        factor = model.factors[0]
        test_raw = rejection_sample_grid(GridDatasetConfig(dim=1, n=300, seed=9))
        mean_is, _ = evaluation.test_loglik(model, test_raw,
                                            is_samples=100_000, seed=13)
        z = (test_raw - ds.column_means) / ds.column_stds
        log_quad = (unnorm_logpdf_rows(factor, np.empty((z.shape[0], 0)), z)
                    - quadrature_log_z(factor, None)
                    - np.sum(np.log(ds.column_stds)))
        assert abs(mean_is - log_quad.mean()) < 0.02

    def test_duplicated_rows_share_cached_partitions(self):
        raw = rejection_sample_grid(GridDatasetConfig(dim=2, n=100, seed=3))
        model = fit_joint(standardize(raw), make_dag("markov", 2),
                          NodeHyperparams(lam=0.02))
        rows = raw[:5]
        doubled = np.vstack([rows, rows])
        _, per_row = evaluation.test_loglik(model, doubled, is_samples=2000,
                                            seed=11)
        np.testing.assert_array_equal(per_row[:5], per_row[5:])

    def test_determinism(self, fitted_1d):
        model, _ = fitted_1d
        rows = rejection_sample_grid(GridDatasetConfig(dim=1, n=50, seed=2))
        m1, r1 = evaluation.test_loglik(model, rows, is_samples=3000, seed=4)
        m2, r2 = evaluation.test_loglik(model, rows, is_samples=3000, seed=4)
        assert m1 == m2
        np.testing.assert_array_equal(r1, r2)

    def test_dimension_mismatch(self, fitted_1d):
        model, _ = fitted_1d
        with pytest.raises(DataError):
            evaluation.test_loglik(model, np.zeros((3, 2)))


@pytest.fixture(scope="module")
def small_grid():
    raw = rejection_sample_grid(GridDatasetConfig(dim=2, n=120, seed=6))
    return standardize(raw)


class TestCrossValidate:

    def test_single_point_grid(self, small_grid):
        config = CvConfig(folds=3, lambda_grid=(0.05,),
                          bandwidth_scale_grid=(1.0,), seed=2)
        result = cross_validate(small_grid, make_dag("markov", 2), config)
        for node_result in result.nodes:
            assert node_result.best_lam == 0.05
            assert node_result.best_scale == 1.0
            assert len(node_result.table) == 1
            assert math.isfinite(node_result.best_score)

    def test_determinism(self, small_grid):
        config = CvConfig(folds=3, lambda_grid=(0.01, 0.1),
                          bandwidth_scale_grid=(0.5, 1.0), seed=7)
        dag = make_dag("markov", 2)
        r1 = cross_validate(small_grid, dag, config)
        r2 = cross_validate(small_grid, dag, config)
        for a, b in zip(r1.nodes, r2.nodes):
            assert a.best_lam == b.best_lam and a.best_scale == b.best_scale
            for c1, c2 in zip(a.table, b.table):
                assert c1.mean_score == c2.mean_score

    def test_enumeration_order_invariance(self, small_grid):
        dag = make_dag("markov", 2)
        fwd = CvConfig(folds=3, lambda_grid=(0.01, 0.1, 1.0),
                       bandwidth_scale_grid=(0.5, 1.0, 2.0), seed=7)
        rev = CvConfig(folds=3, lambda_grid=(1.0, 0.1, 0.01),
                       bandwidth_scale_grid=(2.0, 1.0, 0.5), seed=7)
        r_fwd = cross_validate(small_grid, dag, fwd)
        r_rev = cross_validate(small_grid, dag, rev)
        for a, b in zip(r_fwd.nodes, r_rev.nodes):
            assert a.best_lam == b.best_lam
            assert a.best_scale == b.best_scale

    def test_duplicate_grid_points_tie_consistently(self, small_grid):
        config = CvConfig(folds=3, lambda_grid=(0.05, 0.05),
                          bandwidth_scale_grid=(1.0,), seed=2)
        result = cross_validate(small_grid, make_dag("markov", 2), config)
        cells = result.nodes[0].table
        assert cells[0].mean_score == cells[1].mean_score
        assert result.nodes[0].best_lam == 0.05

    def test_failed_fit_scores_infinity(self, small_grid, monkeypatch):
        real_fit = evaluation.fit_factor
        poison = 0.123456

        def exploding_fit(x, y, kx, ky, lam, base=None):
            if lam == poison:
                raise NumericalError("forced failure")
            return real_fit(x, y, kx, ky, lam, base)

        monkeypatch.setattr(evaluation, "fit_factor", exploding_fit)
        config = CvConfig(folds=3, lambda_grid=(poison, 0.05),
                          bandwidth_scale_grid=(1.0,), seed=2)
        result = cross_validate(small_grid, make_dag("markov", 2), config)
        for node_result in result.nodes:
            scores = {c.lam: c.mean_score for c in node_result.table}
            assert math.isinf(scores[poison])
            assert node_result.best_lam == 0.05

    def test_needs_enough_rows(self, small_grid):
        with pytest.raises(DataError):
            cross_validate(np.zeros((3, 2)), make_dag("markov", 2),
                           CvConfig(folds=5))

    def test_hyperparams_export(self, small_grid):
        config = CvConfig(folds=3, lambda_grid=(0.05,),
                          bandwidth_scale_grid=(2.0,), seed=2)
        result = cross_validate(small_grid, make_dag("markov", 2), config)
        hyper = result.hyperparams()
        assert all(isinstance(h, NodeHyperparams) for h in hyper)
        assert hyper[0].lam == 0.05 and hyper[0].x_scale == 2.0

    def test_threaded_matches_serial(self, small_grid):
        config = CvConfig(folds=3, lambda_grid=(0.01, 0.1),
                          bandwidth_scale_grid=(1.0, 2.0), seed=7)
        dag = make_dag("markov", 2)
        serial = cross_validate(small_grid, dag, config, max_workers=1)
        threaded = cross_validate(small_grid, dag, config, max_workers=4)
        for a, b in zip(serial.nodes, threaded.nodes):
            for c1, c2 in zip(a.table, b.table):
                assert c1.mean_score == c2.mean_score

    def test_default_grid_selects_interior_lambda(self):
        """Soft sanity check: warn (do not fail) if the chosen lambda sits on
        the default grid boundary."""
        raw = rejection_sample_grid(GridDatasetConfig(dim=3, n=500, seed=1))
        ds = standardize(raw)
        result = cross_validate(ds, make_dag("markov", 3), CvConfig(seed=3))
        grid = CvConfig().lambda_grid
        for node_result in result.nodes:
            if node_result.best_lam in (min(grid), max(grid)):
                warnings.warn(
                    f"node {node_result.node}: selected lambda "
                    f"{node_result.best_lam:g} lies on the default grid edge"
                )


class TestFisherDivergence:
    def test_zero_for_identical_scores(self, rng):
        score = lambda X, Y: -Y
        X = rng.normal(size=(50, 1))
        Y = rng.normal(size=(50, 1))
        assert fisher_divergence(score, score, X, Y) == 0.0

    def test_gaussian_mean_shift_closed_form(self):
        # unit-variance Gaussians with means 0 and 1: the score difference is
        # the constant -1, so the divergence is exactly 1/2
        rng = np.random.default_rng(8)
        X = rng.normal(size=(10_000, 1))
        Y = rng.normal(size=(10_000, 1))  # samples from p = N(0, 1)
        p_score = lambda X_, Y_: -Y_
        q_score = lambda X_, Y_: -(Y_ - 1.0)
        est = fisher_divergence(p_score, q_score, X, Y)
        diffs = 0.5 * np.ones(10_000)
        se = diffs.std(ddof=1) / math.sqrt(10_000)  # zero here
        assert abs(est - 0.5) <= max(3 * se, 1e-12)

    def test_nonnegative(self, rng):
        for _ in range(10):
            a = rng.normal()
            b = rng.normal()
            p_score = lambda X_, Y_: a * Y_
            q_score = lambda X_, Y_: b * Y_ + 1.0
            X = rng.normal(size=(40, 2))
            Y = rng.normal(size=(40, 2))
            assert fisher_divergence(p_score, q_score, X, Y) >= 0.0

    def test_nonfinite_score_rejected(self, rng):
        bad = lambda X_, Y_: np.full_like(Y_, np.nan)
        good = lambda X_, Y_: -Y_
        with pytest.raises(NumericalError):
            fisher_divergence(bad, good, rng.normal(size=(5, 1)),
                              rng.normal(size=(5, 1)))


class TestDisjointSupportDemo:
    def test_divergence_vanishes_but_tv_is_large(self):
        result = disjoint_support_demo(n_samples=50_000, seed=0)
        assert result["fisher_divergence"] < 1e-12
        assert result["tv_distance"] > 0.4
        assert result["tv_distance"] == pytest.approx(0.5, abs=1e-3)

    def test_deterministic(self):
        a = disjoint_support_demo(n_samples=10_000, seed=4)
        b = disjoint_support_demo(n_samples=10_000, seed=4)
        assert a["fisher_divergence"] == b["fisher_divergence"]
        assert a["tv_distance"] == b["tv_distance"]
