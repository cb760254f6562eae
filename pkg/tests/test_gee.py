import numpy as np
import pytest
from numpy.testing import assert_allclose

from pseudosurv import (
    Scenario,
    SurvivalDataset,
    TimeGrid,
    WorkingCorrelation,
    build_design,
    fit_gee,
    generate_trial,
    pseudo_observations,
    select_time_grid,
    wald_interval,
)
from pseudosurv.design import mean_and_derivative
from pseudosurv.gee import FitResult, _moment_alpha, _sandwich, _score_system
from pseudosurv.pseudo import PseudoObsMatrix


def fitted_pieces(n=120, seed=5, K=4):
    data = generate_trial(Scenario(n=n), seed=(77, seed), bound=8.543878829476515)
    grid = select_time_grid(data, K)
    pom = pseudo_observations(data, grid)
    X = build_design(data, grid)
    return pom, X


class TestWorkingCorrelation:
    def test_ind_is_identity(self):
        assert_allclose(WorkingCorrelation("IND", 4).matrix(), np.eye(4))

    def test_exch_structure(self):
        R = WorkingCorrelation("EXCH", 3, alpha=0.4).matrix()
        assert_allclose(R, [[1, 0.4, 0.4], [0.4, 1, 0.4], [0.4, 0.4, 1]])

    def test_ar1_structure(self):
        R = WorkingCorrelation("AR1", 3, alpha=0.5).matrix()
        assert_allclose(R, [[1, 0.5, 0.25], [0.5, 1, 0.5], [0.25, 0.5, 1]])

    def test_alpha_range_enforced(self):
        with pytest.raises(ValueError, match="outside"):
            WorkingCorrelation("EXCH", 4, alpha=-0.5)  # lower bound -1/3
        with pytest.raises(ValueError, match="outside"):
            WorkingCorrelation("AR1", 4, alpha=1.0)
        with pytest.raises(ValueError, match="no nuisance"):
            WorkingCorrelation("IND", 4, alpha=0.1)

    def test_positive_definite_in_range(self):
        for kind, alpha in (("EXCH", -0.3), ("EXCH", 0.9), ("AR1", -0.9), ("AR1", 0.9)):
            R = WorkingCorrelation(kind, 4, alpha=alpha).matrix()
            assert np.linalg.eigvalsh(R).min() > 0


class TestFitGee:
    def test_zero_residual_fixed_point(self):
        # y generated exactly from the model: the fit must recover beta*
        pom, X = fitted_pieces()
        rng = np.random.default_rng(8)
        beta_star = rng.normal(scale=0.4, size=X.P)
        mu, _ = mean_and_derivative(X.blocks, beta_star)
        exact = PseudoObsMatrix(values=mu, grid=pom.grid)
        fit = fit_gee(exact, X, "IND")
        assert fit.converged
        assert np.max(np.abs(fit.beta - beta_star)) < 1e-8

    def test_irls_oracle_equivalence(self):
        # independent reweighted-least-squares solver, iterated to
        # convergence from the pooled-mean start
        pom, X = fitted_pieces(n=30, seed=3, K=3)
        fit = fit_gee(pom, X, "IND")
        y = pom.values.reshape(-1)
        Xs = X.stacked()
        beta = np.zeros(X.P)
        beta[0] = np.log(-np.log(np.clip(pom.values.mean(), 1e-6, 1 - 1e-6)))
        for _ in range(200):
            eta = Xs @ beta
            mu = np.exp(-np.exp(eta))
            dmu = -np.exp(eta - np.exp(eta))
            w = dmu**2
            z = eta + (y - mu) / dmu
            wsqrt = np.sqrt(w)
            beta_new, *_ = np.linalg.lstsq(wsqrt[:, None] * Xs, wsqrt * z, rcond=None)
            if np.max(np.abs(beta_new - beta)) < 1e-12:
                beta = beta_new
                break
            beta = beta_new
        assert fit.converged
        assert np.max(np.abs(fit.beta - beta)) < 1e-8

    def test_score_norm_small_when_converged(self):
        pom, X = fitted_pieces(n=200, seed=11)
        for kind in ("IND", "EXCH", "AR1"):
            fit = fit_gee(pom, X, kind)
            assert fit.converged
            r_inv = np.linalg.inv(
                WorkingCorrelation(kind, X.K, fit.alpha).matrix()
            )
            mu, D = mean_and_derivative(X.blocks, fit.beta)
            _, score = _score_system(D, pom.values - mu, r_inv)
            assert np.max(np.abs(score)) < 1e-8

    def test_alpha_estimated_for_exch(self):
        pom, X = fitted_pieces(n=300, seed=2)
        fit = fit_gee(pom, X, "EXCH")
        assert fit.alpha is not None
        assert -1.0 / (X.K - 1) < fit.alpha < 1.0

    def test_sandwich_invariant_to_correlation_rescaling(self):
        pom, X = fitted_pieces(n=150, seed=4)
        fit = fit_gee(pom, X, "IND")
        mu, D = mean_and_derivative(X.blocks, fit.beta)
        resid = pom.values - mu
        for c in (1.0, 5.0, 0.2):
            r_inv = np.linalg.inv(c * np.eye(X.K))
            gamma0, _ = _score_system(D, resid, r_inv)
            cov = _sandwich(D, resid, r_inv, gamma0)
            if c == 1.0:
                base = cov
            else:
                assert_allclose(cov, base, rtol=1e-10)

    def test_dimension_mismatch_rejected(self):
        pom, X = fitted_pieces()
        with pytest.raises(ValueError, match="dimension"):
            fit_gee(pom, X, WorkingCorrelation("IND", X.K + 1))

    def test_covariance_symmetric_psd(self):
        pom, X = fitted_pieces(n=250, seed=6)
        fit = fit_gee(pom, X)
        assert_allclose(fit.covariance, fit.covariance.T, atol=1e-14)
        assert np.linalg.eigvalsh(fit.covariance).min() > 0
        assert_allclose(fit.se, np.sqrt(np.diag(fit.covariance)))


class TestMomentAlpha:
    def test_exch_matches_pair_average(self):
        rng = np.random.default_rng(13)
        resid = rng.normal(size=(40, 3))
        got = _moment_alpha(resid, "EXCH")
        pairs = []
        for i in range(40):
            for k in range(3):
                for l in range(k + 1, 3):
                    pairs.append(resid[i, k] * resid[i, l])
        assert got == pytest.approx(np.mean(pairs) / np.mean(resid**2))

    def test_ar1_uses_lag1(self):
        rng = np.random.default_rng(14)
        resid = rng.normal(size=(25, 4))
        got = _moment_alpha(resid, "AR1")
        lag1 = resid[:, :-1] * resid[:, 1:]
        assert got == pytest.approx(np.mean(lag1) / np.mean(resid**2))


class TestWaldInterval:
    def test_textbook_values(self):
        fit = FitResult(
            beta=np.array([0.0]),
            covariance=np.array([[0.01]]),
            iterations=1,
            converged=True,
        )
        low, high = wald_interval(fit)[0]
        assert low == pytest.approx(-0.19599, abs=1e-4)
        assert high == pytest.approx(0.19599, abs=1e-4)

    def test_level_half(self):
        fit = FitResult(
            beta=np.array([1.0]),
            covariance=np.array([[1.0]]),
            iterations=1,
            converged=True,
        )
        low, high = wald_interval(fit, level=0.5)[0]
        assert high - 1.0 == pytest.approx(0.67449, abs=1e-4)
        assert 1.0 - low == pytest.approx(0.67449, abs=1e-4)

    def test_requires_convergence(self):
        fit = FitResult(
            beta=np.array([0.0]),
            covariance=np.array([[1.0]]),
            iterations=50,
            converged=False,
        )
        with pytest.raises(ValueError, match="non-converged"):
            wald_interval(fit)
