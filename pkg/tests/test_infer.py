import numpy as np
import pytest
import scipy.sparse as sp
from scipy import integrate, stats

from coxmesh.geo import CovariateGrid
from coxmesh.infer import (
    FitOptions,
    InferenceError,
    LaplaceProblem,
    fit_at,
    fit_from_mode,
    laplace_log_marginal,
    newton_mode,
    optimize_hyper,
    predict_group_size,
    predict_intensity,
    raster_csv,
    read_raster_csv,
    report_csv,
    summaries,
)
from coxmesh.model import ConfigError, HyperState, ModelError
from coxmesh.spde import SpdeParams
from toys import toy_hyper, toy_model


def gaussian_problem(n=6, s=0.7, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    P = A @ A.T + n * np.eye(n)
    y = rng.standard_normal(n)

    def fun(x, hessian=True):
        r = y - x
        val = 0.5 * r @ r / s**2 + n * np.log(np.sqrt(2 * np.pi) * s) + 0.5 * x @ P @ x
        g = -r / s**2 + P @ x
        return val, g, sp.csc_matrix(np.eye(n) / s**2 + P) if hessian else None

    exact = stats.multivariate_normal(np.zeros(n), np.linalg.inv(P) + s**2 * np.eye(n)).logpdf(y)
    return LaplaceProblem(fun, n, np.linalg.slogdet(P)[1]), exact


class TestLaplace:
    def test_gaussian_exact(self):
        prob, exact = gaussian_problem()
        lm, res = laplace_log_marginal(prob)
        np.testing.assert_allclose(lm, exact, rtol=1e-10)
        assert res.iterations <= 2

    def test_poisson_lognormal(self):
        y, prec = 20, 2.0

        def fun(x, hessian=True):
            mu = np.exp(x[0])
            val = mu - y * x[0] - stats.poisson.logpmf(y, 1.0) - 1.0 + 0.5 * prec * x[0] ** 2
            return val, np.array([mu - y + prec * x[0]]), sp.csc_matrix([[mu + prec]]) if hessian else None

        lm, _ = laplace_log_marginal(LaplaceProblem(fun, 1, np.log(prec)))
        sd = 1 / np.sqrt(prec)
        ref = np.log(integrate.quad(lambda t: stats.poisson.pmf(y, np.exp(t)) * stats.norm.pdf(t, 0, sd), -8, 8)[0])
        np.testing.assert_allclose(lm, ref, atol=0.01)

    def test_newton_not_convex(self):
        fun = lambda x, h=True: (-(x @ x), -2 * x, sp.csc_matrix(-2 * np.eye(2)) if h else None)
        with pytest.raises(InferenceError) as err:
            newton_mode(fun, np.ones(2))
        assert err.value.component == "inner"


@pytest.fixture(scope="module")
def toy_fit():
    return fit_at(toy_model(n_points=80), toy_hyper())


class TestFit:
    def test_fit_from_mode_matches(self, toy_fit):
        again = fit_from_mode(toy_fit.model, toy_fit.hyper, toy_fit.mode)
        np.testing.assert_allclose(again.log_marginal, toy_fit.log_marginal, rtol=1e-8)

    def test_marginal_sd_dense(self, toy_fit):
        _, _, H = toy_fit.model.objective(toy_fit.mode, toy_fit.hyper)
        np.testing.assert_allclose(toy_fit.marginal_sd, np.sqrt(np.diag(np.linalg.inv(H.toarray()))), rtol=1e-8)

    def test_predictor_moments_dense(self, toy_fit):
        m = toy_fit.model
        rows = m.intensity_rows(1, [0.3, 0.8], [0.4, 0.1], 8, 2011)
        _, _, H = m.objective(toy_fit.mode, toy_fit.hyper)
        cov = np.linalg.inv(H.toarray())
        R = rows.toarray()
        mean, var = toy_fit.predictor_moments(rows)
        np.testing.assert_allclose(mean, R @ toy_fit.mode)
        np.testing.assert_allclose(var, np.einsum("ij,jk,ik->i", R, cov, R), rtol=1e-8)

    def test_optimizer_improves(self):
        m = toy_model(n_points=80, random_effects=False, include_marks=False)
        init = HyperState.from_params(SpdeParams(0.3, 0.3, 0.0, 1.0))
        start = fit_at(m, init).log_marginal
        fit = optimize_hyper(m, init, FitOptions(max_iter=300))
        assert fit.log_marginal >= start
        assert fit.hyper_cov is not None
        np.testing.assert_allclose(fit.hyper_cov, fit.hyper_cov.T)
        assert np.all(np.linalg.eigvalsh(fit.hyper_cov) > 0)

    def test_bfgs_matches_nelder_mead(self):
        m = toy_model(n_points=80, random_effects=False, include_marks=False)
        init = HyperState.from_params(SpdeParams(0.3, 0.3, 0.0, 1.0))
        opts = dict(free=("theta1", "theta4"), hyper_ci=False)
        a = optimize_hyper(m, init, FitOptions(optimizer="nelder-mead", xatol=1e-6, **opts))
        b = optimize_hyper(m, init, FitOptions(optimizer="bfgs", gtol=1e-5, **opts))
        np.testing.assert_allclose(a.log_marginal, b.log_marginal, atol=5e-3)

    def test_options_reject_unknown(self):
        with pytest.raises(ConfigError) as err:
            FitOptions.from_dict({"k": 1})
        assert err.value.key == "inference.k"


class TestReporting:
    def test_summary_rows(self, toy_fit):
        rows = summaries(toy_fit)
        names = [r["name"] for r in rows]
        assert "Beluga: intercept" in names and "sigma" in names
        for r in rows:
            if r["kind"] != "hyper":
                assert r["q025"] < r["mean"] < r["q975"]
        text = report_csv(rows)
        assert text.splitlines()[0] == "name,mean,q025,q975"
        assert len(text.splitlines()) == len(rows) + 1


class TestPrediction:
    def test_baseline_closed_form(self):
        m = toy_model(baseline=True, include_marks=False, random_effects=False, covariates=(), months=(7,),
                      years=(2010,), fixed_prior_sd=None)
        fit = fit_at(m, HyperState())
        grid = CovariateGrid(0.05, 0.05, 0.1, 0.1, np.zeros((10, 10)))
        r = predict_intensity(fit, grid, "beluga", 7, 2010, n_draws=2000, seed=1)
        j = m.layout["intercept", 0]
        mu, s = fit.mode[j], fit.marginal_sd[j]
        np.testing.assert_allclose(r.mean, np.exp(mu + s**2 / 2) * 0.01, rtol=1e-10)
        np.testing.assert_allclose(r.sd, np.exp(mu + s**2 / 2) * np.sqrt(np.expm1(s**2)) * 0.01, rtol=0.05)

    def test_outside_is_nan_and_csv_round_trip(self, toy_fit):
        grid = CovariateGrid(-0.15, 0.05, 0.1, 0.1, np.zeros((3, 5)))
        r = predict_intensity(toy_fit, grid, 0, 7, 2010, n_draws=20, seed=0)
        assert np.isnan(r.mean[:, 0]).all() and np.isfinite(r.mean[:, 2:]).all()
        back = read_raster_csv(raster_csv(r), grid, 0, 7, 2010)
        np.testing.assert_array_equal(back.mean, r.mean)
        np.testing.assert_array_equal(back.sd, r.sd)

    def test_seeded(self, toy_fit):
        grid = CovariateGrid(0.05, 0.05, 0.2, 0.2, np.zeros((5, 5)))
        a = predict_intensity(toy_fit, grid, 1, 8, 2011, n_draws=30, seed=4)
        b = predict_intensity(toy_fit, grid, 1, 8, 2011, n_draws=30, seed=4)
        np.testing.assert_array_equal(a.sd, b.sd)

    def test_group_size(self, toy_fit):
        mean, sd = predict_group_size(toy_fit, [0.5], [0.5], "bowhead", "feed", 8, 2011)
        rows = toy_fit.model.mark_rows(1, [0.5], [0.5], [1], toy_fit.hyper, month=8, year=2011)
        m, v = toy_fit.predictor_moments(rows)
        np.testing.assert_allclose(mean, np.exp(m + v / 2))
        with pytest.raises(KeyError):
            predict_group_size(toy_fit, [0.5], [0.5], 0, 9, 8, 2011)
        with pytest.raises(ModelError):
            predict_group_size(toy_fit, [0.5], [0.5], 0, 1)
