import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coxmesh.model import (
    ConfigError,
    HyperState,
    ModelError,
    ModelSpec,
    hyper_from_vector,
    hyper_names,
    hyper_to_vector,
    nb_logpmf,
)
from toys import central_gradient, toy_hyper, toy_model


@pytest.fixture(scope="module")
def model():
    return toy_model()


def _x0(model, seed=1):
    return 0.3 * np.random.default_rng(seed).standard_normal(model.layout.dim)


class TestNegativeBinomial:
    def test_matches_scipy(self):
        y = np.arange(0, 40)
        for mu, k in [(2.4, 1.727), (5.0, 16.3), (0.3, 0.5)]:
            ref = stats.nbinom.logpmf(y, k, k / (k + mu))
            np.testing.assert_allclose(nb_logpmf(y, mu, k), ref, rtol=1e-10, atol=1e-12)

    def test_poisson_limit(self):
        y = np.arange(0, 20)
        np.testing.assert_allclose(nb_logpmf(y, 3.0, 1e9), stats.poisson.logpmf(y, 3.0), atol=1e-6)

    def test_variance(self):
        k, mu = 1.727, 2.4
        y = np.arange(0, 2000)
        p = np.exp(nb_logpmf(y, mu, k))
        np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-10)
        np.testing.assert_allclose((p * (y - mu) ** 2).sum(), mu + mu**2 / k, rtol=1e-8)

    def test_bad_size(self):
        with pytest.raises(ModelError):
            nb_logpmf([1], 1.0, 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 200), st.floats(0.01, 50), st.floats(0.05, 100))
    def test_nonpositive(self, y, mu, k):
        assert nb_logpmf(y, mu, k) <= 1e-12


class TestSpec:
    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            ModelSpec.from_dict({"covariates": ["dcoast"], "bogus": 1})
        assert err.value.key == "model.bogus"

    def test_alias_and_round_trip(self):
        s = ModelSpec.from_dict({"marks": False, "months": [7]})
        assert not s.include_marks
        assert ModelSpec.from_dict(s.to_dict()) == s

    def test_bad_months(self):
        with pytest.raises(ConfigError):
            ModelSpec(months=(3,))

    def test_hyper_vector_round_trip(self):
        spec = ModelSpec()
        names = hyper_names(spec)
        h = toy_hyper()
        v = hyper_to_vector(h, names)
        h2 = hyper_from_vector(v, names, HyperState())
        np.testing.assert_allclose(hyper_to_vector(h2, names), v)


class TestObjective:
    def test_gradient(self, model):
        hyper = toy_hyper()
        x = _x0(model)
        _, g, _ = model.objective(x, hyper)
        fd = central_gradient(lambda z: model.objective(z, hyper, hessian=False)[0], x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)

    def test_hessian(self, model):
        hyper = toy_hyper()
        x = _x0(model, 2)
        _, _, H = model.objective(x, hyper)
        grad = lambda z: model.objective(z, hyper, hessian=False)[1]
        eps = 1e-5
        fd = np.column_stack([(grad(x + eps * e) - grad(x - eps * e)) / (2 * eps) for e in np.eye(x.size)])
        np.testing.assert_allclose(H.toarray(), fd, rtol=1e-4, atol=1e-4)

    def test_hessian_positive_definite(self, model):
        _, _, H = model.objective(_x0(model, 3), toy_hyper())
        assert np.linalg.eigvalsh(H.toarray()).min() > 0

    def test_lgcp_closed_form(self, model):
        x = _x0(model, 4)
        eta_p = model.X_pts @ x
        expected = -eta_p.sum() + np.sum(model.w_quad * np.exp(model.X_quad @ x))
        np.testing.assert_allclose(model.lgcp_nll(x), expected, rtol=1e-12)

    def test_quadrature_covers_domain(self, model):
        spec = model.spec
        per = len(spec.species_codes) * len(spec.months) * len(spec.years)
        np.testing.assert_allclose(model.w_quad.sum(), per * 1.0, rtol=1e-12)

    def test_separable_without_marks(self):
        m = toy_model(include_marks=False)
        hyper = toy_hyper()
        x = _x0(m, 5)
        _, _, H = m.objective(x, hyper)
        s0, s1 = m.layout.field_slices[0], m.layout.field_slices[1]
        assert abs(H[s0, s1]).max() == 0

    def test_nonfinite_intensity(self, model):
        x = np.zeros(model.layout.dim)
        x[model.layout["intercept", 0]] = 1e4
        with pytest.raises(ModelError) as err:
            model.objective(x, toy_hyper())
        assert err.value.component == "lgcp"


class TestBaseline:
    def test_intercept_mle_closed_form(self):
        m = toy_model(
            baseline=True, include_marks=False, random_effects=False, covariates=(), months=(7,), years=(2010,),
            species=("beluga",), fixed_prior_sd=None,
        )
        from coxmesh.infer import inner_mode

        n = len(m.data.pattern)
        x, _ = inner_mode(m, HyperState())
        np.testing.assert_allclose(x.vector[m.layout["intercept", 0]], np.log(n / m.w_quad.sum()), atol=1e-8)
