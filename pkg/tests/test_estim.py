import numpy as np
import pytest

from cdmpanel import (
    CollinearityError,
    ConvergenceError,
    ModelSpec,
    ValidationError,
    VcovSpec,
    bootstrap_vcov,
    from_long,
    mle_fit,
    ols_fit,
    vif,
    wald_chi2,
)
from cdmpanel.estim import FitResult, linear_index


def iid_panel(n, columns, seed=0):
    return from_long([f"E{i}" for i in range(n)], [2010] * n, columns)


class TestOls:
    def test_exact_fit_line(self):
        ds = from_long(["A", "B"], [2010, 2010], {"x": [0.0, 1.0], "y": [0.0, 2.0]})
        fit = ols_fit(ds, ModelSpec("y", ("x",)))
        assert fit.coefficients["x"] == pytest.approx(2.0, abs=1e-12)
        assert fit.coefficients["_cons"] == pytest.approx(0.0, abs=1e-12)
        assert fit.fit["r2"] == pytest.approx(1.0, abs=1e-12)

    def test_duplicated_regressor_names_culprit(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=20)
        ds = iid_panel(20, {"x1": x, "x2": x.copy(), "y": rng.normal(size=20)})
        with pytest.raises(CollinearityError, match="x1|x2"):
            ols_fit(ds, ModelSpec("y", ("x1", "x2")))

    def test_fe_absorption_matches_dummy_ols(self):
        rng = np.random.default_rng(5)
        ents = np.repeat(["A", "B"], 4)
        yrs = list(range(2010, 2014)) * 2
        x = rng.normal(size=8)
        fe = np.where(ents == "A", 1.5, -0.7)
        y = 0.8 * x + fe + rng.normal(size=8) * 0.1
        ds = from_long(ents, yrs, {"x": x, "y": y})
        absorbed = ols_fit(ds, ModelSpec("y", ("x",), fe_dims=("entity",)))
        dummy = np.column_stack([x, (ents == "A").astype(float), np.ones(8)])
        coef, *_ = np.linalg.lstsq(dummy, y, rcond=None)
        assert abs(absorbed.coefficients["x"] - coef[0]) < 1e-10

    def test_residuals_orthogonal_to_regressors(self):
        rng = np.random.default_rng(9)
        ents = np.repeat([f"E{i}" for i in range(10)], 5)
        yrs = list(range(2010, 2015)) * 10
        x1 = rng.normal(size=50)
        x2 = rng.normal(size=50)
        y = 1 + x1 - 2 * x2 + rng.normal(size=50)
        ds = from_long(ents, yrs, {"x1": x1, "x2": x2, "y": y})
        fit = ols_fit(ds, ModelSpec("y", ("x1", "x2"), fe_dims=("entity", "year")))
        from cdmpanel.panel import alternating_demean

        M = alternating_demean(
            np.column_stack([y, x1, x2]),
            [ds.entity_index(), ds.year_index()],
        )
        resid = M[:, 0] - M[:, 1:] @ np.array([fit.coefficients["x1"], fit.coefficients["x2"]])
        assert abs(resid @ M[:, 1]) < 1e-8
        assert abs(resid @ M[:, 2]) < 1e-8

    def test_rescaling_regressor_rescales_coefficient(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=40)
        y = 0.5 * x + rng.normal(size=40)
        ds = iid_panel(40, {"x": x, "xs": 10 * x + 0 * x, "y": y})
        f1 = ols_fit(ds, ModelSpec("y", ("x",)))
        f2 = ols_fit(ds, ModelSpec("y", ("xs",)))
        assert f2.coefficients["xs"] == pytest.approx(f1.coefficients["x"] / 10, rel=1e-10)

    def test_zero_complete_cases_errors(self):
        ds = iid_panel(4, {"x": [np.nan] * 4, "y": [1.0, 2.0, 3.0, 4.0]})
        with pytest.raises(ValidationError, match="complete cases"):
            ols_fit(ds, ModelSpec("y", ("x",)))

    def test_hc1_matches_hand_computed_sandwich(self):
        rng = np.random.default_rng(13)
        n = 25
        x = rng.normal(size=n)
        y = 1.0 + 0.5 * x + rng.normal(size=n) * (1 + np.abs(x))
        ds = iid_panel(n, {"x": x, "y": y})
        fit = ols_fit(ds, ModelSpec("y", ("x",)), VcovSpec("hc_robust"))
        X = np.column_stack([x, np.ones(n)])
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        e = y - X @ beta
        bread = np.linalg.inv(X.T @ X)
        meat = (X * e[:, None]).T @ (X * e[:, None])
        V = n / (n - 2) * bread @ meat @ bread
        assert np.allclose(fit.vcov, V, rtol=1e-10)

    def test_weighted_fit_matches_replication(self):
        # weights of 2 behave like duplicated observations
        x = np.array([0.0, 1.0, 2.0, 3.0])
        y = np.array([0.1, 1.2, 1.8, 3.3])
        w = np.array([2.0, 1.0, 1.0, 2.0])
        ds = iid_panel(4, {"x": x, "y": y, "w": w})
        fw = ols_fit(ds, ModelSpec("y", ("x",), weights="w"))
        xr = np.concatenate([x, x[[0, 3]]])
        yr = np.concatenate([y, y[[0, 3]]])
        coef, *_ = np.linalg.lstsq(np.column_stack([xr, np.ones(6)]), yr, rcond=None)
        assert fw.coefficients["x"] == pytest.approx(coef[0], rel=1e-12)


class TestMle:
    def test_quadratic_converges_in_one_step(self):
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        b = np.array([1.0, -2.0])

        calls = []

        def objective(t):
            calls.append(t.copy())
            return -0.5 * t @ A @ t + b @ t, b - A @ t, -A

        res = mle_fit(objective, np.array([5.0, -7.0]))
        assert res.iterations == 1
        assert np.allclose(res.params, np.linalg.solve(A, b), atol=1e-12)
        assert np.allclose(res.vcov, np.linalg.inv(A), atol=1e-12)

    def test_gradient_norm_below_tol_and_positive_vcov(self):
        def objective(t):
            return -((t[0] - 3.0) ** 4) - t[0] ** 2, np.array([-4 * (t[0] - 3) ** 3 - 2 * t[0]]), np.array([[-12 * (t[0] - 3) ** 2 - 2.0]])

        res = mle_fit(objective, np.array([0.0]))
        assert res.grad_norm < 1e-8
        assert res.vcov[0, 0] > 0

    def test_non_finite_start_errors(self):
        def objective(t):
            return np.inf, np.zeros(1), -np.eye(1)

        with pytest.raises(ValidationError, match="starting point"):
            mle_fit(objective, np.zeros(1))

    def test_max_iter_reports_gradient_norm(self):
        # gradient never vanishes: linear objective with fake curvature
        def objective(t):
            return float(t[0]), np.array([1.0]), np.array([[-1e-8]])

        with pytest.raises(ConvergenceError, match="gradient max-norm"):
            mle_fit(objective, np.zeros(1), max_iter=5)


class TestBootstrap:
    def test_same_seed_bit_identical(self):
        rng = np.random.default_rng(2)
        ds = iid_panel(60, {"y": rng.normal(size=60)})

        def refit(d):
            return np.array([np.nanmean(d.column("y"))])

        spec = VcovSpec("cluster_bootstrap", replications=50, seed=123)
        v1 = bootstrap_vcov(refit, ds, spec)
        v2 = bootstrap_vcov(refit, ds, spec)
        assert np.array_equal(v1.vcov, v2.vcov)

    def test_se_of_mean_matches_analytic(self):
        rng = np.random.default_rng(77)
        y = rng.standard_normal(500)
        ds = iid_panel(500, {"y": y})

        def refit(d):
            return np.array([np.nanmean(d.column("y"))])

        spec = VcovSpec("cluster_bootstrap", replications=999, seed=5)
        res = bootstrap_vcov(refit, ds, spec)
        se = np.sqrt(res.vcov[0, 0])
        target = y.std(ddof=1) / np.sqrt(500)
        assert abs(se - target) / target < 0.10

    def test_single_failure_dropped_and_counted(self):
        rng = np.random.default_rng(4)
        ds = iid_panel(30, {"y": rng.normal(size=30)})
        calls = {"n": 0}

        def refit(d):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("boom")
            return np.array([np.nanmean(d.column("y"))])

        res = bootstrap_vcov(refit, ds, VcovSpec("cluster_bootstrap", replications=30, seed=9))
        assert res.n_failed == 1
        assert res.n_used == 29

    def test_all_failures_error(self):
        ds = iid_panel(10, {"y": np.ones(10)})

        def refit(d):
            raise RuntimeError("always")

        with pytest.raises(ConvergenceError, match="all 5"):
            bootstrap_vcov(refit, ds, VcovSpec("cluster_bootstrap", replications=5, seed=1))

    def test_zero_replications_rejected(self):
        with pytest.raises(ValidationError):
            VcovSpec("cluster_bootstrap", replications=0, seed=1)

    def test_seed_required(self):
        with pytest.raises(ValidationError):
            VcovSpec("cluster_bootstrap", replications=10)

    def test_vcov_symmetric_psd(self):
        rng = np.random.default_rng(15)
        n = 40
        ds = from_long(
            np.repeat([f"E{i}" for i in range(n)], 3),
            [2010, 2011, 2012] * n,
            {"x": rng.normal(size=3 * n), "y": rng.normal(size=3 * n)},
        )

        def refit(d):
            f = ols_fit(d, ModelSpec("y", ("x",)))
            return np.array([f.coefficients["x"], f.coefficients["_cons"]])

        res = bootstrap_vcov(refit, ds, VcovSpec("cluster_bootstrap", replications=80, seed=3))
        V = res.vcov
        assert np.max(np.abs(V - V.T)) < 1e-10
        assert np.min(np.linalg.eigvalsh(V)) > -1e-10


class TestVif:
    def test_orthogonal_regressors_unit_vif(self):
        x1 = np.array([1.0, -1.0, 1.0, -1.0])
        x2 = np.array([1.0, 1.0, -1.0, -1.0])
        ds = iid_panel(4, {"x1": x1, "x2": x2})
        out = vif(ds, ["x1", "x2"])
        assert out["x1"] == pytest.approx(1.0, abs=1e-10)
        assert out["x2"] == pytest.approx(1.0, abs=1e-10)

    def test_correlation_point_eight_closed_form(self):
        # build sample correlation exactly 0.8 from orthonormal pieces
        n = 50
        rng = np.random.default_rng(21)
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        a = (a - a.mean()) / a.std()
        b = b - b.mean()
        b -= (b @ a) / (a @ a) * a
        b /= b.std()
        x2 = 0.8 * a + np.sqrt(1 - 0.64) * b
        ds = iid_panel(n, {"x1": a, "x2": x2})
        out = vif(ds, ["x1", "x2"])
        # independent oracle: closed form 1 / (1 - r^2)
        r = np.corrcoef(a, x2)[0, 1]
        assert out["x1"] == pytest.approx(1.0 / (1.0 - r**2), abs=1e-6)
        assert out["x1"] == pytest.approx(1.0 / (1.0 - 0.64), abs=1e-6)

    def test_exact_collinearity_names_column(self):
        x = np.arange(10.0)
        ds = iid_panel(10, {"x1": x, "x2": x.copy()})
        with pytest.raises(CollinearityError, match="x1|x2"):
            vif(ds, ["x1", "x2"])

    def test_scale_invariance(self):
        rng = np.random.default_rng(31)
        x1 = rng.normal(size=30)
        x2 = x1 * 0.5 + rng.normal(size=30)
        ds = iid_panel(30, {"x1": x1, "x2": x2, "x2s": 100 * x2})
        v1 = vif(ds, ["x1", "x2"])
        v2 = vif(ds, ["x1", "x2s"])
        assert v1["x2"] == pytest.approx(v2["x2s"], rel=1e-10)
        assert v1["x1"] == pytest.approx(v2["x1"], rel=1e-10)

    def test_needs_two_regressors(self):
        ds = iid_panel(5, {"x": np.arange(5.0)})
        with pytest.raises(ValidationError):
            vif(ds, ["x"])


class TestWald:
    def fit_with(self, coefficients, vcov):
        return FitResult(coefficients=coefficients, vcov=np.asarray(vcov), n_obs=100)

    def test_zero_coefficients_give_zero_stat(self):
        fit = self.fit_with({"a": 0.0, "b": 0.0}, np.eye(2))
        stat, df, p = wald_chi2(fit, ["a", "b"])
        assert stat == 0.0 and df == 2 and p == pytest.approx(1.0)

    def test_scalar_reduction(self):
        fit = self.fit_with({"a": 1.5}, [[0.25]])
        stat, df, p = wald_chi2(fit, ["a"])
        assert stat == pytest.approx(1.5**2 / 0.25, rel=1e-12)
        assert df == 1

    def test_two_by_two_hand_inverted_oracle(self):
        beta = np.array([0.7, -0.3])
        V = np.array([[0.04, 0.01], [0.01, 0.09]])
        fit = self.fit_with({"a": beta[0], "b": beta[1]}, V)
        stat, df, _ = wald_chi2(fit, ["a", "b"])
        det = V[0, 0] * V[1, 1] - V[0, 1] * V[1, 0]
        Vinv = np.array([[V[1, 1], -V[0, 1]], [-V[1, 0], V[0, 0]]]) / det
        expected = float(beta @ Vinv @ beta)
        assert abs(stat - expected) < 1e-10

    def test_reorder_invariance(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(3, 3))
        V = A @ A.T + np.eye(3)
        fit = self.fit_with({"a": 1.0, "b": -2.0, "c": 0.5}, V)
        s1, *_ = wald_chi2(fit, ["a", "b", "c"])
        s2, *_ = wald_chi2(fit, ["c", "a", "b"])
        assert s1 == pytest.approx(s2, rel=1e-12)

    def test_unknown_name_errors(self):
        fit = self.fit_with({"a": 1.0}, [[1.0]])
        with pytest.raises(ValidationError, match="zz"):
            wald_chi2(fit, ["zz"])

    def test_singular_block_errors(self):
        V = np.array([[1.0, 1.0], [1.0, 1.0]])
        fit = self.fit_with({"a": 1.0, "b": 2.0}, V)
        with pytest.raises(ValidationError, match="singular"):
            wald_chi2(fit, ["a", "b"])


class TestLinearIndex:
    def test_applies_coefficients_and_dummies(self):
        ds = from_long(
            ["A", "A", "B", "B"],
            [2010, 2011, 2010, 2011],
            {"x": [1.0, 2.0, 3.0, np.nan]},
        )
        fit = FitResult(
            coefficients={"x": 2.0, "year=2011": 0.5, "_cons": 1.0},
            vcov=np.zeros((3, 3)),
            n_obs=4,
            notes={"fe_dummies": {"year=2011": ("year", 2011)}},
        )
        got = linear_index(fit, ds)
        assert got[0] == pytest.approx(3.0)
        assert got[1] == pytest.approx(5.5)
        assert got[2] == pytest.approx(7.0)
        assert np.isnan(got[3])
