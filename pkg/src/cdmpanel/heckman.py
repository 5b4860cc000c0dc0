"""Selection-corrected R&D intensity: probit disclosure model, inverse Mills
ratio, two-step estimation, and level predictions for all rows.

Step 1 fits a probit for the disclosure indicator on the exclusion
restrictions plus the outcome controls. Step 2 regresses the outcome on the
controls and the inverse Mills ratio over the disclosing rows only. The
correction coefficient lambda, the implied error correlation rho, and the
outcome error scale sigma follow the classical two-step decomposition

    sigma^2 = mean(e^2) + lambda^2 * mean(IMR * (IMR + index)),
    rho     = clamp(lambda / sigma, -1, 1),

with sigma redefined as |lambda| whenever rho is clamped so that
lambda = rho * sigma always holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from . import estim, panel
from .estim import INTERCEPT, FitResult, MleResult, VcovSpec
from .exceptions import CollinearityError, ValidationError

IMR_NAME = "IMR"

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class HeckmanSpec:
    """Two-step selection model description."""

    outcome: str
    selection: str
    outcome_regressors: tuple[str, ...]
    exclusion_restrictions: tuple[str, ...]
    fe_dims: tuple[str, ...] = ()
    vcov: VcovSpec = field(default_factory=VcovSpec)

    def __post_init__(self):
        object.__setattr__(self, "outcome_regressors", tuple(self.outcome_regressors))
        object.__setattr__(self, "exclusion_restrictions", tuple(self.exclusion_restrictions))
        object.__setattr__(self, "fe_dims", tuple(self.fe_dims))
        shared = set(self.exclusion_restrictions) & set(self.outcome_regressors)
        if shared:
            raise ValidationError(
                f"exclusion restrictions {sorted(shared)} also appear among the outcome "
                "regressors; they must enter the selection equation only"
            )


@dataclass
class HeckmanFit:
    """Both steps plus the selection-correction diagnostics."""

    probit: FitResult
    outcome: FitResult
    lambda_: float
    rho: float
    sigma: float
    imr_vif: float
    step2_vif: dict[str, float]

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValidationError("rho must lie in [-1, 1]")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")


def inverse_mills(index):
    """phi(z)/Phi(z), computed in log space so both tails stay accurate."""
    arr = np.asarray(index, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("inverse_mills requires finite input")
    log_pdf = -0.5 * arr**2 - _LOG_SQRT_2PI
    out = np.exp(log_pdf - log_ndtr(arr))
    if np.isscalar(index) or arr.ndim == 0:
        return float(out)
    return out


def _probit_parts(theta: np.ndarray, y: np.ndarray, X: np.ndarray):
    z = X @ theta
    log_cdf = log_ndtr(z)
    log_sf = log_ndtr(-z)
    ll = float(np.sum(np.where(y > 0.5, log_cdf, log_sf)))
    log_pdf = -0.5 * z**2 - _LOG_SQRT_2PI
    m = np.where(y > 0.5, np.exp(log_pdf - log_cdf), -np.exp(log_pdf - log_sf))
    grad = X.T @ m
    h = m * (m + z)
    hess = -(X * h[:, None]).T @ X
    return ll, grad, hess


def probit_mle(y: np.ndarray, X: np.ndarray, tol: float = 1e-8, max_iter: int = 200) -> MleResult:
    """Probit maximum likelihood on raw arrays (no dataset plumbing).

    Perfectly separated samples have no finite maximizer; the flat plateau the
    solver lands on is detected and reported as non-convergence.
    """
    from .exceptions import ConvergenceError

    res = estim.mle_fit(lambda t: _probit_parts(t, y, X), np.zeros(X.shape[1]), tol=tol, max_iter=max_iter)
    z = X @ res.params
    p = np.exp(log_ndtr(z))
    separated = np.all(np.where(y > 0.5, p > 1.0 - 1e-6, p < 1e-6))
    if separated and np.max(np.abs(res.params)) > 5.0:
        raise ConvergenceError(
            "probit did not converge: the sample is perfectly separated and the "
            "coefficients diverge"
        )
    return res


def probit_fit(
    ds: panel.PanelDataset,
    dependent: str,
    regressors,
    fe_dims=(),
    vcov: VcovSpec | None = None,
) -> FitResult:
    """Probit with FE dims entered as indicator columns (first category dropped)."""
    regressors = list(regressors)
    cat_cols = [d for d in fe_dims if d not in ("entity", "year")]
    mask = estim.complete_case_mask(ds, [dependent, *regressors, *cat_cols])
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("no complete cases for the probit")
    y = ds.column(dependent)[mask]
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValidationError(f"probit dependent {dependent!r} must be binary 0/1")

    dummy_names, dummy_mat, mapping = estim.indicator_columns(ds, fe_dims, mask)
    names = [*regressors, *dummy_names, INTERCEPT]
    X = np.column_stack([*(ds.column(r)[mask] for r in regressors), dummy_mat, np.ones(n)])
    if n < X.shape[1] + 1:
        raise ValidationError(f"only {n} complete cases for {X.shape[1]} probit parameters")

    res = probit_mle(y, X)
    if vcov is not None and vcov.kind == "cluster_bootstrap":
        def refit(dsb: panel.PanelDataset) -> np.ndarray:
            fr = probit_fit(dsb, dependent, regressors, fe_dims)
            return np.array([fr.coefficients[name] for name in names])

        boot = estim.bootstrap_vcov(refit, ds, vcov)
        V, tag = boot.vcov, vcov.tag()
    else:
        V, tag = res.vcov, "analytic"
    return FitResult(
        coefficients=dict(zip(names, res.params)),
        vcov=V,
        n_obs=n,
        loglik=res.loglik,
        se_method=tag,
        n_dropped=ds.n_rows - n,
        notes={"model": "probit", "fe_dummies": mapping},
    )


def heckman_two_step(ds: panel.PanelDataset, spec: HeckmanSpec) -> HeckmanFit:
    """Probit on the full sample, then selection-corrected OLS on disclosing rows."""
    sel = ds.column(spec.selection)
    sel_regs = [*spec.exclusion_restrictions, *spec.outcome_regressors]
    model_cols = [spec.outcome, *sel_regs, *[d for d in spec.fe_dims if d not in ("entity", "year")]]
    has_data = np.zeros(ds.n_rows, dtype=bool)
    for name in model_cols:
        has_data |= np.isfinite(ds.column(name))
    if np.any(~np.isfinite(sel) & has_data):
        raise ValidationError(
            f"selection column {spec.selection!r} must be observed on every row with model data"
        )
    observed = np.isfinite(sel)
    if not np.all(np.isin(sel[observed], (0.0, 1.0))):
        raise ValidationError(f"selection column {spec.selection!r} must be binary 0/1")
    if not np.any(sel[observed] == 1.0):
        raise ValidationError("no selected rows: selection column is all zero")
    outcome = ds.column(spec.outcome)
    bad = observed & (sel == 1.0) & ~np.isfinite(outcome)

    if bad.any():
        raise ValidationError(
            f"outcome {spec.outcome!r} is missing on {int(bad.sum())} selected rows"
        )

    probit = probit_fit(ds, spec.selection, sel_regs, spec.fe_dims)
    index = estim.linear_index(probit, ds)
    ok = np.isfinite(index)
    imr = np.full(ds.n_rows, np.nan)
    imr[ok] = inverse_mills(index[ok])
    ds_imr = ds.with_column(IMR_NAME, imr, note="inverse Mills ratio from the disclosure probit")
    selected = panel.filter_rows(ds_imr, f"{spec.selection} == 1")

    step2_regs = [*spec.outcome_regressors]
    cat_cols = [d for d in spec.fe_dims if d not in ("entity", "year")]
    cat_mask = estim.complete_case_mask(selected, [spec.outcome, *step2_regs, IMR_NAME, *cat_cols])
    dummy_names, dummy_mat, mapping = estim.indicator_columns(selected, spec.fe_dims, cat_mask)
    work = selected
    for j, name in enumerate(dummy_names):
        col = np.full(selected.n_rows, np.nan)
        col[cat_mask] = dummy_mat[:, j]
        work = work.with_column(name, col)
    model = estim.ModelSpec(
        dependent=spec.outcome,
        regressors=tuple([*step2_regs, *dummy_names, IMR_NAME]),
        intercept=True,
    )
    try:
        outcome_fit = estim.ols_fit(work, model, VcovSpec("analytic"))
    except CollinearityError as exc:
        raise CollinearityError(
            f"{exc}; the selection correction is collinear with the outcome regressors - "
            "consider adding exclusion restrictions to the selection equation"
        ) from None
    outcome_fit.notes["fe_dummies"] = mapping
    outcome_fit.notes["model"] = "heckman_step2"

    lam = outcome_fit.coefficients[IMR_NAME]
    mask2 = estim.complete_case_mask(work, [spec.outcome, *model.regressors])
    y2 = work.column(spec.outcome)[mask2]
    X2 = np.column_stack([*(work.column(r)[mask2] for r in model.regressors), np.ones(int(mask2.sum()))])
    beta = np.array([outcome_fit.coefficients[r] for r in (*model.regressors, INTERCEPT)])
    resid = y2 - X2 @ beta
    imr2 = work.column(IMR_NAME)[mask2]
    index2 = estim.linear_index(probit, work)[mask2]
    delta_bar = float(np.mean(imr2 * (imr2 + index2)))
    sigma2 = float(np.mean(resid**2)) + lam**2 * delta_bar
    sigma = float(np.sqrt(sigma2))
    rho_raw = lam / sigma if sigma > 0 else np.inf
    if abs(rho_raw) > 1.0:
        rho = float(np.sign(rho_raw))
        sigma = abs(lam)
    else:
        rho = float(rho_raw)

    X_vif = np.column_stack([*(work.column(r)[mask2] for r in model.regressors)])
    step2_vif = estim.vif_matrix(X_vif, list(model.regressors))
    imr_vif = step2_vif[IMR_NAME]

    if spec.vcov.kind == "cluster_bootstrap":
        order = list(outcome_fit.coefficients)
        spec_analytic = HeckmanSpec(
            outcome=spec.outcome,
            selection=spec.selection,
            outcome_regressors=spec.outcome_regressors,
            exclusion_restrictions=spec.exclusion_restrictions,
            fe_dims=spec.fe_dims,
            vcov=VcovSpec("analytic"),
        )

        def refit(dsb: panel.PanelDataset) -> np.ndarray:
            fit_b = heckman_two_step(dsb, spec_analytic)
            return np.array([fit_b.outcome.coefficients[name] for name in order])

        boot = estim.bootstrap_vcov(refit, ds, spec.vcov)
        outcome_fit.vcov = boot.vcov
        outcome_fit.se_method = spec.vcov.tag()
        outcome_fit.notes["bootstrap_failures"] = boot.n_failed

    slopes = [r for r in spec.outcome_regressors]
    if slopes:
        outcome_fit.wald_chi2 = estim.wald_chi2(outcome_fit, slopes)
        outcome_fit.notes["wald_restrictions"] = tuple(slopes)

    return HeckmanFit(
        probit=probit,
        outcome=outcome_fit,
        lambda_=float(lam),
        rho=rho,
        sigma=sigma,
        imr_vif=float(imr_vif),
        step2_vif=step2_vif,
    )


def predict_linear_index(fit: HeckmanFit, ds: panel.PanelDataset) -> np.ndarray:
    """Step-2 prediction X'beta for every row, excluding the IMR correction term.

    Rows missing any outcome regressor yield missing predictions; disclosure
    status does not matter, so non-disclosing rows are predicted too.
    """
    for name in fit.outcome.coefficients:
        if name in (INTERCEPT, IMR_NAME) or name in fit.outcome.notes.get("fe_dummies", {}):
            continue
        if not ds.has_column(name):
            raise ValidationError(f"regressor {name!r} absent from the dataset")
    return estim.linear_index(fit.outcome, ds, exclude=(IMR_NAME,))
