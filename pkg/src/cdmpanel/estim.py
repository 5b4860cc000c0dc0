"""Shared estimation machinery.

Design-matrix assembly with complete-case handling and fixed-effect
absorption, OLS with analytic/HC1/cluster-bootstrap covariances, a
line-searched Newton maximizer for likelihoods, the entity-cluster bootstrap,
variance inflation factors, and Wald tests. Every downstream estimator builds
on these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg
from scipy import stats

from . import panel
from .exceptions import CollinearityError, ConvergenceError, ValidationError

INTERCEPT = "_cons"


@dataclass(frozen=True)
class VcovSpec:
    """How standard errors are computed: analytic, HC1 robust, or cluster bootstrap."""

    kind: str = "analytic"
    replications: int = 0
    seed: int | None = None
    cluster_dim: str = "entity"

    def __post_init__(self):
        if self.kind not in ("analytic", "hc_robust", "cluster_bootstrap"):
            raise ValidationError(f"unknown vcov kind {self.kind!r}")
        if self.kind == "cluster_bootstrap":
            if self.replications < 1:
                raise ValidationError("cluster_bootstrap needs replications >= 1")
            if self.seed is None:
                raise ValidationError("cluster_bootstrap needs a seed")

    def tag(self) -> str:
        if self.kind == "cluster_bootstrap":
            return f"cluster_bootstrap(B={self.replications}, seed={self.seed})"
        return {"analytic": "analytic", "hc_robust": "robust"}[self.kind]


@dataclass(frozen=True)
class ModelSpec:
    """Declarative regression description consumed by ols_fit."""

    dependent: str
    regressors: tuple[str, ...]
    intercept: bool = True
    fe_dims: tuple[str, ...] = ()
    cluster: str | None = None
    weights: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "fe_dims", tuple(self.fe_dims))
        if self.dependent in self.regressors:
            raise ValidationError(f"dependent {self.dependent!r} appears among the regressors")
        if not self.regressors and not self.intercept:
            raise ValidationError("need at least one regressor or an intercept")


@dataclass
class FitResult:
    """Coefficients plus covariance and diagnostics for one fitted model."""

    coefficients: dict[str, float]
    vcov: np.ndarray
    n_obs: int
    loglik: float | None = None
    wald_chi2: tuple[float, int, float] | None = None
    fit: dict | None = None
    se_method: str = "analytic"
    n_dropped: int = 0
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coefficients = {name: float(v) for name, v in self.coefficients.items()}
        k = len(self.coefficients)
        self.vcov = np.asarray(self.vcov, dtype=float)
        if self.vcov.shape != (k, k):
            raise ValidationError(f"vcov shape {self.vcov.shape} does not match {k} coefficients")
        if k and np.max(np.abs(self.vcov - self.vcov.T)) > 1e-10 * (1 + np.max(np.abs(self.vcov))):
            raise ValidationError("vcov is not symmetric")
        self.vcov = (self.vcov + self.vcov.T) / 2.0
        if k and np.min(np.diag(self.vcov)) < -1e-12:
            raise ValidationError("vcov has a negative diagonal entry")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.coefficients)

    def coef_vector(self) -> np.ndarray:
        return np.array(list(self.coefficients.values()))

    def se(self, name: str) -> float:
        i = self.names.index(name)
        return float(np.sqrt(max(self.vcov[i, i], 0.0)))

    def tstat(self, name: str) -> float:
        s = self.se(name)
        return self.coefficients[name] / s if s > 0 else np.inf

    def pvalue(self, name: str) -> float:
        s = self.se(name)
        if s <= 0:
            return 0.0 if self.coefficients[name] != 0 else 1.0
        z = abs(self.coefficients[name]) / s
        return float(2.0 * stats.norm.sf(z))


class BootstrapResult(NamedTuple):
    vcov: np.ndarray
    n_failed: int
    n_used: int


class MleResult(NamedTuple):
    params: np.ndarray
    vcov: np.ndarray
    loglik: float
    iterations: int
    grad_norm: float


def _fe_labels(ds: panel.PanelDataset, dims, mask: np.ndarray) -> tuple[list[np.ndarray], int]:
    """Label arrays for FE dims restricted to masked rows, plus absorbed df."""
    labels = []
    absorbed = 0
    for dim in dims:
        if dim == "entity":
            idx = ds.entity_index()[mask]
        elif dim == "year":
            idx = ds.year_index()[mask]
        else:
            vals = ds.column(dim)[mask]
            _, idx = np.unique(vals, return_inverse=True)
        _, idx = np.unique(idx, return_inverse=True)
        labels.append(idx)
        absorbed += int(idx.max()) if len(idx) else 0
    if dims:
        absorbed += 1  # grand mean
    return labels, absorbed


def complete_case_mask(ds: panel.PanelDataset, names) -> np.ndarray:
    mask = np.ones(ds.n_rows, dtype=bool)
    for name in names:
        mask &= np.isfinite(ds.column(name))
    return mask


def indicator_columns(ds: panel.PanelDataset, dims, mask: np.ndarray):
    """First-category-dropped indicator columns for the given dims on masked rows.

    Returns (names, matrix, mapping) where mapping[name] = (dim, level) so that
    predictions can place new rows in the right category.
    """
    names: list[str] = []
    cols: list[np.ndarray] = []
    mapping: dict[str, tuple[str, object]] = {}
    for dim in dims:
        if dim == "entity":
            idx = ds.entity_index()[mask]
            levels = [ds.entities[i] for i in np.unique(idx)]
            values = np.array([ds.entities[i] for i in idx], dtype=object)
        elif dim == "year":
            yrs = ds.row_years()[mask]
            levels = [int(y) for y in np.unique(yrs)]
            values = yrs
        else:
            vals = ds.column(dim)[mask]
            levels = [float(v) for v in np.unique(vals)]
            values = vals
        for level in levels[1:]:
            name = f"{dim}={level}"
            names.append(name)
            cols.append((values == level).astype(float))
            mapping[name] = (dim, level)
    matrix = np.column_stack(cols) if cols else np.empty((int(mask.sum()), 0))
    return names, matrix, mapping


def _checked_qr(X: np.ndarray, names):
    """Pivoted QR that raises CollinearityError naming a dependent column."""
    n, p = X.shape
    if p == 0:
        raise ValidationError("empty design matrix")
    q, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        culprit = names[piv[rank]]
        raise CollinearityError(
            f"design matrix is rank deficient: column {culprit!r} is linearly dependent on the others"
        )
    return q, r, piv


def assert_full_rank(X: np.ndarray, names) -> None:
    """Raise CollinearityError naming a dependent column if X is rank deficient."""
    _checked_qr(X, names)


def _solve_ls(X: np.ndarray, y: np.ndarray, names) -> np.ndarray:
    """Least squares with rank check; names a dependent column on deficiency."""
    p = X.shape[1]
    q, r, piv = _checked_qr(X, names)
    beta_p = scipy.linalg.solve_triangular(r[:p, :], q.T[:p] @ y)
    beta = np.empty(p)
    beta[piv] = beta_p
    return beta


def ols_fit(ds: panel.PanelDataset, spec: ModelSpec, vcov: VcovSpec | None = None) -> FitResult:
    """OLS on complete cases, absorbing fixed effects by demeaning.

    The intercept is reported only when no fixed effects are absorbed. r2 is
    the within-R2 when FE dims are present.
    """
    vcov = vcov or VcovSpec()
    used = [spec.dependent, *spec.regressors]
    cat_dims = [d for d in spec.fe_dims if d not in ("entity", "year")]
    used += cat_dims
    if spec.weights:
        used.append(spec.weights)
    if spec.cluster and spec.cluster not in ("entity",):
        used.append(spec.cluster)
    mask = complete_case_mask(ds, used)
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("no complete cases for the requested model")
    if n < len(spec.regressors) + 1:
        raise ValidationError(
            f"only {n} complete cases for {len(spec.regressors)} regressors"
        )
    n_dropped = ds.n_rows - n

    y = ds.column(spec.dependent)[mask]
    X_parts = [ds.column(name)[mask] for name in spec.regressors]
    names = list(spec.regressors)
    w = ds.column(spec.weights)[mask] if spec.weights else None
    if w is not None and (np.any(w < 0) or not np.sum(w) > 0):
        raise ValidationError("weights must be non-negative with a positive sum")

    absorbed_df = 0
    use_intercept = spec.intercept and not spec.fe_dims
    if spec.fe_dims:
        labels, absorbed_df = _fe_labels(ds, spec.fe_dims, mask)
        stacked = np.column_stack([y, *X_parts]) if X_parts else y[:, None]
        demeaned = panel.alternating_demean(stacked, labels, weights=w)
        y = demeaned[:, 0]
        X_parts = [demeaned[:, j + 1] for j in range(len(X_parts))]
    if use_intercept:
        X_parts.append(np.ones(n))
        names.append(INTERCEPT)
    X = np.column_stack(X_parts)

    if w is not None:
        sw = np.sqrt(w)
        Xw, yw = X * sw[:, None], y * sw
    else:
        Xw, yw = X, y
    beta = _solve_ls(Xw, yw, names)
    resid = y - X @ beta

    ww = w if w is not None else np.ones(n)
    rss = float(np.sum(ww * resid**2))
    if use_intercept or spec.fe_dims:
        ybar = np.average(y, weights=ww) if use_intercept else 0.0
        tss = float(np.sum(ww * (y - ybar) ** 2))
    else:
        tss = float(np.sum(ww * y**2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    p_total = X.shape[1] + absorbed_df
    dof = max(n - p_total, 1)
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / dof

    XtX_inv = np.linalg.inv(Xw.T @ Xw)
    if vcov.kind == "analytic":
        sigma2 = rss / dof
        V = sigma2 * XtX_inv
    elif vcov.kind == "hc_robust":
        score = X * (ww * resid)[:, None]
        V = XtX_inv @ (score.T @ score) @ XtX_inv
        V *= n / dof
    else:
        coef_map = dict(zip(names, beta))

        def refit(dsb: panel.PanelDataset) -> np.ndarray:
            res = ols_fit(dsb, spec, VcovSpec("analytic"))
            return np.array([res.coefficients[name] for name in names])

        boot = bootstrap_vcov(refit, ds, vcov)
        V = boot.vcov

    sigma2_mle = rss / n
    loglik = None
    if sigma2_mle > 0:
        loglik = float(-0.5 * n * (np.log(2.0 * np.pi * sigma2_mle) + 1.0))

    return FitResult(
        coefficients=dict(zip(names, beta)),
        vcov=V,
        n_obs=n,
        loglik=loglik,
        fit={"r2": r2, "adj_r2": adj_r2},
        se_method=vcov.tag(),
        n_dropped=n_dropped,
        notes={"absorbed_df": absorbed_df, "fe_dims": tuple(spec.fe_dims)},
    )


def mle_fit(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]],
    start,
    tol: float = 1e-8,
    max_iter: int = 200,
    max_halvings: int = 50,
) -> MleResult:
    """Maximize a likelihood by Newton steps with step-halving line search.

    ``objective(theta)`` returns (loglik, gradient, Hessian). Converged when the
    gradient max-norm drops below ``tol``; the covariance is the inverse of the
    negative Hessian at the optimum.
    """
    theta = np.array(start, dtype=float)
    f, g, H = objective(theta)
    if not np.isfinite(f):
        raise ValidationError("objective is not finite at the starting point")

    iterations = 0
    for _ in range(max_iter):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < tol:
            return MleResult(theta, _hessian_vcov(H), f, iterations, gnorm)
        step = _newton_direction(g, H)
        scale = 1.0
        accepted = False
        for _h in range(max_halvings + 1):
            cand = theta + scale * step
            fc, gc, Hc = objective(cand)
            if np.isfinite(fc) and fc >= f - 1e-12 * (1.0 + abs(f)):
                theta, f, g, H = cand, fc, gc, Hc
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            raise ConvergenceError(
                "line search failed: objective stayed non-finite or decreasing "
                f"after {max_halvings} halvings (gradient max-norm {float(np.max(np.abs(g))):.3e})"
            )
        iterations += 1
    gnorm = float(np.max(np.abs(g)))
    raise ConvergenceError(
        f"no convergence in {max_iter} iterations; final gradient max-norm {gnorm:.3e}"
    )


def _newton_direction(g: np.ndarray, H: np.ndarray) -> np.ndarray:
    try:
        step = np.linalg.solve(-H, g)
        if np.all(np.isfinite(step)) and float(step @ g) > 0:
            return step
    except np.linalg.LinAlgError:
        pass
    # fall back to (scaled) steepest ascent when the Hessian is unusable
    denom = float(np.max(np.abs(np.diag(H)))) if H.size else 1.0
    return g / max(denom, 1.0)


def _hessian_vcov(H: np.ndarray) -> np.ndarray:
    try:
        V = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise ConvergenceError(
            "Hessian is singular at the optimum (possible perfect separation "
            "or non-identified parameters)"
        ) from None
    if not np.all(np.isfinite(V)) or (V.size and np.min(np.diag(V)) <= 0):
        raise ConvergenceError(
            "Hessian is singular or indefinite at the optimum (possible perfect "
            "separation or non-identified parameters)"
        )
    return (V + V.T) / 2.0


def _cluster_positions(ds: panel.PanelDataset, cluster_dim: str) -> list[list[int]]:
    """Entity positions per cluster; non-entity dims must be entity-constant."""
    if cluster_dim == "entity":
        return [[i] for i in range(len(ds.entities))]
    vals = ds.column(cluster_dim).reshape(len(ds.entities), len(ds.periods))
    per_entity = []
    for i in range(len(ds.entities)):
        row = vals[i][np.isfinite(vals[i])]
        if row.size == 0:
            raise ValidationError(f"cluster column {cluster_dim!r} missing for entity {ds.entities[i]!r}")
        if np.ptp(row) > 0:
            raise ValidationError(f"cluster column {cluster_dim!r} varies within entity {ds.entities[i]!r}")
        per_entity.append(row[0])
    per_entity = np.asarray(per_entity)
    groups: dict[float, list[int]] = {}
    for i, v in enumerate(per_entity):
        groups.setdefault(float(v), []).append(i)
    return [groups[k] for k in sorted(groups)]


def bootstrap_vcov(
    refit: Callable[[panel.PanelDataset], np.ndarray],
    ds: panel.PanelDataset,
    vcov: VcovSpec,
) -> BootstrapResult:
    """Cluster bootstrap covariance of the coefficients returned by ``refit``.

    Clusters (entities by default) are resampled with replacement; replication
    r draws from an RNG stream keyed by (seed, r), so results do not depend on
    execution order. Failed replications are dropped and counted; more than 10%
    failures is an error.
    """
    if vcov.kind != "cluster_bootstrap":
        raise ValidationError("bootstrap_vcov requires a cluster_bootstrap VcovSpec")
    B = vcov.replications
    clusters = _cluster_positions(ds, vcov.cluster_dim)
    if not clusters:
        raise ValidationError("no clusters to resample")

    draws = []
    n_failed = 0
    for r in range(B):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=vcov.seed, spawn_key=(r,)))
        picks = rng.integers(0, len(clusters), size=len(clusters))
        positions = [p for c in picks for p in clusters[c]]
        labels = [f"{ds.entities[p]}#{j}" for j, p in enumerate(positions)]
        try:
            dsb = panel.take_entities(ds, positions, labels)
            draws.append(np.asarray(refit(dsb), dtype=float))
        except Exception:
            n_failed += 1
    if not draws:
        raise ConvergenceError(f"all {B} bootstrap replications failed")
    if n_failed > 0.10 * B:
        raise ConvergenceError(f"{n_failed} of {B} bootstrap replications failed (> 10%)")
    mat = np.vstack(draws)
    if mat.shape[0] < 2:
        V = np.zeros((mat.shape[1], mat.shape[1]))
    else:
        V = np.atleast_2d(np.cov(mat, rowvar=False, ddof=1))
    return BootstrapResult((V + V.T) / 2.0, n_failed, mat.shape[0])


def linear_index(
    fit: FitResult,
    ds: panel.PanelDataset,
    exclude: tuple[str, ...] = (),
) -> np.ndarray:
    """Apply a fit's coefficients to dataset rows, returning the linear predictor.

    Indicator-column coefficients are placed through the (dim, level) mapping
    recorded in ``fit.notes['fe_dummies']``; unseen categories count as the
    dropped baseline. Rows missing any required input come back NaN.
    """
    dummies: dict[str, tuple[str, object]] = fit.notes.get("fe_dummies", {})
    out = np.zeros(ds.n_rows)
    missing = np.zeros(ds.n_rows, dtype=bool)
    years = ds.row_years()
    ent_idx = ds.entity_index()
    for name, coef in fit.coefficients.items():
        if name in exclude:
            continue
        if name == INTERCEPT:
            out += coef
        elif name in dummies:
            dim, level = dummies[name]
            if dim == "year":
                match = years == level
            elif dim == "entity":
                match = np.array([ds.entities[i] == level for i in ent_idx])
            else:
                vals = ds.column(dim)
                missing |= ~np.isfinite(vals)
                match = vals == level
            out += coef * match.astype(float)
        else:
            vals = ds.column(name)
            missing |= ~np.isfinite(vals)
            out = out + coef * np.where(np.isfinite(vals), vals, 0.0)
    out[missing] = np.nan
    return out


def vif(ds: panel.PanelDataset, regressors) -> dict[str, float]:
    """Variance inflation factors 1/(1-R2_j) from auxiliary regressions."""
    regressors = list(regressors)
    if len(regressors) < 2:
        raise ValidationError("vif needs at least two regressors")
    mask = complete_case_mask(ds, regressors)
    n = int(mask.sum())
    if n < len(regressors) + 1:
        raise ValidationError("not enough complete cases for vif")
    X = np.column_stack([ds.column(name)[mask] for name in regressors])
    return vif_matrix(X, regressors)


def vif_matrix(X: np.ndarray, names) -> dict[str, float]:
    n = X.shape[0]
    out: dict[str, float] = {}
    ones = np.ones((n, 1))
    for j, name in enumerate(names):
        yj = X[:, j]
        others = np.hstack([np.delete(X, j, axis=1), ones])
        coef, *_ = np.linalg.lstsq(others, yj, rcond=None)
        resid = yj - others @ coef
        tss = float(np.sum((yj - yj.mean()) ** 2))
        if tss <= 0:
            raise CollinearityError(f"regressor {name!r} is constant")
        r2 = 1.0 - float(np.sum(resid**2)) / tss
        if r2 >= 1.0 - 1e-12:
            raise CollinearityError(f"regressor {name!r} is perfectly collinear with the others")
        out[name] = 1.0 / (1.0 - r2)
    return out


def wald_chi2(fit: FitResult, restricted) -> tuple[float, int, float]:
    """Wald test that the named coefficients are jointly zero."""
    restricted = list(restricted)
    if not restricted:
        raise ValidationError("empty restriction set")
    names = fit.names
    for name in restricted:
        if name not in names:
            raise ValidationError(f"coefficient {name!r} not in the fit")
    idx = [names.index(name) for name in restricted]
    beta = fit.coef_vector()[idx]
    V = fit.vcov[np.ix_(idx, idx)]
    try:
        sol = np.linalg.solve(V, beta)
    except np.linalg.LinAlgError:
        raise ValidationError("restricted vcov block is singular") from None
    if not np.all(np.isfinite(sol)):
        raise ValidationError("restricted vcov block is singular")
    stat = float(beta @ sol)
    df = len(restricted)
    p = float(stats.chi2.sf(stat, df))
    return stat, df, p
