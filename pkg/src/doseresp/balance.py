"""Common-support and covariate-balance diagnostics.

Propensity scores come from a logistic fit by iteratively reweighted least
squares on lagged covariates; Mahalanobis distances give a score-free
cross-check; quintile balance tables report Welch t-tests per covariate;
nearest-neighbour matching on the score feeds a matched re-estimation of
the dose-response curve.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.special import expit

from .errors import (
    ConvergenceFailure,
    EmptySample,
    MissingClass,
    NoControls,
    NonPositiveForLog,
    PerfectSeparation,
    SingularCovariance,
    SingularMatrix,
    ZeroVariance,
)
from .estimator import DoseResponseCurve, FitResult, ModelSpec, _estimation_frame, _fit_frame
from .panel import Panel

GRAD_TOL = 1e-8
LOGLIK_RTOL = 1e-10
MAX_ITER = 100


# ---------------------------------------------------------------------------
# covariate preparation


def prepare_covariates(
    frame: pd.DataFrame,
    continuous: Sequence[str],
    dummies: Sequence[str] = (),
) -> pd.DataFrame:
    """Log then z-score the skewed continuous covariates; dummies pass through.

    Standardisation uses the sample (n-1) deviation over non-missing rows.
    """
    out = {}
    for name in continuous:
        values = frame[name].astype(float)
        present = values.dropna()
        if (present <= 0).any():
            raise NonPositiveForLog(f"column {name!r} has non-positive values")
        logged = np.log(values)
        sd = logged.std(ddof=1)
        if not np.isfinite(sd) or sd == 0.0:
            raise ZeroVariance(f"column {name!r} has zero variance after log")
        out[name] = (logged - logged.mean()) / sd
    for name in dummies:
        out[name] = frame[name].astype(float)
    return pd.DataFrame(out, index=frame.index)


# ---------------------------------------------------------------------------
# propensity model


@dataclass
class PropensityModel:
    """Logistic propensity fit with convergence metadata."""

    columns: list[str]
    coefficients: np.ndarray    # intercept first
    scores: np.ndarray
    n_iter: int
    grad_norm: float
    loglik: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xd = np.column_stack([np.ones(len(X)), np.asarray(X, dtype=float)])
        return expit(Xd @ self.coefficients)


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logit(X, labels) -> PropensityModel:
    """Maximum-likelihood logistic regression by IRLS (Newton) steps.

    Stops when the gradient norm drops below 1e-8 or the relative
    log-likelihood change falls below 1e-10, capped at 100 iterations.
    Diverging coefficients on perfectly classified data raise
    PerfectSeparation; a singular information matrix raises SingularMatrix.
    """
    if isinstance(X, pd.DataFrame):
        names = list(X.columns)
        X = X.to_numpy(dtype=float)
    else:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        names = [f"x{i}" for i in range(X.shape[1])]
    y = np.asarray(labels, dtype=float)
    classes = np.unique(y)
    if not np.isin(classes, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    if len(classes) < 2:
        raise MissingClass("both treated and control labels must be present")

    Xd = np.column_stack([np.ones(len(y)), X])
    beta = np.zeros(Xd.shape[1])
    ll_old = _loglik(Xd @ beta, y)
    grad_norm = np.inf
    for it in range(1, MAX_ITER + 1):
        eta = Xd @ beta
        p = expit(eta)
        grad = Xd.T @ (y - p)
        grad_norm = float(np.linalg.norm(grad))
        separated = np.all(eta[y == 1.0] > 0) and np.all(eta[y == 0.0] < 0)
        if separated and np.max(np.abs(eta)) > 30.0:
            raise PerfectSeparation("coefficients diverge: classes are separable")
        if grad_norm < GRAD_TOL:
            break
        weights = np.clip(p * (1.0 - p), 1e-12, None)
        root_w = np.sqrt(weights)
        z = eta + (y - p) / weights
        beta, _, rank, _ = np.linalg.lstsq(Xd * root_w[:, None], z * root_w, rcond=None)
        if rank < Xd.shape[1] or not np.all(np.isfinite(beta)):
            raise SingularMatrix("information matrix is singular")
        ll = _loglik(Xd @ beta, y)
        if abs(ll - ll_old) < LOGLIK_RTOL * (abs(ll_old) + 1e-300):
            eta = Xd @ beta
            grad_norm = float(np.linalg.norm(Xd.T @ (y - expit(eta))))
            break
        ll_old = ll
    else:
        raise ConvergenceFailure(f"IRLS did not converge in {MAX_ITER} iterations")

    scores = expit(Xd @ beta)
    if np.any(scores <= 0.0) or np.any(scores >= 1.0):
        raise PerfectSeparation("fitted scores saturate at 0/1")
    return PropensityModel(
        columns=names,
        coefficients=beta,
        scores=scores,
        n_iter=it,
        grad_norm=grad_norm,
        loglik=_loglik(Xd @ beta, y),
    )


# ---------------------------------------------------------------------------
# Mahalanobis distances


def _check_covariance(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.allclose(sigma, sigma.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    if np.linalg.cond(sigma) > 1e12:
        raise SingularCovariance("covariance condition number exceeds 1e12")
    return sigma


def mahalanobis(x, mu, sigma) -> float:
    """sqrt((x-mu)' Sigma^-1 (x-mu)) via a Cholesky solve, never an inverse."""
    sigma = _check_covariance(sigma)
    diff = np.asarray(x, dtype=float) - np.asarray(mu, dtype=float)
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance is not positive definite: {exc}") from exc
    z = linalg.solve_triangular(L, diff, lower=True)
    return float(np.linalg.norm(z))


def mahalanobis_distances(X, mu, sigma) -> np.ndarray:
    """Row-wise Mahalanobis distances of a sample from (mu, Sigma)."""
    sigma = _check_covariance(sigma)
    diff = np.asarray(X, dtype=float) - np.asarray(mu, dtype=float)
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"covariance is not positive definite: {exc}") from exc
    z = linalg.solve_triangular(L, diff.T, lower=True)
    return np.sqrt(np.sum(z * z, axis=0))


# ---------------------------------------------------------------------------
# balance tables


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    mean_control: float
    mean_treated: float
    difference: float
    p_value: float


@dataclass
class BalanceTable:
    """Per-covariate treated/control comparison within one score stratum."""

    stratum: int
    n_control: int
    n_treated: int
    rows: list[BalanceRow]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "covariate": [r.covariate for r in self.rows],
                "mean_control": [r.mean_control for r in self.rows],
                "mean_treated": [r.mean_treated for r in self.rows],
                "difference": [r.difference for r in self.rows],
                "p_value": [r.p_value for r in self.rows],
            }
        )


def welch_ttest(treated: np.ndarray, control: np.ndarray) -> tuple[float, float, float]:
    """Welch two-sample t statistic, degrees of freedom and p-value."""
    t_arr = np.asarray(treated, dtype=float)
    c_arr = np.asarray(control, dtype=float)
    n1, n0 = len(t_arr), len(c_arr)
    if n1 < 2 or n0 < 2:
        raise ValueError("welch_ttest needs at least 2 observations per class")
    diff = t_arr.mean() - c_arr.mean()
    v1 = t_arr.var(ddof=1) / n1
    v0 = c_arr.var(ddof=1) / n0
    denom = v1 + v0
    if denom == 0.0:
        return (0.0, float(n1 + n0 - 2), 1.0) if diff == 0.0 else (np.inf, float(n1 + n0 - 2), 0.0)
    t_stat = diff / np.sqrt(denom)
    df = denom**2 / (v1**2 / (n1 - 1) + v0**2 / (n0 - 1))
    p = 2.0 * stats.t.sf(abs(t_stat), df)
    return float(t_stat), float(df), float(p)


def quintile_balance(
    scores: np.ndarray, covariates: pd.DataFrame, labels: np.ndarray
) -> list[BalanceTable]:
    """Balance tables per propensity-score quintile.

    Strata are formed by rank so sizes differ by at most one.  A stratum
    missing one class, or with fewer than 2 rows in a class, reports a
    missing p-value for every covariate.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(scores) != len(labels) or len(scores) != len(covariates):
        raise ValueError("scores, covariates and labels must align")
    order = np.argsort(scores, kind="stable")
    tables = []
    for s, members in enumerate(np.array_split(order, 5), start=1):
        sub = covariates.iloc[members]
        lab = labels[members]
        treated = sub[lab == 1.0]
        control = sub[lab == 0.0]
        rows = []
        for name in covariates.columns:
            m_t = float(treated[name].mean()) if len(treated) else np.nan
            m_c = float(control[name].mean()) if len(control) else np.nan
            if len(treated) >= 2 and len(control) >= 2:
                _, _, p = welch_ttest(treated[name].to_numpy(), control[name].to_numpy())
            else:
                p = np.nan
            rows.append(BalanceRow(name, m_c, m_t, m_t - m_c, p))
        tables.append(
            BalanceTable(stratum=s, n_control=len(control), n_treated=len(treated), rows=rows)
        )
    return tables


def _stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def render_balance_table(table: BalanceTable) -> str:
    """Aligned-text rendering with significance stars at 0.05/0.01/0.001."""
    width = max([len("covariate")] + [len(r.covariate) for r in table.rows])
    header = (
        f"Quintile {table.stratum} "
        f"(control n={table.n_control}, treated n={table.n_treated})"
    )
    lines = [
        header,
        f"{'covariate':<{width}} {'control':>12} {'treated':>12} "
        f"{'difference':>12} {'p-value':>10}",
    ]
    for r in table.rows:
        p_txt = f"{r.p_value:.4f}" if np.isfinite(r.p_value) else "."
        lines.append(
            f"{r.covariate:<{width}} {r.mean_control:>12.5f} {r.mean_treated:>12.5f} "
            f"{r.difference:>12.5f} {p_txt:>10}{_stars(r.p_value)}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# nearest-neighbour matching


@dataclass
class MatchedSample:
    """Treated/control pairs from nearest-neighbour score matching."""

    pairs: list[tuple[int, int, float]]    # (treated index, control index, distance)
    replacement: bool
    caliper: float | None
    n_dropped: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "treated": [p[0] for p in self.pairs],
                "control": [p[1] for p in self.pairs],
                "distance": [p[2] for p in self.pairs],
            }
        )


def nn_match(
    scores: np.ndarray,
    labels: np.ndarray,
    replacement: bool = True,
    caliper: float | None = None,
    index: np.ndarray | None = None,
) -> MatchedSample:
    """Match each treated row to the control minimising |score difference|.

    Ties break toward the lowest row index.  With a caliper, treated rows
    whose nearest control is farther than the caliper are dropped and
    counted.  ``index`` relabels rows (e.g. panel positions); matching is
    still performed in stable input order.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    index = np.arange(len(scores)) if index is None else np.asarray(index)
    treated_rows = np.flatnonzero(labels == 1.0)
    control_rows = np.flatnonzero(labels == 0.0)
    if control_rows.size == 0:
        raise NoControls("no control rows available for matching")
    if treated_rows.size == 0:
        raise MissingClass("no treated rows to match")

    pairs: list[tuple[int, int, float]] = []
    n_dropped = 0
    if replacement:
        order = np.lexsort((control_rows, scores[control_rows]))
        c_rows = control_rows[order]
        c_scores = scores[control_rows][order]
        # first position of each run of equal scores: its row index is minimal
        run_start = np.zeros(len(c_scores), dtype=int)
        for i in range(1, len(c_scores)):
            run_start[i] = run_start[i - 1] if c_scores[i] == c_scores[i - 1] else i
        for t in treated_rows:
            s = scores[t]
            pos = np.searchsorted(c_scores, s, side="left")
            best = None
            if pos < len(c_scores):
                best = (c_scores[pos] - s, int(c_rows[run_start[pos]]))
            if pos > 0:
                left = (s - c_scores[pos - 1], int(c_rows[run_start[pos - 1]]))
                if best is None or left[0] < best[0] or (left[0] == best[0] and left[1] < best[1]):
                    best = left
            dist, row = best
            if caliper is not None and dist > caliper:
                n_dropped += 1
                continue
            pairs.append((int(index[t]), int(index[row]), float(dist)))
    else:
        available = np.ones(control_rows.size, dtype=bool)
        c_scores = scores[control_rows]
        for t in treated_rows:
            if not available.any():
                n_dropped += treated_rows.size - len(pairs) - n_dropped
                break
            dist = np.abs(c_scores - scores[t])
            dist[~available] = np.inf
            d_min = dist.min()
            if caliper is not None and d_min > caliper:
                n_dropped += 1
                continue
            candidates = np.flatnonzero(dist == d_min)
            pick = candidates[np.argmin(control_rows[candidates])]
            available[pick] = False
            pairs.append((int(index[t]), int(index[control_rows[pick]]), float(d_min)))
    return MatchedSample(
        pairs=pairs, replacement=replacement, caliper=caliper, n_dropped=n_dropped
    )


def matched_reestimate(
    panel: Panel,
    matched: MatchedSample,
    spec: ModelSpec,
    grid: np.ndarray | None = None,
    alpha: float = 0.05,
) -> tuple[FitResult, DoseResponseCurve]:
    """Re-run the dose regression on matched treated plus control rows.

    Pair indices must be row positions into ``panel.data``.  Controls
    matched with replacement enter with their multiplicity.
    """
    if not matched.pairs:
        raise EmptySample("empty matched sample")
    positions = [p[0] for p in matched.pairs] + [p[1] for p in matched.pairs]
    frame, n_dropped = _estimation_frame(panel, spec, positions=positions)
    return _fit_frame(frame, spec, n_dropped, grid, alpha)
