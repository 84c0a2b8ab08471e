"""Within-transformed polynomial dose regression with clustered inference.

The estimating equation regresses the within-transformed outcome on
within-transformed controls, the treatment indicator, the treatment
interacted with centered dose polynomials, and explicit year (and
optionally industry-year) dummies.  Least squares runs through a
column-pivoted QR; coefficient covariance is the CR1 cluster-robust
sandwich; the fitted dose-response curve carries pointwise delta-method
confidence bands and the maximal significant dose segments.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import (
    DegenerateResample,
    EmptySample,
    EmptySubsample,
    GridOutsideSupportWarning,
    InvalidConfig,
    MissingColumn,
    RankDeficient,
    SingleCluster,
)
from .panel import Panel, build_treatment, within_values

DEFAULT_GRID = np.linspace(0.0, 100.0, 101)


@dataclass(frozen=True)
class TreatmentRule:
    """Treatment = positive export revenues ``lag`` years earlier."""

    export_col: str
    lag: int = 1

    def __post_init__(self):
        if self.lag < 1:
            raise InvalidConfig(f"treatment lag must be >= 1, got {self.lag}")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one estimating equation."""

    outcome: str
    dose: str
    degree: int = 3
    controls: tuple[str, ...] = ()
    treatment: str | TreatmentRule = "w"
    firm_fe: bool = True
    year_fe: bool = True
    industry_year_fe: bool = False
    industry: str | None = None
    interactions: tuple[str, ...] = ()
    outcome_kind: str = "continuous"
    centering: str = "treated"

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        if not 1 <= self.degree <= 5:
            raise InvalidConfig(f"polynomial degree must be in 1..5, got {self.degree}")
        if self.outcome in self.controls:
            raise InvalidConfig(f"outcome {self.outcome!r} cannot be a control")
        if self.dose in self.controls:
            raise InvalidConfig(f"dose {self.dose!r} cannot be a control")
        if self.outcome_kind not in ("continuous", "binary"):
            raise InvalidConfig(f"unknown outcome_kind {self.outcome_kind!r}")
        if self.centering not in ("treated", "all"):
            raise InvalidConfig(f"unknown centering {self.centering!r}")
        if self.industry_year_fe and not self.industry:
            raise InvalidConfig("industry_year_fe requires an industry column")
        for name in self.interactions:
            if name not in self.controls:
                raise InvalidConfig(f"interaction term {name!r} is not a control")


@dataclass
class Design:
    """Assembled design matrix with aligned response and cluster codes."""

    matrix: np.ndarray
    columns: list[str]
    response: np.ndarray
    clusters: np.ndarray
    row_index: np.ndarray
    centering: dict[int, float]
    dose_support: dict[str, float]
    n_dropped: int


@dataclass
class FitResult:
    """Coefficients, cluster-robust covariance and fit diagnostics."""

    columns: list[str]
    beta: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int
    r_squared: float
    rmse: float
    degree: int
    centering: dict[int, float]
    dose_support: dict[str, float]
    n_dropped: int

    def __post_init__(self):
        k = len(self.columns)
        if self.beta.shape != (k,) or self.vcov.shape != (k, k):
            raise InvalidConfig("coefficient and covariance dimensions disagree")

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])

    def se(self, name: str) -> float:
        i = self.columns.index(name)
        return float(np.sqrt(self.vcov[i, i]))

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.beta)))

    def to_json_dict(self) -> dict:
        return {
            "coefficients": self.coefficients,
            "se": {c: self.se(c) for c in self.columns},
            "vcov": {"columns": self.columns, "matrix": self.vcov.tolist()},
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r_squared": self.r_squared,
            "rmse": self.rmse,
            "degree": self.degree,
            "centering": {str(j): m for j, m in self.centering.items()},
            "dose_support": self.dose_support,
            "n_dropped": self.n_dropped,
        }


@dataclass(frozen=True)
class Segment:
    """Maximal run of grid doses with a significant effect of one sign."""

    start: float
    end: float
    sign: int


@dataclass
class DoseResponseCurve:
    """Dose grid with effects, pointwise bands and significant segments."""

    dose: np.ndarray
    effect: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    significant: np.ndarray
    alpha: float
    segments: list[Segment] = field(default_factory=list)
    band_method: str = "delta"
    n_redrawn: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "dose": self.dose,
                "effect": self.effect,
                "se": self.se,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "significant": self.significant.astype(int),
            }
        )


# ---------------------------------------------------------------------------
# design assembly


def _resolve_treatment(panel: Panel, spec: ModelSpec) -> pd.Series:
    if isinstance(spec.treatment, TreatmentRule):
        return build_treatment(panel, spec.treatment.export_col, spec.treatment.lag)
    w = panel.column(spec.treatment).astype(float)
    present = w.dropna()
    if not present.isin((0.0, 1.0)).all():
        raise InvalidConfig(f"treatment column {spec.treatment!r} must be 0/1")
    return w


def _estimation_frame(
    panel: Panel, spec: ModelSpec, positions: Sequence[int] | None = None
) -> tuple[pd.DataFrame, int]:
    """Complete-case frame holding everything the design needs.

    ``positions`` (row positions into panel.data, duplicates allowed) lets
    matched re-estimation enter controls with multiplicity.
    """
    df = panel.data
    for name in (spec.outcome, spec.dose, *spec.controls):
        if name not in df.columns:
            raise MissingColumn(f"column {name!r} not found in panel")
    frame = pd.DataFrame(
        {
            "__firm": df["firm_id"],
            "__year": df["year"],
            "__cluster": df[panel.cluster_key],
            "__y": df[spec.outcome].astype(float),
            "__w": _resolve_treatment(panel, spec),
            "__dose": df[spec.dose].astype(float),
        }
    )
    for name in spec.controls:
        frame[name] = df[name].astype(float)
    if spec.industry_year_fe:
        if spec.industry not in df.columns:
            raise MissingColumn(f"industry column {spec.industry!r} not found in panel")
        frame["__industry"] = df[spec.industry].astype(str)

    if positions is not None:
        frame = frame.iloc[list(positions)].reset_index(drop=True)

    before = len(frame)
    frame = frame.dropna().reset_index(drop=True)
    n_dropped = before - len(frame)
    if frame.empty:
        raise EmptySample("estimation sample is empty after complete-case filtering")
    if spec.outcome_kind == "binary" and not frame["__y"].isin((0.0, 1.0)).all():
        raise InvalidConfig(f"binary outcome {spec.outcome!r} must be 0/1")
    return frame, n_dropped


def _assemble_design(frame: pd.DataFrame, spec: ModelSpec, n_dropped: int) -> Design:
    d = frame["__dose"].to_numpy()
    w = frame["__w"].to_numpy()
    y = frame["__y"].to_numpy()

    center_mask = (w == 1.0) if spec.centering == "treated" else np.ones_like(w, bool)
    if not center_mask.any():
        raise EmptySubsample("centering subsample has no rows")
    centering = {j: float(np.mean(d[center_mask] ** j)) for j in range(1, spec.degree + 1)}

    cols: dict[str, np.ndarray] = {"const": np.ones(len(frame))}
    for name in spec.controls:
        cols[name] = frame[name].to_numpy()
    cols["w"] = w
    for j in range(1, spec.degree + 1):
        cols[f"w_d{j}"] = w * (d**j - centering[j])
    for name in spec.interactions:
        cols[f"w_x_{name}"] = w * frame[name].to_numpy()
    if spec.year_fe:
        years = np.sort(frame["__year"].unique())
        for year in years[1:]:
            cols[f"year_{year}"] = (frame["__year"].to_numpy() == year).astype(float)
    if spec.industry_year_fe:
        cells = sorted(
            set(zip(frame["__industry"], frame["__year"])), key=lambda c: (c[0], c[1])
        )
        ind = frame["__industry"].to_numpy()
        yr = frame["__year"].to_numpy()
        for industry, year in cells[1:]:
            cols[f"iy_{industry}_{year}"] = ((ind == industry) & (yr == year)).astype(float)

    if spec.firm_fe:
        firm_codes = pd.factorize(frame["__firm"], sort=False)[0]
        y = within_values(y, firm_codes)
        for name in list(cols):
            if name != "const":
                cols[name] = within_values(cols[name], firm_codes)

    treated_doses = d[w == 1.0]
    if treated_doses.size:
        support = {
            "min": float(treated_doses.min()),
            "p10": float(np.percentile(treated_doses, 10)),
            "p50": float(np.percentile(treated_doses, 50)),
            "p90": float(np.percentile(treated_doses, 90)),
            "max": float(treated_doses.max()),
        }
    else:
        support = {k: float("nan") for k in ("min", "p10", "p50", "p90", "max")}

    clusters = pd.factorize(frame["__cluster"], sort=False)[0]
    return Design(
        matrix=np.column_stack(list(cols.values())),
        columns=list(cols),
        response=y,
        clusters=clusters,
        row_index=frame.index.to_numpy(),
        centering=centering,
        dose_support=support,
        n_dropped=n_dropped,
    )


def build_design(panel: Panel, spec: ModelSpec) -> Design:
    """Design matrix, response and cluster ids for one estimating equation."""
    frame, n_dropped = _estimation_frame(panel, spec)
    return _assemble_design(frame, spec, n_dropped)


# ---------------------------------------------------------------------------
# least squares and clustered covariance


def ols_fit(
    X: np.ndarray, y: np.ndarray, columns: Sequence[str] | None = None
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Least squares through a column-pivoted QR decomposition.

    Returns (beta, residuals, r_squared, rmse).  A rank-deficient design
    raises RankDeficient naming the collinear columns; columns are never
    silently dropped.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = list(columns) if columns is not None else [f"x{i}" for i in range(k)]
    if n < k:
        raise RankDeficient(
            f"{n} rows cannot identify {k} columns", columns=names
        )
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = (diag[0] if diag.size else 0.0) * max(n, k) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < k:
        bad = [names[i] for i in sorted(piv[rank:])]
        raise RankDeficient(
            f"design matrix is rank deficient (rank {rank} < {k}); "
            f"collinear columns: {', '.join(bad)}",
            columns=bad,
        )
    beta_piv = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = beta_piv
    residuals = y - X @ beta
    ssr = float(residuals @ residuals)
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst > 0:
        r_squared = 1.0 - ssr / sst
    else:
        r_squared = 1.0 if np.isclose(ssr, 0.0) else 0.0
    rmse = float(np.sqrt(ssr / (n - k))) if n > k else 0.0
    return beta, residuals, r_squared, rmse


def clustered_vcov(
    X: np.ndarray,
    residuals: np.ndarray,
    clusters: np.ndarray,
    correction: str = "CR1",
) -> np.ndarray:
    """Cluster-robust sandwich covariance.

    V = c (X'X)^-1 (sum_g X_g'u_g u_g'X_g) (X'X)^-1 with the CR1 factor
    c = [G/(G-1)] [(N-1)/(N-K)]; ``correction="CR0"`` sets c = 1.
    """
    X = np.asarray(X, dtype=float)
    u = np.asarray(residuals, dtype=float)
    n, k = X.shape
    codes, groups = pd.factorize(clusters, sort=False)
    n_groups = len(groups)
    if n_groups < 2:
        raise SingleCluster("clustered covariance needs at least 2 clusters")
    order = np.argsort(codes, kind="stable")
    scored = (X * u[:, None])[order]
    starts = np.r_[0, 1 + np.flatnonzero(np.diff(codes[order]))]
    scores = np.add.reduceat(scored, starts, axis=0)
    meat = scores.T @ scores
    R = linalg.qr(X, mode="r")[0][:k]
    r_inv = linalg.solve_triangular(R, np.eye(k))
    bread = r_inv @ r_inv.T
    if correction == "CR1":
        c = (n_groups / (n_groups - 1.0)) * ((n - 1.0) / (n - k))
    elif correction == "CR0":
        c = 1.0
    else:
        raise InvalidConfig(f"unknown correction {correction!r}")
    V = c * bread @ meat @ bread
    return (V + V.T) / 2.0


# ---------------------------------------------------------------------------
# dose-response curve


def _significant_segments(
    grid: np.ndarray, effect: np.ndarray, significant: np.ndarray
) -> list[Segment]:
    segments: list[Segment] = []
    start = None
    sign = 0
    for i, (d, flag) in enumerate(zip(grid, significant)):
        s = int(np.sign(effect[i])) if flag else 0
        if flag and start is not None and s == sign:
            continue
        if start is not None:
            segments.append(Segment(float(start), float(grid[i - 1]), sign))
            start = None
        if flag:
            start, sign = d, s
    if start is not None:
        segments.append(Segment(float(start), float(grid[-1]), sign))
    return segments


def estimate_drf(
    fit: FitResult, grid: np.ndarray | None = None, alpha: float = 0.05
) -> DoseResponseCurve:
    """Dose-response curve with pointwise delta-method confidence bands.

    effect(d) = beta_w + sum_j beta_j (d^j - m_j); the standard error is
    sqrt(g'Vg) over the treatment coefficient block with the centering
    constants held fixed.
    """
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    if not 0 < alpha < 1:
        raise InvalidConfig(f"alpha must be in (0, 1), got {alpha}")
    names = ["w"] + [f"w_d{j}" for j in range(1, fit.degree + 1)]
    try:
        idx = [fit.columns.index(name) for name in names]
    except ValueError as exc:
        raise InvalidConfig(f"fit lacks treatment coefficient block: {exc}") from exc
    b = fit.beta[idx]
    V = fit.vcov[np.ix_(idx, idx)]
    G = np.column_stack(
        [np.ones_like(grid)]
        + [grid**j - fit.centering[j] for j in range(1, fit.degree + 1)]
    )
    effect = G @ b
    var = np.einsum("ij,jk,ik->i", G, V, G)
    se = np.sqrt(np.clip(var, 0.0, None))
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    ci_low = effect - z * se
    ci_high = effect + z * se
    significant = (ci_low > 0.0) | (ci_high < 0.0)

    support = fit.dose_support
    if np.isfinite(support.get("min", np.nan)) and (
        grid.min() < support["min"] - 1e-9 or grid.max() > support["max"] + 1e-9
    ):
        warnings.warn(
            f"grid [{grid.min():g}, {grid.max():g}] exceeds observed dose support "
            f"[{support['min']:g}, {support['max']:g}]",
            GridOutsideSupportWarning,
            stacklevel=2,
        )
    return DoseResponseCurve(
        dose=grid,
        effect=effect,
        se=se,
        ci_low=ci_low,
        ci_high=ci_high,
        significant=significant,
        alpha=alpha,
        segments=_significant_segments(grid, effect, significant),
    )


def unconditional_ate(p_treated: float, mu: float, h_bar: float) -> float:
    """Population ATE: p (mu + mean response over d>0) + (1-p) mu."""
    if not 0.0 <= p_treated <= 1.0:
        raise InvalidConfig(f"p_treated must be in [0, 1], got {p_treated}")
    return p_treated * (mu + h_bar) + (1.0 - p_treated) * mu


# ---------------------------------------------------------------------------
# full pipeline


def _fit_frame(
    frame: pd.DataFrame,
    spec: ModelSpec,
    n_dropped: int = 0,
    grid: np.ndarray | None = None,
    alpha: float = 0.05,
    correction: str = "CR1",
) -> tuple[FitResult, DoseResponseCurve]:
    design = _assemble_design(frame, spec, n_dropped)
    beta, residuals, r_squared, rmse = ols_fit(
        design.matrix, design.response, design.columns
    )
    vcov = clustered_vcov(design.matrix, residuals, design.clusters, correction)
    fit = FitResult(
        columns=design.columns,
        beta=beta,
        vcov=vcov,
        n_obs=len(design.response),
        n_clusters=len(np.unique(design.clusters)),
        r_squared=r_squared,
        rmse=rmse,
        degree=spec.degree,
        centering=design.centering,
        dose_support=design.dose_support,
        n_dropped=design.n_dropped,
    )
    return fit, estimate_drf(fit, grid, alpha)


def fit_model(
    panel: Panel,
    spec: ModelSpec,
    grid: np.ndarray | None = None,
    alpha: float = 0.05,
    correction: str = "CR1",
) -> tuple[FitResult, DoseResponseCurve]:
    """Estimate the within regression and reconstruct the dose-response curve."""
    frame, n_dropped = _estimation_frame(panel, spec)
    return _fit_frame(frame, spec, n_dropped, grid, alpha, correction)


# ---------------------------------------------------------------------------
# cluster bootstrap bands


def bootstrap_bands(
    panel: Panel,
    spec: ModelSpec,
    grid: np.ndarray | None = None,
    n_boot: int = 200,
    seed: int = 0,
    alpha: float = 0.05,
) -> DoseResponseCurve:
    """Pointwise percentile bands from a cluster (firm) bootstrap.

    Firms are resampled with replacement; each drawn copy enters as its own
    cluster.  Replication r is seeded from (seed, r) so results do not
    depend on execution order.  Rank-deficient replications are redrawn and
    counted in ``n_redrawn``.
    """
    if n_boot < 100:
        raise InvalidConfig(f"n_boot must be >= 100, got {n_boot}")
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    frame, n_dropped = _estimation_frame(panel, spec)
    _, base_curve = _fit_frame(frame, spec, n_dropped, grid, alpha)

    firm_positions = {
        firm: idx.to_numpy() for firm, idx in frame.groupby("__firm").groups.items()
    }
    firms = sorted(firm_positions)
    n_firms = len(firms)

    effects = np.empty((n_boot, len(grid)))
    n_redrawn = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridOutsideSupportWarning)
        for r in range(n_boot):
            for attempt in range(50):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=(seed, r, attempt))
                )
                draw = rng.integers(0, n_firms, size=n_firms)
                rows = np.concatenate([firm_positions[firms[i]] for i in draw])
                replica = np.repeat(
                    np.arange(n_firms), [len(firm_positions[firms[i]]) for i in draw]
                )
                rep = frame.iloc[rows].reset_index(drop=True)
                rep["__firm"] = replica
                rep["__cluster"] = replica
                try:
                    _, curve = _fit_frame(rep, spec, 0, grid, alpha)
                except RankDeficient:
                    n_redrawn += 1
                    continue
                effects[r] = curve.effect
                break
            else:
                raise DegenerateResample(
                    f"replication {r} stayed rank deficient after 50 redraws"
                )

    lo, hi = np.percentile(
        effects, [100 * alpha / 2.0, 100 * (1 - alpha / 2.0)], axis=0, method="linear"
    )
    significant = (lo > 0.0) | (hi < 0.0)
    return DoseResponseCurve(
        dose=grid,
        effect=base_curve.effect,
        se=effects.std(axis=0, ddof=1),
        ci_low=lo,
        ci_high=hi,
        significant=significant,
        alpha=alpha,
        segments=_significant_segments(grid, base_curve.effect, significant),
        band_method="percentile",
        n_redrawn=n_redrawn,
    )
