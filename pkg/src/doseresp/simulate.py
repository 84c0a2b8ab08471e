"""Synthetic firm-year panels with a known dose-response ground truth.

The generator draws the two potential outcomes

    treated:   y1 = mu1 + x @ delta + h(dose) + firm effect + e1
    untreated: y0 = mu0 + x @ delta + firm effect + e0

and reveals y = y0 + w (y1 - y0).  Confounding ties the dose location (and
one control) to the firm effect through a Gaussian copula, so only the
fixed-effects estimator stays consistent when it is switched on.  Every
draw is deterministic given the master seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import InvalidConfig
from .estimator import DEFAULT_GRID, ModelSpec, fit_model
from .panel import Panel


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the data-generating process."""

    n_firms: int = 2000
    n_years: int = 9
    mu0: float = 10.0
    mu1: float = 10.0 - 0.0245
    delta: tuple[float, ...] = (0.05, -0.03)
    dose_coeffs: tuple[float, ...] = (-1.5e-3, 4.5e-5, -2.2e-7)
    firm_effect_sd: float = 0.5
    error_sd_control: float = 0.3
    error_sd_treated: float = 0.3
    treated_share: float = 0.7
    zero_dose_share: float = 0.1
    dose_shape: tuple[float, float] = (1.2, 2.0)
    confounding: float = 0.5
    heavy_tails: bool = False
    n_industries: int = 10
    seed: int = 12345

    def __post_init__(self):
        if self.n_firms < 2 or self.n_years < 1:
            raise InvalidConfig("need at least 2 firms and 1 year")
        if not 0.0 <= self.treated_share <= 1.0:
            raise InvalidConfig(f"treated_share must be in [0, 1], got {self.treated_share}")
        if not 0.0 <= self.zero_dose_share <= 1.0:
            raise InvalidConfig(f"zero_dose_share must be in [0, 1], got {self.zero_dose_share}")
        for name in ("firm_effect_sd", "error_sd_control", "error_sd_treated"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        if not 0.0 <= self.confounding < 1.0:
            raise InvalidConfig(f"confounding must be in [0, 1), got {self.confounding}")
        if min(self.dose_shape) <= 0:
            raise InvalidConfig("dose_shape parameters must be positive")
        if not 1 <= len(self.dose_coeffs) <= 5:
            raise InvalidConfig("dose_coeffs must have 1..5 terms")

    @property
    def mu(self) -> float:
        return self.mu1 - self.mu0

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"unknown simulator fields: {sorted(unknown)}")
        coerced = dict(raw)
        for name in ("delta", "dose_coeffs", "dose_shape"):
            if name in coerced:
                coerced[name] = tuple(coerced[name])
        return cls(**coerced)


def response_curve(dose_coeffs: Sequence[float], dose: np.ndarray) -> np.ndarray:
    """h(d) = sum_j coeff_j d^j (no intercept: zero dose means zero response)."""
    dose = np.asarray(dose, dtype=float)
    out = np.zeros_like(dose)
    for j, coeff in enumerate(dose_coeffs, start=1):
        out += coeff * dose**j
    return out


@dataclass
class SimTruth:
    """Exact ground truth implied by one realised panel."""

    mu: float
    dose_coeffs: tuple[float, ...]
    h_bar: float                      # mean of h over realised treated rows
    centering: dict[int, float]       # realised E(d^j) over treated rows
    ate_treated: float                # mu + h_bar

    def curve(self, grid: np.ndarray | None = None) -> np.ndarray:
        grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
        return self.mu + response_curve(self.dose_coeffs, grid)


def true_drf(config: SimConfig, grid: np.ndarray | None = None) -> np.ndarray:
    """Exact treated-branch dose-response curve mu + h(d) on the grid."""
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    return config.mu + response_curve(config.dose_coeffs, grid)


def simulate_panel(config: SimConfig) -> tuple[Panel, SimTruth]:
    """Draw one panel plus the exact truth it realises."""
    rng = np.random.default_rng(config.seed)
    n = config.n_firms * config.n_years
    firm_ids = np.repeat(
        [f"F{i:06d}" for i in range(config.n_firms)], config.n_years
    )
    years = np.tile(2010 + np.arange(config.n_years), config.n_firms)
    industries = np.repeat(
        rng.integers(0, config.n_industries, size=config.n_firms), config.n_years
    )

    eta = rng.normal(0.0, config.firm_effect_sd, size=config.n_firms)
    eta_rows = np.repeat(eta, config.n_years)
    z_firm = np.repeat(
        eta / config.firm_effect_sd if config.firm_effect_sd > 0 else np.zeros(config.n_firms),
        config.n_years,
    )

    # controls: x1 loads on the firm effect so it matters, x2 is idiosyncratic
    x1 = 0.5 * z_firm + rng.normal(0.0, 1.0, size=n)
    x2 = rng.normal(0.0, 1.0, size=n)
    controls = np.column_stack([x1, x2][: len(config.delta)])
    if controls.shape[1] < len(config.delta):
        raise InvalidConfig("at most 2 control coefficients are supported")

    w = (rng.uniform(size=n) < config.treated_share).astype(float)

    # dose via a Gaussian copula: marginally Beta-shaped on (0, 100],
    # rank-correlated with the firm effect by the confounding strength
    kappa = config.confounding
    latent = kappa * z_firm + np.sqrt(1.0 - kappa**2) * rng.normal(size=n)
    u = stats.norm.cdf(latent)
    dose = 100.0 * stats.beta.ppf(u, *config.dose_shape)
    dose = np.clip(dose, 1e-9, 100.0)
    zero_dose = rng.uniform(size=n) < config.zero_dose_share
    dose[zero_dose] = 0.0
    dose[w == 0.0] = 0.0

    if config.heavy_tails:
        e0 = rng.standard_t(3, size=n) * (config.error_sd_control / np.sqrt(3.0))
        e1 = rng.standard_t(3, size=n) * (config.error_sd_treated / np.sqrt(3.0))
    else:
        e0 = rng.normal(0.0, config.error_sd_control, size=n)
        e1 = rng.normal(0.0, config.error_sd_treated, size=n)

    g_x = controls @ np.asarray(config.delta, dtype=float)
    h_d = response_curve(config.dose_coeffs, dose)
    y0 = config.mu0 + g_x + eta_rows + e0
    y1 = config.mu1 + g_x + h_d + eta_rows + e1
    y = y0 + w * (y1 - y0)

    frame = pd.DataFrame(
        {
            "firm_id": firm_ids,
            "year": years,
            "y": y,
            "dose": dose,
            "w": w,
            "x1": x1,
            "x2": x2,
            "industry": [f"I{i:02d}" for i in industries],
        }
    )
    kinds = {
        "y": "outcome",
        "dose": "dose",
        "w": "indicator",
        "x1": "control",
        "x2": "control",
        "industry": "categorical",
    }
    panel = Panel.from_frame(frame, kinds)

    treated = w == 1.0
    h_bar = float(h_d[treated].mean()) if treated.any() else 0.0
    centering = {
        j: float(np.mean(dose[treated] ** j)) if treated.any() else float("nan")
        for j in range(1, len(config.dose_coeffs) + 1)
    }
    truth = SimTruth(
        mu=config.mu,
        dose_coeffs=tuple(config.dose_coeffs),
        h_bar=h_bar,
        centering=centering,
        ate_treated=config.mu + h_bar,
    )
    return panel, truth


def default_spec(config: SimConfig) -> ModelSpec:
    """Estimating equation matching the simulated column names."""
    return ModelSpec(
        outcome="y",
        dose="dose",
        degree=len(config.dose_coeffs),
        controls=("x1", "x2")[: len(config.delta)],
        treatment="w",
        firm_fe=True,
        year_fe=True,
    )


def replication_seed(master_seed: int, replication: int) -> int:
    """Independent per-replication seed; invariant to execution order."""
    ss = np.random.SeedSequence(entropy=(master_seed, replication))
    return int(ss.generate_state(1)[0])


@dataclass
class MonteCarloReport:
    """Recovery diagnostics across simulated replications."""

    replications: int
    coef_bias: dict[str, float]
    coef_rmse: dict[str, float]
    coverage: list[dict[str, float]]
    grid: np.ndarray
    alpha: float

    def to_json_dict(self) -> dict:
        return {
            "replications": self.replications,
            "coef_bias": self.coef_bias,
            "coef_rmse": self.coef_rmse,
            "alpha": self.alpha,
            "coverage": self.coverage,
        }


def monte_carlo(
    config: SimConfig,
    replications: int,
    spec: ModelSpec | None = None,
    grid: np.ndarray | None = None,
    alpha: float = 0.05,
) -> MonteCarloReport:
    """Simulate, fit and score ``replications`` independent panels.

    Reports the mean bias and RMSE of each dose coefficient (and of the
    treatment-status coefficient against its per-replication realised
    truth) plus pointwise CI coverage of the true curve.  Fit errors
    propagate annotated with the replication index.
    """
    if replications < 2:
        raise InvalidConfig(f"replications must be >= 2, got {replications}")
    spec = default_spec(config) if spec is None else spec
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    names = [f"w_d{j}" for j in range(1, len(config.dose_coeffs) + 1)]
    truth_curve = true_drf(config, grid)

    estimates = {name: [] for name in names}
    ate_errors = []
    covered = np.zeros(len(grid))
    for r in range(replications):
        rep_config = replace(config, seed=replication_seed(config.seed, r))
        panel, truth = simulate_panel(rep_config)
        try:
            fit, curve = fit_model(panel, spec, grid=grid, alpha=alpha)
        except Exception as exc:
            raise type(exc)(f"replication {r}: {exc}") from exc
        for name in names:
            estimates[name].append(fit.coef(name))
        ate_errors.append(fit.coef("w") - truth.ate_treated)
        covered += ((curve.ci_low <= truth_curve) & (truth_curve <= curve.ci_high)).astype(
            float
        )

    coef_bias, coef_rmse = {}, {}
    for name, true_val in zip(names, config.dose_coeffs):
        arr = np.asarray(estimates[name])
        coef_bias[name] = float(arr.mean() - true_val)
        coef_rmse[name] = float(np.sqrt(np.mean((arr - true_val) ** 2)))
    ate_arr = np.asarray(ate_errors)
    coef_bias["w"] = float(ate_arr.mean())
    coef_rmse["w"] = float(np.sqrt(np.mean(ate_arr**2)))

    coverage = [
        {"dose": float(d), "coverage": float(c / replications)}
        for d, c in zip(grid, covered)
    ]
    return MonteCarloReport(
        replications=replications,
        coef_bias=coef_bias,
        coef_rmse=coef_rmse,
        coverage=coverage,
        grid=grid,
        alpha=alpha,
    )
