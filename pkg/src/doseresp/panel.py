"""Long-format firm-year panels and the derived treatment variables.

A :class:`Panel` wraps a validated pandas frame keyed by (firm_id, year)
together with a registry declaring what role each column plays.  All
operations are pure functions over the frame; a Panel is never mutated
after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    AllMissing,
    DoseOutOfRange,
    DuplicateObservation,
    EmptyGroup,
    EmptySeries,
    EmptySubsample,
    IntensityAboveOne,
    InvalidConfig,
    MissingColumn,
    NoConsecutivePairs,
    NonPositiveAssets,
    NonPositiveDenominator,
)

COLUMN_KINDS = ("outcome", "dose", "control", "indicator", "categorical", "auxiliary")

SIZE_CLASSES = ("Small", "Medium", "Large", "VeryLarge")

#: Default year-over-year intensity class edges; overridable everywhere.
DEFAULT_CLASS_EDGES = (0.0, 5.0, 35.0, 60.0, 100.0)


# ---------------------------------------------------------------------------
# scalar derivations


def compute_export_intensity(export_revenue: float, total_revenue: float) -> float:
    """Export revenues as a percentage of total revenues, in [0, 100].

    Bad accounts are surfaced, never clamped: a non-positive denominator or
    exports exceeding total revenue raise a data-quality error.
    """
    if total_revenue <= 0:
        raise NonPositiveDenominator(
            f"total_revenue must be positive, got {total_revenue!r}"
        )
    if export_revenue < 0:
        raise ValueError(f"export_revenue must be non-negative, got {export_revenue!r}")
    ratio = export_revenue / total_revenue
    if ratio > 1.0:
        raise IntensityAboveOne(
            f"export revenue {export_revenue!r} exceeds total revenue {total_revenue!r}"
        )
    return 100.0 * ratio


def classify_non_temporary(
    years: Sequence[int], flags: Sequence[int], min_run: int = 4
) -> bool:
    """True when some run of consecutive calendar years all have the flag set.

    A gap in the observed years breaks a run even if every observed year
    exports, so {2010, 2011, 2013, 2014} never yields a run longer than 2.
    """
    if len(years) == 0:
        raise EmptySeries("firm has no observations")
    if len(years) != len(flags):
        raise ValueError("years and flags must have equal length")
    pairs = sorted(zip((int(y) for y in years), flags))
    run = 0
    prev_year = None
    for year, flag in pairs:
        if flag:
            run = run + 1 if prev_year == year - 1 and run > 0 else 1
            if run >= min_run:
                return True
        else:
            run = 0
        prev_year = year
    return False


def hadlock_pierce(total_assets: float, age: float) -> float:
    """Size-age index of financial constraints from log assets and firm age."""
    if total_assets <= 0:
        raise NonPositiveAssets(f"total_assets must be positive, got {total_assets!r}")
    s = math.log(total_assets)
    return -0.737 * s + 0.043 * s * s - 0.040 * age


def classify_size(
    operating_revenue: float,
    total_assets: float,
    employees: float,
    listed: bool = False,
) -> str:
    """Orbis size class via the threshold cascade (largest class wins)."""
    if (
        operating_revenue >= 100e6
        or total_assets >= 200e6
        or employees >= 1000
        or listed
    ):
        return "VeryLarge"
    if operating_revenue >= 10e6 or total_assets >= 20e6 or employees >= 150:
        return "Large"
    if operating_revenue >= 1e6 or total_assets >= 2e6 or employees >= 15:
        return "Medium"
    return "Small"


# ---------------------------------------------------------------------------
# Panel


@dataclass(frozen=True)
class Panel:
    """Immutable long-format firm-year dataset with a column registry.

    ``data`` is sorted by (firm_id, year) and holds ``firm_id`` (str),
    ``year`` (int) plus every registered column.  ``kinds`` declares each
    column as one of :data:`COLUMN_KINDS`.
    """

    data: pd.DataFrame
    kinds: Mapping[str, str]
    cluster_key: str = "firm_id"

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        kinds: Mapping[str, str],
        cluster_key: str = "firm_id",
    ) -> "Panel":
        for required in ("firm_id", "year"):
            if required not in frame.columns:
                raise MissingColumn(f"mandatory column {required!r} is missing")
        for name, kind in kinds.items():
            if kind not in COLUMN_KINDS:
                raise InvalidConfig(f"unknown column kind {kind!r} for {name!r}")
            if name not in frame.columns:
                raise MissingColumn(f"declared column {name!r} not found in data")

        keep = ["firm_id", "year"] + [c for c in frame.columns if c in kinds]
        data = frame[keep].copy()
        data["firm_id"] = data["firm_id"].astype(str)
        years = pd.to_numeric(data["year"], errors="raise")
        if not np.allclose(years, np.round(years)):
            raise InvalidConfig("year column must hold integers")
        data["year"] = years.astype(int)

        dup = data.duplicated(subset=["firm_id", "year"])
        if dup.any():
            row = data[dup].iloc[0]
            raise DuplicateObservation(
                f"duplicate observation for firm {row['firm_id']!r} year {row['year']}"
            )

        for name, kind in kinds.items():
            if kind in ("outcome", "dose", "control", "indicator"):
                data[name] = pd.to_numeric(data[name], errors="raise").astype(float)
            if kind == "dose":
                vals = data[name].dropna()
                if ((vals < 0) | (vals > 100)).any():
                    bad = vals[(vals < 0) | (vals > 100)].iloc[0]
                    raise DoseOutOfRange(f"dose column {name!r} has value {bad} outside [0, 100]")
            if kind == "indicator":
                vals = data[name].dropna()
                if not vals.isin((0.0, 1.0)).all():
                    raise InvalidConfig(f"indicator column {name!r} must be 0/1")

        if cluster_key != "firm_id" and cluster_key not in data.columns:
            raise MissingColumn(f"cluster key {cluster_key!r} not found in data")

        data = data.sort_values(["firm_id", "year"], kind="stable").reset_index(drop=True)
        return cls(data=data, kinds=dict(kinds), cluster_key=cluster_key)

    @classmethod
    def from_csv(
        cls,
        path: str | Path,
        kinds: Mapping[str, str],
        cluster_key: str = "firm_id",
    ) -> "Panel":
        """Load a UTF-8 CSV with a header row; empty fields are missing."""
        frame = pd.read_csv(
            path,
            dtype={"firm_id": str},
            na_values=[""],
            keep_default_na=False,
            encoding="utf-8",
        )
        return cls.from_frame(frame, kinds, cluster_key=cluster_key)

    def column(self, name: str) -> pd.Series:
        if name not in self.data.columns:
            raise MissingColumn(f"column {name!r} not found in panel")
        return self.data[name]

    @property
    def n_obs(self) -> int:
        return len(self.data)

    @property
    def firms(self) -> np.ndarray:
        return self.data["firm_id"].unique()

    @property
    def years(self) -> np.ndarray:
        return np.sort(self.data["year"].unique())

    @cached_property
    def year_gaps(self) -> dict[str, list[int]]:
        """Unobserved years strictly inside each firm's observed span."""
        gaps: dict[str, list[int]] = {}
        for firm, grp in self.data.groupby("firm_id", sort=False):
            seen = set(grp["year"])
            full = range(min(seen), max(seen) + 1)
            missing = [y for y in full if y not in seen]
            if missing:
                gaps[str(firm)] = missing
        return gaps


# ---------------------------------------------------------------------------
# panel-level derivations


def derive_export_intensity(
    panel: Panel, export_col: str, total_col: str
) -> pd.Series:
    """Vectorised export intensity; raises on the first offending row."""
    exports = panel.column(export_col)
    totals = panel.column(total_col)
    mask = exports.notna() & totals.notna()
    bad_total = mask & (totals <= 0)
    if bad_total.any():
        row = panel.data[bad_total].iloc[0]
        raise NonPositiveDenominator(
            f"non-positive total revenue for firm {row['firm_id']!r} year {row['year']}"
        )
    bad_ratio = mask & (exports > totals)
    if bad_ratio.any():
        row = panel.data[bad_ratio].iloc[0]
        raise IntensityAboveOne(
            f"export revenue exceeds total revenue for firm {row['firm_id']!r} "
            f"year {row['year']}"
        )
    out = pd.Series(np.nan, index=panel.data.index, dtype=float)
    out[mask] = 100.0 * exports[mask] / totals[mask]
    return out


def build_treatment(panel: Panel, export_col: str, lag: int = 1) -> pd.Series:
    """Treatment indicator: positive export revenues ``lag`` years earlier.

    Rows whose (firm, year - lag) observation is absent, or whose lagged
    export value is missing, receive a missing indicator and so fall out of
    any complete-case estimation sample.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    exports = panel.column(export_col)
    keyed = pd.Series(
        exports.values,
        index=pd.MultiIndex.from_arrays(
            [panel.data["firm_id"], panel.data["year"]]
        ),
    )
    lag_keys = pd.MultiIndex.from_arrays(
        [panel.data["firm_id"], panel.data["year"] - lag]
    )
    lagged = keyed.reindex(lag_keys)
    out = pd.Series(np.nan, index=panel.data.index, dtype=float)
    present = lagged.notna().values
    out[present] = (lagged.values[present] > 0).astype(float)
    return out


def non_temporary_firms(
    panel: Panel, export_col: str, min_run: int = 4
) -> pd.Series:
    """Boolean per firm_id: exports positive in >= min_run consecutive years."""
    exports = panel.column(export_col)
    flags = (exports > 0).astype(int)
    out = {}
    for firm, grp in panel.data.assign(_flag=flags).groupby("firm_id", sort=True):
        out[firm] = classify_non_temporary(grp["year"].tolist(), grp["_flag"].tolist(), min_run)
    return pd.Series(out, name="non_temporary")


# ---------------------------------------------------------------------------
# within transformation and centered dose polynomials


@dataclass(frozen=True)
class WithinTransformed:
    """A series re-expressed as deviation from its firm mean plus grand mean."""

    values: pd.Series
    firm_means: pd.Series
    grand_mean: float


def within_transform(panel: Panel, column: str) -> WithinTransformed:
    """v_it - mean_i(v) + grand mean, computed over non-missing rows.

    Every firm represented in the panel must contribute at least one
    non-missing value; the firm means of the transformed series all equal
    the grand mean of the raw series.
    """
    values = panel.column(column).astype(float)
    firms = panel.data["firm_id"]
    counts = values.notna().groupby(firms).sum()
    empty = counts[counts == 0]
    if len(empty):
        raise AllMissing(f"firm {empty.index[0]!r} has no values for {column!r}")
    grand = float(values.mean())
    firm_means = values.groupby(firms).mean()
    transformed = values - firms.map(firm_means) + grand
    return WithinTransformed(
        values=transformed.rename(column), firm_means=firm_means, grand_mean=grand
    )


def within_values(values: np.ndarray, group_codes: np.ndarray) -> np.ndarray:
    """Demean ``values`` by group and add back the overall mean (no NaNs)."""
    counts = np.bincount(group_codes)
    sums = np.bincount(group_codes, weights=values)
    means = sums / counts
    return values - means[group_codes] + values.mean()


@dataclass(frozen=True)
class CenteredDosePolynomial:
    """d^degree minus its mean over the centering subsample."""

    degree: int
    values: pd.Series
    constant: float
    subsample: str


def center_dose_polynomials(
    panel: Panel,
    dose: str,
    degree: int,
    subsample: str = "treated",
    treatment: str | pd.Series | None = None,
) -> list[CenteredDosePolynomial]:
    """Centered powers D_j = d^j - m_j for j = 1..degree.

    ``subsample`` picks the rows over which each m_j is averaged: "treated"
    (rows with treatment indicator 1 when one is supplied, else rows with
    d > 0) or "all" non-missing rows.
    """
    if subsample not in ("treated", "all"):
        raise ValueError(f"subsample must be 'treated' or 'all', got {subsample!r}")
    if not 1 <= degree <= 5:
        raise ValueError(f"degree must be in 1..5, got {degree}")
    d = panel.column(dose).astype(float)
    if subsample == "all":
        mask = d.notna()
    elif treatment is not None:
        w = panel.column(treatment) if isinstance(treatment, str) else treatment
        mask = d.notna() & (w == 1)
    else:
        mask = d.notna() & (d > 0)
    if not mask.any():
        raise EmptySubsample(f"no rows in centering subsample {subsample!r}")
    out = []
    for j in range(1, degree + 1):
        powered = d**j
        m_j = float(powered[mask].mean())
        out.append(
            CenteredDosePolynomial(
                degree=j,
                values=(powered - m_j).rename(f"d{j}"),
                constant=m_j,
                subsample=subsample,
            )
        )
    return out


# ---------------------------------------------------------------------------
# descriptive statistics


SUMMARY_PERCENTILES = (10, 25, 50, 75, 90)


def summary_stats(
    panel: Panel,
    column: str,
    group_by: str | pd.Series | None = None,
    allow_empty: bool = False,
) -> pd.DataFrame:
    """Mean, sd and percentiles of a numeric column, optionally by group.

    Percentiles use linear interpolation between order statistics.  A group
    with no values raises EmptyGroup unless ``allow_empty`` asks for a
    count-zero row instead.
    """
    values = panel.column(column).astype(float)
    if group_by is None:
        groups = pd.Series("all", index=values.index)
    elif isinstance(group_by, str):
        groups = panel.column(group_by)
    else:
        groups = group_by
    rows = []
    for key in sorted(groups.dropna().unique(), key=str):
        sub = values[(groups == key) & values.notna()]
        if sub.empty:
            if not allow_empty:
                raise EmptyGroup(f"group {key!r} has no values for {column!r}")
            rows.append(
                {"group": key, "count": 0, "mean": np.nan, "sd": np.nan}
                | {f"p{q}": np.nan for q in SUMMARY_PERCENTILES}
            )
            continue
        arr = sub.to_numpy()
        pct = np.percentile(arr, SUMMARY_PERCENTILES, method="linear")
        rows.append(
            {
                "group": key,
                "count": int(arr.size),
                "mean": float(arr.mean()),
                "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            }
            | {f"p{q}": float(v) for q, v in zip(SUMMARY_PERCENTILES, pct)}
        )
    return pd.DataFrame(rows)


def dose_class_codes(values: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    """Class index per value: [e0, e1] then (e1, e2], ..., (e_{k-1}, e_k]."""
    edges = np.asarray(edges, dtype=float)
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("class_edges must be strictly increasing")
    if edges[0] != 0.0 or edges[-1] != 100.0:
        raise ValueError("class_edges must cover [0, 100]")
    codes = np.searchsorted(edges, values, side="left") - 1
    return np.clip(codes, 0, len(edges) - 2)


def dose_class_labels(edges: Sequence[float]) -> list[str]:
    labels = [f"[{edges[0]:g},{edges[1]:g}]"]
    labels += [f"({lo:g},{hi:g}]" for lo, hi in zip(edges[1:-1], edges[2:])]
    return labels


def transition_matrix(
    panel: Panel, dose: str, class_edges: Sequence[float] = DEFAULT_CLASS_EDGES
) -> tuple[np.ndarray, list[str]]:
    """Row-stochastic matrix of year-over-year dose class transitions.

    Entry (a, b) is the share of within-firm (t, t+1) pairs moving from
    class a to class b; empty origin classes keep an all-zero row.
    """
    edges = np.asarray(class_edges, dtype=float)
    values = panel.column(dose).astype(float)
    df = panel.data[["firm_id", "year"]].assign(_dose=values).dropna(subset=["_dose"])
    df = df.sort_values(["firm_id", "year"], kind="stable")
    same_firm = df["firm_id"].values[1:] == df["firm_id"].values[:-1]
    consecutive = df["year"].values[1:] == df["year"].values[:-1] + 1
    pair = same_firm & consecutive
    if not pair.any():
        raise NoConsecutivePairs("no within-firm consecutive-year pairs found")
    src = dose_class_codes(df["_dose"].values[:-1][pair], edges)
    dst = dose_class_codes(df["_dose"].values[1:][pair], edges)
    k = len(edges) - 1
    counts = np.zeros((k, k))
    np.add.at(counts, (src, dst), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return matrix, dose_class_labels(edges)
