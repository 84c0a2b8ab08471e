"""Command-line front end: ingest, estimate, diagnose, simulate, report.

Exit codes: 0 success, 1 usage error, 2 data or estimation error (with a
machine-readable error JSON on stdout).  Numeric CSV output is serialised
with 17 significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .balance import (
    fit_logit,
    mahalanobis_distances,
    matched_reestimate,
    nn_match,
    prepare_covariates,
    quintile_balance,
    render_balance_table,
)
from .errors import DoseRespError, InvalidConfig, MissingColumn
from .estimator import (
    DEFAULT_GRID,
    ModelSpec,
    TreatmentRule,
    _resolve_treatment,
    fit_model,
)
from .panel import (
    DEFAULT_CLASS_EDGES,
    Panel,
    dose_class_codes,
    dose_class_labels,
    summary_stats,
    transition_matrix,
)
from .simulate import SimConfig, monte_carlo, simulate_panel, true_drf
from .svgplot import render_curve_svg


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InvalidConfig(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from exc


def load_panel(cfg: dict) -> Panel:
    if "input" not in cfg:
        raise InvalidConfig("config is missing 'input'")
    if "columns" not in cfg or not isinstance(cfg["columns"], dict):
        raise InvalidConfig("config must declare column roles under 'columns'")
    try:
        return Panel.from_csv(
            cfg["input"], cfg["columns"], cluster_key=cfg.get("cluster_key", "firm_id")
        )
    except FileNotFoundError as exc:
        raise InvalidConfig(f"input file not found: {cfg['input']}") from exc


def model_spec(cfg: dict) -> ModelSpec:
    raw = cfg.get("model")
    if not isinstance(raw, dict):
        raise InvalidConfig("config is missing the 'model' section")
    for key in ("outcome", "dose"):
        if key not in raw:
            raise InvalidConfig(f"model config is missing {key!r}")
    treatment = raw.get("treatment", "w")
    if isinstance(treatment, dict):
        if "export_col" not in treatment:
            raise InvalidConfig("rule-based treatment needs 'export_col'")
        treatment = TreatmentRule(
            export_col=treatment["export_col"], lag=int(treatment.get("lag", 1))
        )
    fe = raw.get("fixed_effects", {})
    return ModelSpec(
        outcome=raw["outcome"],
        dose=raw["dose"],
        degree=int(raw.get("degree", 3)),
        controls=tuple(raw.get("controls", ())),
        treatment=treatment,
        firm_fe=bool(fe.get("firm", True)),
        year_fe=bool(fe.get("year", True)),
        industry_year_fe=bool(fe.get("industry_year", False)),
        industry=raw.get("industry"),
        interactions=tuple(raw.get("interactions", ())),
        outcome_kind=raw.get("outcome_kind", "continuous"),
        centering=raw.get("centering", "treated"),
    )


def resolve_grid(cfg: dict) -> np.ndarray:
    raw = cfg.get("grid")
    if raw is None:
        return DEFAULT_GRID
    if isinstance(raw, dict):
        return np.linspace(
            float(raw.get("start", 0.0)),
            float(raw.get("stop", 100.0)),
            int(raw.get("points", 101)),
        )
    return np.asarray(raw, dtype=float)


def out_dir(cfg: dict, args) -> Path:
    path = Path(args.out or cfg.get("output_dir", "out"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _curve_rows(curve):
    frame = curve.to_frame()
    return frame.itertuples(index=False)


CURVE_HEADER = ("dose", "effect", "se", "ci_low", "ci_high", "significant")


# ---------------------------------------------------------------------------
# commands


def cmd_estimate(cfg: dict, args) -> int:
    panel = load_panel(cfg)
    spec = model_spec(cfg)
    grid = resolve_grid(cfg)
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    out = out_dir(cfg, args)
    degrees = args.degrees or [spec.degree]
    sweep = args.degrees is not None
    for degree in degrees:
        fit, curve = fit_model(panel, replace(spec, degree=degree), grid=grid, alpha=alpha)
        suffix = f"_p{degree}" if sweep else ""
        write_json(out / f"fit{suffix}.json", fit.to_json_dict())
        write_csv(out / f"curve{suffix}.csv", CURVE_HEADER, _curve_rows(curve))
        render_curve_svg(
            curve,
            out / f"curve{suffix}.svg",
            title=f"Dose-response of {spec.outcome} (degree {degree})",
            support=(fit.dose_support["min"], fit.dose_support["max"]),
        )
    return 0


def _lagged_columns(panel: Panel, columns: Sequence[str], lag: int) -> pd.DataFrame:
    keys = pd.MultiIndex.from_arrays([panel.data["firm_id"], panel.data["year"]])
    lag_keys = pd.MultiIndex.from_arrays([panel.data["firm_id"], panel.data["year"] - lag])
    out = {}
    for name in columns:
        keyed = pd.Series(panel.column(name).values, index=keys)
        out[name] = pd.Series(keyed.reindex(lag_keys).values, index=panel.data.index)
    return pd.DataFrame(out)


def _balance_inputs(panel: Panel, cfg: dict, spec: ModelSpec):
    """Scores, Mahalanobis distances and row positions for balance/matching."""
    bal = cfg.get("balance")
    if not isinstance(bal, dict) or "continuous" not in bal or "dummies" not in bal:
        raise InvalidConfig(
            "balance config must declare covariate kinds under 'continuous' and 'dummies'"
        )
    continuous = list(bal["continuous"])
    dummies = list(bal["dummies"])
    if not continuous and not dummies:
        raise InvalidConfig("balance covariate list is empty")
    lag = int(bal.get("lag", 1))
    labels = _resolve_treatment(panel, spec)
    lagged = _lagged_columns(panel, continuous + dummies, lag)
    usable = labels.notna() & lagged.notna().all(axis=1)
    if not usable.any():
        raise InvalidConfig("no rows with both treatment labels and lagged covariates")
    positions = np.flatnonzero(usable.to_numpy())
    standardized = prepare_covariates(lagged.loc[usable], continuous, dummies)
    model = fit_logit(standardized, labels[usable].to_numpy())
    values = standardized.to_numpy()
    sigma = np.atleast_2d(np.cov(values, rowvar=False, ddof=1))
    distances = mahalanobis_distances(values, values.mean(axis=0), sigma)
    return model, standardized, distances, labels[usable].to_numpy(), positions


def _support_rows(panel, cfg, positions, scores, distances, spec, n_bins=20):
    dose = panel.column(spec.dose).to_numpy()[positions]
    edges = np.asarray(cfg.get("class_edges", DEFAULT_CLASS_EDGES), dtype=float)
    labels = dose_class_labels(edges)
    present = np.isfinite(dose)
    codes = dose_class_codes(dose[present], edges)
    rows = []
    for metric_name, metric in (("pscore", scores), ("mahalanobis", distances)):
        values = np.asarray(metric)[present]
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            hi = lo + 1.0
        bins = np.linspace(lo, hi, n_bins + 1)
        for class_idx, label in enumerate(labels):
            in_class = values[codes == class_idx]
            counts, _ = np.histogram(in_class, bins=bins)
            total = counts.sum()
            for b in range(n_bins):
                share = counts[b] / total if total else 0.0
                rows.append(
                    (metric_name, label, bins[b], bins[b + 1], int(counts[b]), share)
                )
    return rows


def cmd_balance(cfg: dict, args) -> int:
    panel = load_panel(cfg)
    spec = model_spec(cfg)
    out = out_dir(cfg, args)
    model, standardized, distances, labels, positions = _balance_inputs(panel, cfg, spec)

    ids = panel.data.iloc[positions]
    write_csv(
        out / "pscores.csv",
        ("firm_id", "year", "treated", "score", "mahalanobis"),
        zip(ids["firm_id"], ids["year"], labels.astype(int), model.scores, distances),
    )
    tables = quintile_balance(model.scores, standardized, labels)
    for table in tables:
        frame = table.to_frame()
        write_csv(
            out / f"balance_q{table.stratum}.csv",
            frame.columns.tolist(),
            frame.itertuples(index=False),
        )
        print(render_balance_table(table))
        print()
    write_csv(
        out / "support.csv",
        ("metric", "class", "bin_low", "bin_high", "count", "share"),
        _support_rows(panel, cfg, positions, model.scores, distances, spec),
    )
    return 0


def cmd_match(cfg: dict, args) -> int:
    panel = load_panel(cfg)
    spec = model_spec(cfg)
    grid = resolve_grid(cfg)
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    out = out_dir(cfg, args)
    matching = cfg.get("matching", {})
    model, _, _, labels, positions = _balance_inputs(panel, cfg, spec)
    matched = nn_match(
        model.scores,
        labels,
        replacement=bool(matching.get("replacement", True)),
        caliper=matching.get("caliper"),
        index=positions,
    )

    def row_id(pos: int) -> str:
        row = panel.data.iloc[pos]
        return f"{row['firm_id']}:{row['year']}"

    write_csv(
        out / "matched.csv",
        ("treated_id", "control_id", "distance"),
        ((row_id(t), row_id(c), d) for t, c, d in matched.pairs),
    )
    fit, curve = matched_reestimate(panel, matched, spec, grid=grid, alpha=alpha)
    write_json(out / "fit_matched.json", fit.to_json_dict())
    write_csv(out / "curve_matched.csv", CURVE_HEADER, _curve_rows(curve))
    render_curve_svg(
        curve,
        out / "curve_matched.svg",
        title=f"Dose-response of {spec.outcome} (matched sample)",
        support=(fit.dose_support["min"], fit.dose_support["max"]),
    )
    return 0


def cmd_simulate(cfg: dict, args) -> int:
    raw = dict(cfg.get("simulate", {}))
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and "seed" in cfg:
        raw["seed"] = cfg["seed"]
    try:
        sim_cfg = SimConfig.from_dict(raw)
    except TypeError as exc:
        raise InvalidConfig(f"invalid simulator config: {exc}") from exc
    grid = resolve_grid(cfg)
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    out = out_dir(cfg, args)

    panel, _ = simulate_panel(sim_cfg)
    panel.data.to_csv(out / "panel.csv", index=False, float_format="%.17g")
    write_csv(
        out / "truth.csv",
        ("dose", "effect"),
        zip(grid, true_drf(sim_cfg, grid)),
    )
    replications = int(cfg.get("replications", 1))
    if replications > 1:
        report = monte_carlo(sim_cfg, replications, grid=grid, alpha=alpha)
        write_json(out / "mc_report.json", report.to_json_dict())
    return 0


def cmd_report(cfg: dict, args) -> int:
    panel = load_panel(cfg)
    spec = model_spec(cfg)
    out = out_dir(cfg, args)
    dose = panel.column(spec.dose)
    status = pd.Series(
        np.where(dose.notna(), np.where(dose > 0, "exporter", "non_exporter"), np.nan),
        index=panel.data.index,
    )
    stats_frame = summary_stats(panel, spec.outcome, group_by=status, allow_empty=True)
    write_csv(
        out / "summary.csv",
        stats_frame.columns.tolist(),
        stats_frame.itertuples(index=False),
    )
    edges = cfg.get("class_edges", DEFAULT_CLASS_EDGES)
    matrix, labels = transition_matrix(panel, spec.dose, edges)
    write_csv(
        out / "transitions.csv",
        ["from_class"] + labels,
        (
            [labels[i]] + [matrix[i, j] for j in range(len(labels))]
            for i in range(len(labels))
        ),
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_degrees(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = text.split("..")
            degrees = list(range(int(lo), int(hi) + 1))
        else:
            degrees = [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse degrees {text!r}") from exc
    if not degrees or any(d < 1 or d > 5 for d in degrees):
        raise argparse.ArgumentTypeError("degrees must lie in 1..5")
    return degrees


COMMANDS = {
    "estimate": cmd_estimate,
    "balance": cmd_balance,
    "match": cmd_match,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="doseresp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"doseresp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--alpha", type=float, default=None)
        if name == "estimate":
            cmd.add_argument(
                "--degrees",
                type=_parse_degrees,
                default=None,
                help="polynomial degree sweep, e.g. 1..5 or 1,3",
            )
        else:
            cmd.set_defaults(degrees=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (DoseRespError, OSError, KeyError, ValueError) as exc:
        print(
            json.dumps(
                {
                    "error": type(exc).__name__,
                    "message": str(exc),
                    "command": args.command,
                },
                sort_keys=True,
            )
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
