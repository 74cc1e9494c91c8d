# supernet_search/report.py
"""
Aggregate run artifacts into tables and curve data.

    summary     mean and sample std of each run's final metrics (best row for
                post-hoc searches), per method
    anytime     best validation metric so far, per method and epoch (mean over runs)
    trajectory  architecture parameters per run, epoch, dim and choice

Plots are left to whatever consumes the `records` output.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import pandas as pd
from tabulate import tabulate

from supernet_search.errors import ConfigurationError, MixedSpaceError, PreconditionError
from supernet_search.posthoc_search import POSTHOC_METHODS
from supernet_search.results import RESULTS_FILE, TRAJECTORY_FILE, read_jsonl, read_records

logger = logging.getLogger(__name__)

FORMATS = ("text", "records")

PathLike = Union[str, Path]


@dataclass
class Report:
    space: str
    summary: pd.DataFrame
    anytime: pd.DataFrame
    trajectory: pd.DataFrame

    def tables(self) -> Dict[str, pd.DataFrame]:
        return {"summary": self.summary, "anytime": self.anytime, "trajectory": self.trajectory}


def _result_files(paths: Iterable[PathLike]) -> List[Path]:
    files = []
    for path in map(Path, paths):
        if path.is_dir():
            path = path / RESULTS_FILE
        if not path.exists():
            raise ConfigurationError(f"No results file at {path}")
        files.append(path)
    return files


def load_results(paths: Sequence[PathLike]) -> pd.DataFrame:
    """
    Raises:
        PreconditionError: no paths given
        MixedSpaceError: the files cover more than one space
    """
    if not paths:
        raise PreconditionError("report needs at least one results file")
    rows = [r.to_dict() for path in _result_files(paths) for r in read_records(path)]
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame
    spaces = sorted(frame["space"].unique())
    if len(spaces) > 1:
        raise MixedSpaceError(f"Refusing to aggregate results from several spaces: {spaces}")
    return frame


def load_trajectories(paths: Sequence[PathLike]) -> List[dict]:
    rows = []
    for path in _result_files(paths):
        trajectory = path.with_name(TRAJECTORY_FILE)
        if trajectory.exists():
            rows.extend(read_jsonl(trajectory))
    return rows


def final_epochs(frame: pd.DataFrame) -> pd.DataFrame:
    """
    The row each run is summarised by.

    Searches and training runs report their last epoch. Post-hoc searches
    report their best evaluation; ties go to the smallest architecture text
    as in the search itself.
    """
    ordered = frame.sort_values(["run_id", "epoch"])
    posthoc = ordered["method"].isin(POSTHOC_METHODS)
    last = ordered[~posthoc].groupby("run_id", as_index=False).tail(1)
    best = (
        ordered[posthoc]
        .sort_values(
            ["run_id", "val_metric", "architecture", "epoch"],
            ascending=[True, False, True, True],
        )
        .groupby("run_id", as_index=False)
        .head(1)
    )
    return pd.concat([last, best]).sort_values("run_id")


def summary_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Per method: run count, mean and sample std (ddof=1) of final val/test metrics."""
    final = final_epochs(frame)
    grouped = final.groupby("method")
    table = pd.DataFrame({
        "runs": grouped["run_id"].nunique(),
        "val_mean": grouped["val_metric"].mean(),
        "val_std": grouped["val_metric"].std(ddof=1),
        "test_mean": grouped["test_metric"].mean(),
        "test_std": grouped["test_metric"].std(ddof=1),
        "params_mean": grouped["param_count"].mean(),
    })
    return table.reset_index()


def anytime_series(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Best-so-far validation metric per run, averaged over the runs of each method.

    A run that stops early holds its final best-so-far value up to the
    method's last epoch.
    """
    ordered = frame.sort_values(["run_id", "epoch"]).copy()
    ordered["best_so_far"] = ordered.groupby("run_id")["val_metric"].cummax()
    parts = []
    for method, rows in ordered.groupby("method"):
        epochs = pd.Index(sorted(rows["epoch"].unique()), name="epoch")
        for run_id, run in rows.groupby("run_id"):
            curve = run.groupby("epoch")["best_so_far"].max()
            curve = curve.reindex(epochs[epochs >= curve.index.min()]).ffill()
            parts.append(pd.DataFrame({"method": method, "run_id": run_id, "epoch": curve.index,
                                       "best_so_far": curve.to_numpy()}))
    filled = pd.concat(parts, ignore_index=True)
    series = filled.groupby(["method", "epoch"]).agg(
        best_val_mean=("best_so_far", "mean"),
        runs=("run_id", "nunique"),
    )
    return series.reset_index()


def trajectory_series(rows: Iterable[dict]) -> pd.DataFrame:
    """One row per (run, epoch, dim, choice) with the raw parameter value."""
    long_rows = [
        {
            "run_id": row["run_id"],
            "epoch": row["epoch"],
            "dim": dim,
            "choice": choice,
            "alpha": value,
        }
        for row in rows
        for dim, values in row["alphas"].items()
        for choice, value in enumerate(values)
    ]
    return pd.DataFrame(long_rows, columns=["run_id", "epoch", "dim", "choice", "alpha"])


def build_report(paths: Sequence[PathLike]) -> Report:
    frame = load_results(paths)
    if frame.empty:
        raise PreconditionError(f"No result rows in {[str(p) for p in paths]}")
    report = Report(
        space=str(frame["space"].iloc[0]),
        summary=summary_table(frame),
        anytime=anytime_series(frame),
        trajectory=trajectory_series(load_trajectories(paths)),
    )
    logger.info("Report over %d rows from %d runs", len(frame), frame["run_id"].nunique())
    return report


def render(report: Report, fmt: str = "text") -> str:
    """
    text: one tabulate table per section; records: JSON lines tagged with their section.

    Raises:
        ConfigurationError: unknown format
    """
    if fmt not in FORMATS:
        raise ConfigurationError(f"Unknown report format {fmt!r}; expected one of {FORMATS}")
    if fmt == "records":
        lines = []
        for name, table in report.tables().items():
            for row in table.to_dict(orient="records"):
                lines.append(json.dumps({"table": name, "space": report.space, **row}, default=str))
        return "\n".join(lines)
    parts = [f"Space: {report.space}"]
    for name, table in report.tables().items():
        if name == "trajectory" and not table.empty:
            table = table.groupby(["run_id", "dim", "choice"])["alpha"].last().reset_index()
            name = "trajectory (final alphas)"
        rendered = tabulate(
            table, headers="keys", tablefmt="github", showindex=False, floatfmt=".4f"
        )
        parts.append(f"\n{name}:\n{rendered}")
    return "\n".join(parts)
