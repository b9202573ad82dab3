from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import List, Tuple, Union
import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from bppo.base.exceptions import ReportSchemaException
from bppo.base.helpers import get_path, render_template
from bppo.base.run import MANIFEST_FILE, METRICS_FILE, TIMINGS_FILE, RunManifest

METRICS_COLUMNS = [
    "step",
    "algo",
    "mean_reward",
    "frac_groups_skipped",
    "loss",
    "kl",
    "clip_fraction",
    "grad_token_count",
    "eval_accuracy",
    "seed",
]
TIMINGS_COLUMNS = ["step", "sample_ms", "update_ms"]
REPORT_COLUMNS = ["metric", "run_a", "run_b", "ratio"]
REPORT_CSV = "cost_report.csv"


def _resolve(path: Union[str, Path]) -> Tuple[Path, Path]:
    """Return (metrics log, timings log) for a run directory or a metrics log."""

    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    return path, path.parent / TIMINGS_FILE


def _label(path: Union[str, Path]) -> str:
    """The run's path, with its algo and seed when the run has a manifest."""

    run_dir = Path(path) if Path(path).is_dir() else Path(path).parent
    if not (run_dir / MANIFEST_FILE).exists():
        return str(path)

    manifest = RunManifest.read(run_dir)
    algo = get_path(manifest.config, "algo", manifest.subcommand)
    return f"{path} (algo={algo} seed={manifest.seed})"


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """
    Read a metrics log (and its timings log, when present) into one
    table, one row per step.
    """

    metrics_path, timings_path = _resolve(path)
    if not metrics_path.exists():
        raise ReportSchemaException(f"Metrics log not found: {metrics_path}")

    try:
        df = pd.read_json(metrics_path, lines=True, convert_dates=False)
    except ValueError as e:
        raise ReportSchemaException(f"Could not parse {metrics_path} ({str(e)})")

    if df.shape[0] == 0:
        raise ReportSchemaException(f"Metrics log is empty: {metrics_path}")

    missing = [col for col in METRICS_COLUMNS if col not in df.columns]
    if missing:
        raise ReportSchemaException(f"{metrics_path} is missing columns: {', '.join(missing)}")

    extra = [col for col in df.columns if col not in METRICS_COLUMNS + TIMINGS_COLUMNS]
    if extra:
        raise ReportSchemaException(f"{metrics_path} has unexpected columns: {', '.join(extra)}")

    if list(df["step"]) != list(range(1, df.shape[0] + 1)):
        raise ReportSchemaException(f"{metrics_path} steps are not 1..{df.shape[0]}")

    # Timings are kept beside the metrics; either may carry them
    if timings_path.exists() and "update_ms" not in df.columns:
        timings = pd.read_json(timings_path, lines=True, convert_dates=False)
        if any(col not in timings.columns for col in TIMINGS_COLUMNS):
            raise ReportSchemaException(f"{timings_path} does not match the timings schema")
        df = df.merge(timings[TIMINGS_COLUMNS], on="step", how="left")

    for col in ["sample_ms", "update_ms"]:
        if col not in df.columns:
            df[col] = np.nan

    return df.reset_index(drop=True)


def _ratio(a: float, b: float) -> float:
    if math.isnan(a) or math.isnan(b):
        return float("nan")
    if a == b:
        return 1.0
    if b == 0:
        return float("inf")
    return a / b


def _eval_summary(df: pd.DataFrame) -> Tuple[float, float]:
    """(final eval accuracy, mean accuracy under the eval curve)."""

    evals = df.dropna(subset=["eval_accuracy"])
    if evals.shape[0] == 0:
        return float("nan"), float("nan")

    x = evals["step"].to_numpy(dtype=np.float64)
    y = evals["eval_accuracy"].to_numpy(dtype=np.float64)

    final = float(y[-1])
    if len(y) == 1:
        return final, final

    return final, float(trapezoid(y, x) / (x[-1] - x[0]))


@dataclass
class CostReport:
    """
    Cost comparison of two runs; every ratio is run_a / run_b.

    Attributes:
        label_a:    Source of run a.
        label_b:    Source of run b.
        tokens_a:   Per-step gradient-token counts of run a.
        tokens_b:   Per-step gradient-token counts of run b.
        steps:      Number of steps compared.
        truncated:  True if the runs had unequal lengths.
        table:      One row per metric (metric, run_a, run_b, ratio).
    """

    label_a: str
    label_b: str
    tokens_a: List[int]
    tokens_b: List[int]
    steps: int
    truncated: bool
    table: pd.DataFrame

    def _get(self, metric: str) -> float:
        return float(self.table.set_index("metric").loc[metric, "ratio"])

    @property
    def analytic_reduction(self) -> float:
        """(Σ tokens of run a) / (Σ tokens of run b)."""
        return self._get("grad_tokens_total")

    @property
    def update_time_ratio(self) -> float:
        return self._get("update_ms_total")

    @property
    def step_time_ratio(self) -> float:
        return self._get("step_ms_total")

    def to_text(self) -> str:
        return render_template(
            "cost_report.txt.j2",
            label_a=self.label_a,
            label_b=self.label_b,
            steps=self.steps,
            truncated=self.truncated,
            rows=self.table.to_dict(orient="records")
        )

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path, index=False)


def compare_runs(
    metrics_log_a: Union[str, Path],
    metrics_log_b: Union[str, Path]
) -> CostReport:
    """
    Compare the cost and outcome of two runs (run directories or metrics
    logs). Runs of unequal length are compared over their common prefix
    and the report is flagged.
    """

    df_a = read_metrics(metrics_log_a)
    df_b = read_metrics(metrics_log_b)

    steps = min(df_a.shape[0], df_b.shape[0])
    truncated = df_a.shape[0] != df_b.shape[0]
    if truncated:
        logging.warning(
            f"Runs have {df_a.shape[0]} and {df_b.shape[0]} steps; comparing the first {steps}"
        )

    df_a, df_b = df_a.iloc[:steps], df_b.iloc[:steps]

    rows = []

    def _add(metric, a, b):
        rows.append(dict(metric=metric, run_a=float(a), run_b=float(b), ratio=_ratio(float(a), float(b))))

    _add("grad_tokens_total", df_a["grad_token_count"].sum(), df_b["grad_token_count"].sum())
    _add("grad_tokens_per_step", df_a["grad_token_count"].mean(), df_b["grad_token_count"].mean())

    # sum(skipna=False) keeps a missing timing visible as NaN
    sample_a, sample_b = df_a["sample_ms"].sum(skipna=False), df_b["sample_ms"].sum(skipna=False)
    update_a, update_b = df_a["update_ms"].sum(skipna=False), df_b["update_ms"].sum(skipna=False)
    _add("sample_ms_total", sample_a, sample_b)
    _add("update_ms_total", update_a, update_b)
    _add("step_ms_total", sample_a + update_a, sample_b + update_b)

    final_a, auc_a = _eval_summary(df_a)
    final_b, auc_b = _eval_summary(df_b)
    _add("final_eval_accuracy", final_a, final_b)
    _add("eval_accuracy_auc", auc_a, auc_b)
    _add("final_mean_reward", df_a["mean_reward"].iloc[-1], df_b["mean_reward"].iloc[-1])

    return CostReport(
        label_a=_label(metrics_log_a),
        label_b=_label(metrics_log_b),
        tokens_a=[int(t) for t in df_a["grad_token_count"]],
        tokens_b=[int(t) for t in df_b["grad_token_count"]],
        steps=steps,
        truncated=truncated,
        table=pd.DataFrame(rows, columns=REPORT_COLUMNS)
    )
