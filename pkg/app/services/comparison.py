# app/services/comparison.py
"""
Run Comparison Service

Joins the error-vs-T_E and error-vs-CPU checkpoint series of two runs and
states which sampler had the lower relative error at each checkpoint.
"""

import logging
from typing import List, Optional

from pydantic import BaseModel, Field

from app.core.errors import ConfigError
from app.schemas.experiment_schemas import ChainSummary, RunManifest

logger = logging.getLogger(__name__)

TIE = "tie"


class ComparisonRow(BaseModel):
    evolution_time: float
    error_a: float
    error_b: float
    delta: float                 # error_a - error_b
    cpu_time_a: float
    cpu_time_b: float
    verdict: str


class ComparisonReport(BaseModel):
    experiment: str
    label_a: str
    label_b: str
    rows: List[ComparisonRow] = Field(default_factory=list)
    truncated: bool = False
    verdict: Optional[str] = None


def _pick_chain(manifest: RunManifest, label: Optional[str], side: str) -> ChainSummary:
    if not manifest.chains:
        raise ConfigError(f"manifest {side} has no chains")
    if label is None:
        return manifest.chains[0]
    for chain in manifest.chains:
        if chain.label == label:
            return chain
    known = ", ".join(chain.label for chain in manifest.chains)
    raise ConfigError(f"no chain labelled '{label}' in manifest {side} (has: {known})")


def _verdict(label_a: str, label_b: str, error_a: float, error_b: float) -> str:
    if error_a < error_b:
        return f"{label_a} lower error"
    if error_b < error_a:
        return f"{label_b} lower error"
    return TIE


def compare_runs(
    manifest_a: RunManifest,
    manifest_b: RunManifest,
    label_a: Optional[str] = None,
    label_b: Optional[str] = None,
) -> ComparisonReport:
    """
    Compare one chain of each run checkpoint by checkpoint.

    Checkpoints are matched by position in the configured list; rows stop at
    the shorter series and the report is flagged as truncated.

    Raises:
        ConfigError: on different experiments or different histogram binning
    """
    if manifest_a.experiment != manifest_b.experiment:
        raise ConfigError(
            f"cannot compare a '{manifest_a.experiment.value}' run with a '{manifest_b.experiment.value}' run"
        )
    if manifest_a.config.get("histogram") != manifest_b.config.get("histogram"):
        raise ConfigError("runs use different histogram specifications")

    chain_a = _pick_chain(manifest_a, label_a, "a")
    chain_b = _pick_chain(manifest_b, label_b, "b")
    series_a = [c for c in chain_a.checkpoints if c.relative_error is not None]
    series_b = [c for c in chain_b.checkpoints if c.relative_error is not None]
    report = ComparisonReport(experiment=manifest_a.experiment.value, label_a=chain_a.label, label_b=chain_b.label)

    # The same label on both sides (a run against itself) still needs distinct names in verdicts
    name_a, name_b = chain_a.label, chain_b.label
    if name_a == name_b:
        name_a, name_b = f"{name_a} (a)", f"{name_b} (b)"

    for point_a, point_b in zip(series_a, series_b):
        report.rows.append(ComparisonRow(
            evolution_time=point_a.evolution_time,
            error_a=point_a.relative_error,
            error_b=point_b.relative_error,
            delta=point_a.relative_error - point_b.relative_error,
            cpu_time_a=point_a.cpu_time_s,
            cpu_time_b=point_b.cpu_time_s,
            verdict=_verdict(name_a, name_b, point_a.relative_error, point_b.relative_error),
        ))

    if len(series_a) != len(series_b):
        report.truncated = True
        logger.warning(f"checkpoint series differ in length ({len(series_a)} vs {len(series_b)}); "
                       f"comparison truncated to {len(report.rows)} rows")

    if report.rows:
        report.verdict = report.rows[-1].verdict
    return report


def format_report(report: ComparisonReport) -> str:
    """Plain-text table of a comparison report."""
    lines = [
        f"# {report.experiment}: a={report.label_a} b={report.label_b}",
        "# evolution_time error_a error_b delta cpu_time_a cpu_time_b verdict",
    ]
    for row in report.rows:
        lines.append(
            f"{row.evolution_time:.6g} {row.error_a:.6g} {row.error_b:.6g} {row.delta:.6g} "
            f"{row.cpu_time_a:.4g} {row.cpu_time_b:.4g} {row.verdict}"
        )
    if report.truncated:
        lines.append("# warning: checkpoint series truncated to the shorter run")
    lines.append(f"# verdict: {report.verdict or 'no common checkpoints'}")
    return "\n".join(lines)
