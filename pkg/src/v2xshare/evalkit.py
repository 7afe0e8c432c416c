"""Aggregation of evaluation traces into reportable metrics.

Everything here is a pure function of recorded run data: V2I sum capacity,
payload delivery rate, delivery-time histograms with an explicit lost
bucket, and cross-run comparison tables.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RunMetrics:
    """Raw per-episode results of one evaluation run."""

    variant: str
    seed: int
    payload_bytes: float
    budget_ms: float
    v2i_sum_rate_bps: np.ndarray  # (episodes,)
    success: np.ndarray  # (episodes, K) bool
    delivery_ms: np.ndarray  # (episodes, K), NaN on failure
    config_digest: str = ""
    observations: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.success.shape != self.delivery_ms.shape:
            raise ValueError("success and delivery time shapes differ")
        if len(self.v2i_sum_rate_bps) != len(self.success):
            raise ValueError("episode counts differ between V2I rates and outcomes")
        times = self.delivery_ms[self.success]
        if times.size and (np.any(times <= 0) or np.any(times > self.budget_ms)):
            raise ValueError("delivery times must lie in (0, budget]")
        if np.any(np.isfinite(self.delivery_ms[~self.success])):
            raise ValueError("failures must not carry a delivery time")

    @property
    def n_agent_episodes(self) -> int:
        return int(self.success.size)


def v2i_sum_capacity(metrics: RunMetrics) -> float:
    """Mean over episodes of the V2I sum rate, in Mbps."""
    if len(metrics.v2i_sum_rate_bps) == 0:
        raise ValueError("empty metrics")
    return float(np.mean(metrics.v2i_sum_rate_bps)) / 1e6


def delivery_rate(metrics: RunMetrics) -> float:
    """Delivered fraction over all agent-episodes pooled."""
    if metrics.n_agent_episodes == 0:
        raise ValueError("empty metrics")
    return float(np.mean(metrics.success))


@dataclass(frozen=True)
class DeliveryHistogram:
    bin_ms: float
    bin_starts: tuple[float, ...]
    counts: tuple[int, ...]
    lost: int
    median_ms: float | None

    @property
    def total(self) -> int:
        return sum(self.counts) + self.lost


def delivery_time_histogram(metrics: RunMetrics, bin_ms: float = 5.0) -> DeliveryHistogram:
    """Counts per [i*bin, (i+1)*bin) plus a lost bucket for failures."""
    if bin_ms <= 0:
        raise ValueError("bin width must be positive")
    n_bins = metrics.budget_ms / bin_ms
    if abs(n_bins - round(n_bins)) > 1e-9:
        raise ValueError("bin width must divide the time budget")
    n_bins = int(round(n_bins))
    counts = [0] * n_bins
    times = metrics.delivery_ms[metrics.success]
    for t in times:
        # times are in (0, budget]; the exact-budget case lands in the last bin
        counts[min(int(t // bin_ms), n_bins - 1)] += 1
    lost = int(metrics.n_agent_episodes - times.size)
    median = float(np.median(times)) if times.size else None
    return DeliveryHistogram(
        bin_ms=bin_ms,
        bin_starts=tuple(i * bin_ms for i in range(n_bins)),
        counts=tuple(counts),
        lost=lost,
        median_ms=median,
    )


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    n_runs: int
    v2i_mean_mbps: float
    v2i_sd_mbps: float
    delivery_mean: float
    delivery_sd: float


def compare_runs(runs_by_label: dict[str, list[RunMetrics]]) -> list[ComparisonRow]:
    """Per-label mean and sample standard deviation across runs.

    All runs under one label must share a config digest; a single run
    reports zero deviation with n = 1.
    """
    rows = []
    for label, runs in runs_by_label.items():
        if not runs:
            raise ValueError(f"no runs for {label!r}")
        digests = {r.config_digest for r in runs}
        if len(digests) > 1:
            raise ValueError(f"mixed config digests under {label!r}")
        caps = [v2i_sum_capacity(r) for r in runs]
        rates = [delivery_rate(r) for r in runs]
        sd = lambda xs: float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0
        rows.append(
            ComparisonRow(
                label=label,
                n_runs=len(runs),
                v2i_mean_mbps=float(np.mean(caps)),
                v2i_sd_mbps=sd(caps),
                delivery_mean=float(np.mean(rates)),
                delivery_sd=sd(rates),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# CSV surfaces

RESULTS_COLUMNS = ("variant", "seed", "payload_bytes", "v2i_sum_mbps", "v2v_delivery_rate",
                   "median_delivery_ms", "lost_count")
HISTOGRAM_COLUMNS = ("variant", "bin_start_ms", "count")
COMPARISON_COLUMNS = ("label", "n_runs", "v2i_mean_mbps", "v2i_sd_mbps",
                      "delivery_mean", "delivery_sd")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{float(x):.10g}"


def results_row(metrics: RunMetrics, bin_ms: float = 5.0) -> list[str]:
    hist = delivery_time_histogram(metrics, bin_ms)
    return [
        metrics.variant,
        str(metrics.seed),
        _fmt(metrics.payload_bytes),
        _fmt(v2i_sum_capacity(metrics)),
        _fmt(delivery_rate(metrics)),
        _fmt(hist.median_ms),
        str(hist.lost),
    ]


def write_results_csv(path, metrics_list: list[RunMetrics], bin_ms: float = 5.0) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_COLUMNS)
        for m in metrics_list:
            w.writerow(results_row(m, bin_ms))


def write_histogram_csv(path, hists_by_variant: dict[str, DeliveryHistogram]) -> None:
    """One row per bin per variant; the lost bucket uses bin_start_ms = -1."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTOGRAM_COLUMNS)
        for variant, hist in hists_by_variant.items():
            for start, count in zip(hist.bin_starts, hist.counts):
                w.writerow([variant, _fmt(start), str(count)])
            w.writerow([variant, _fmt(-1), str(hist.lost)])


def write_comparison_csv(path, rows: list[ComparisonRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in rows:
            w.writerow([r.label, str(r.n_runs), _fmt(r.v2i_mean_mbps), _fmt(r.v2i_sd_mbps),
                        _fmt(r.delivery_mean), _fmt(r.delivery_sd)])


def pooled_histogram(runs: list[RunMetrics], bin_ms: float = 5.0) -> DeliveryHistogram:
    """Histogram over the union of several runs' agent-episodes."""
    if not runs:
        raise ValueError("no runs to pool")
    times = np.concatenate([r.delivery_ms[r.success] for r in runs]) if runs else np.array([])
    total = sum(r.n_agent_episodes for r in runs)
    budget = runs[0].budget_ms
    merged = RunMetrics(
        variant=runs[0].variant,
        seed=runs[0].seed,
        payload_bytes=runs[0].payload_bytes,
        budget_ms=budget,
        v2i_sum_rate_bps=np.concatenate([r.v2i_sum_rate_bps for r in runs]),
        success=np.concatenate([r.success for r in runs]),
        delivery_ms=np.concatenate([r.delivery_ms for r in runs]),
        config_digest=runs[0].config_digest,
    )
    hist = delivery_time_histogram(merged, bin_ms)
    assert hist.total == total
    return hist
