"""Dataset statistics: keyframe-count and duration summaries and histograms."""

from __future__ import annotations

import csv
from pathlib import Path
from statistics import NormalDist
from typing import Any, Sequence

import numpy as np

from .core import AnnotatedExample

COUNT_BIN_WIDTH = 1
DURATION_BIN_WIDTH = 10.0


def keyframe_summary(records: Sequence[AnnotatedExample]) -> dict[str, Any]:
    if not records:
        raise ValueError("cannot summarise an empty dataset")
    counts = np.array(sorted(r.num_selected_frames for r in records), dtype=np.float64)
    durations = np.array(sorted(r.duration for r in records), dtype=np.float64)
    return {
        "n_examples": int(counts.size),
        "keyframes_median": float(np.median(counts)),
        "keyframes_mean": float(counts.mean()),
        "keyframes_frac_le_10": float((counts <= 10).mean()),
        "keyframes_quantiles": {str(q): float(np.quantile(counts, q)) for q in (0.1, 0.25, 0.5, 0.75, 0.9)},
        "keyframes_max": int(counts.max()),
        "duration_median": float(np.median(durations)),
        "duration_mean": float(durations.mean()),
        "duration_min": float(durations.min()),
        "duration_max": float(durations.max()),
    }


def histogram(values: Sequence[float], width: float, start: float | None = None) -> list[tuple[float, float, int]]:
    """Fixed-width bins ``[lo, hi)`` covering every value; returns (lo, hi, count) rows."""
    v = np.asarray(sorted(values), dtype=np.float64)
    if v.size == 0:
        return []
    lo = float(np.floor(v[0] / width) * width) if start is None else float(start)
    n_bins = int(np.floor((v[-1] - lo) / width)) + 1
    edges = lo + width * np.arange(n_bins + 1)
    idx = np.clip(np.floor((v - lo) / width).astype(int), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(n_bins)]


def write_histogram_csv(rows, path, label: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"{label}_lo", f"{label}_hi", "count"])
        for lo, hi, c in rows:
            w.writerow([f"{lo:g}", f"{hi:g}", c])


def _plot(rows, path, xlabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([lo for lo, _, _ in rows], [c for _, _, c in rows], width=[hi - lo for lo, hi, _ in rows], align="edge", edgecolor="black", linewidth=0.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_stats(records: Sequence[AnnotatedExample], out_dir, plots: bool = True) -> dict[str, Any]:
    """Summary JSON-able dict plus duration/keyframe histograms as CSV (and PNG)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = keyframe_summary(records)
    counts = histogram([r.num_selected_frames for r in records], COUNT_BIN_WIDTH, start=1)
    durations = histogram([r.duration for r in records], DURATION_BIN_WIDTH)
    write_histogram_csv(counts, out / "keyframe_counts.csv", "keyframes")
    write_histogram_csv(durations, out / "durations.csv", "duration_s")
    if plots:
        _plot(counts, out / "keyframe_counts.png", "keyframes per question", "Selected keyframes")
        _plot(durations, out / "durations.png", "duration (s)", "Video durations")
    return summary


def heavy_tail_counts(n: int, seed: int = 0) -> list[int]:
    """Keyframe counts with median 5, mean about 7 and a tail past 30.

    Stratified quantiles of a lognormal (median 5, mean 7), rounded and
    capped at 40, shuffled with ``seed``.
    """
    sigma = np.sqrt(2.0 * np.log(1.4))
    z = np.array([NormalDist().inv_cdf((i + 0.5) / n) for i in range(n)])
    vals = np.clip(np.rint(5.0 * np.exp(sigma * z)), 1, 40).astype(int)
    rng = np.random.default_rng(seed)
    return rng.permutation(vals).tolist()
