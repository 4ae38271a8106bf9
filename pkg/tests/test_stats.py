from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from frameoracle.core import AnnotatedExample
from frameoracle.stats import heavy_tail_counts, histogram, keyframe_summary, write_stats


def _records(counts, seed=0):
    rng = np.random.default_rng(seed)
    return [
        AnnotatedExample(i, f"q{i}", "a", f"v{i}", f"d{i}", float(np.round(rng.uniform(5, 300), 3)), int(c))
        for i, c in enumerate(counts)
    ]


def test_heavy_tail_counts_shape():
    counts = np.array(heavy_tail_counts(2000))
    assert abs(np.median(counts) - 5) <= 0.5
    assert abs(counts.mean() - 7) <= 0.5
    assert (counts <= 10).mean() > 0.80
    assert counts.max() > 30


def test_heavy_tail_counts_deterministic_permutation():
    a, b = heavy_tail_counts(500, seed=1), heavy_tail_counts(500, seed=2)
    assert a == heavy_tail_counts(500, seed=1)
    assert sorted(a) == sorted(b) and a != b


def test_single_record_summary():
    s = keyframe_summary(_records([7]))
    assert s["keyframes_median"] == s["keyframes_mean"] == 7.0
    assert s["n_examples"] == 1


def test_summary_values():
    s = keyframe_summary(_records([1, 2, 3, 4, 20]))
    assert s["keyframes_median"] == 3.0
    assert s["keyframes_mean"] == 6.0
    assert s["keyframes_frac_le_10"] == 0.8
    assert s["keyframes_max"] == 20


def test_empty_dataset_errors():
    with pytest.raises(ValueError):
        keyframe_summary([])


def test_histogram_bins():
    rows = histogram([1, 1, 2, 5], 1, start=1)
    assert rows == [(1.0, 2.0, 2), (2.0, 3.0, 1), (3.0, 4.0, 0), (4.0, 5.0, 0), (5.0, 6.0, 1)]
    rows = histogram([0.0, 9.99, 10.0, 25.0], 10.0)
    assert [c for _, _, c in rows] == [2, 1, 1]
    assert histogram([], 1.0) == []


def _csv_total(path):
    with open(path, newline="") as fh:
        return sum(int(r["count"]) for r in csv.DictReader(fh))


def test_write_stats_files_and_row_sums(tmp_path):
    recs = _records(heavy_tail_counts(300))
    summary = write_stats(recs, tmp_path, plots=True)
    for name in ("keyframe_counts.csv", "durations.csv", "keyframe_counts.png", "durations.png"):
        assert (tmp_path / name).stat().st_size > 0
    assert _csv_total(tmp_path / "keyframe_counts.csv") == len(recs)
    assert _csv_total(tmp_path / "durations.csv") == len(recs)
    json.dumps(summary)


def test_stats_permutation_invariant(tmp_path):
    recs = _records(heavy_tail_counts(200))
    shuffled = [recs[i] for i in np.random.default_rng(3).permutation(len(recs))]
    a = write_stats(recs, tmp_path / "a", plots=False)
    b = write_stats(shuffled, tmp_path / "b", plots=False)
    assert a == b
    for name in ("keyframe_counts.csv", "durations.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
