"""Tolerance-based accuracy (CAP), dataset splits, per-class prediction
statistics, and whole-trace response-count aggregation.

CAP+-k is the fraction of predictions within k classes of the truth.  Splits
always operate on whole traces: the known-server mode shuffles traces and
cuts 80:20, the unknown-server mode holds out every trace of two named
servers.  Whole-trace aggregation re-windows a trace with zero overlap, sums
per-window predictions, and compares against the summed labels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EvalError
from .featurize import WindowSpec, featurize_trace, images_from_dataset
from .synth import stream_rng
from .trace import Trace


@dataclass(frozen=True)
class CapReport:
    k: int
    fraction: float
    n: int


KNOWN_SERVERS = "known"
UNKNOWN_SERVERS = "unknown"


@dataclass(frozen=True)
class SplitPlan:
    """known: seeded 80:20 shuffle of whole traces; unknown: hold out two servers."""

    mode: str = KNOWN_SERVERS
    train_ratio: float = 0.8
    holdout_servers: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (KNOWN_SERVERS, UNKNOWN_SERVERS):
            raise EvalError(f"unknown split mode {self.mode!r}")
        if self.mode == KNOWN_SERVERS and not (0.0 < self.train_ratio < 1.0):
            raise EvalError("train_ratio must be in (0, 1)")
        if self.mode == UNKNOWN_SERVERS and len(self.holdout_servers) != 2:
            raise EvalError("unknown-server mode requires exactly 2 holdout servers")


@dataclass
class TraceReport:
    rows: list[tuple[str, int, int]]  # (trace_id, true_sum, pred_sum)
    tolerance_k: int
    tolerance_fraction: float


def cap(true_labels, predictions, k: int) -> CapReport:
    """Fraction of |y_i - yhat_i| <= k over equal-length nonempty vectors."""
    y = np.asarray(true_labels)
    yhat = np.asarray(predictions)
    if y.size == 0:
        raise EvalError("cap: empty label vector")
    if y.shape != yhat.shape:
        raise EvalError(f"cap: length mismatch {y.shape} vs {yhat.shape}")
    if k < 0:
        raise EvalError("cap: tolerance k must be >= 0")
    frac = float(np.mean(np.abs(y.astype(np.int64) - yhat.astype(np.int64)) <= k))
    return CapReport(k=k, fraction=frac, n=int(y.size))


def split(rows: list[dict], plan: SplitPlan) -> tuple[list[dict], list[dict]]:
    """Partition manifest rows (any rows carrying trace_id and server_id)
    into train and test, never separating windows of one trace."""
    if not rows:
        raise EvalError("split: empty manifest")
    trace_ids = list(dict.fromkeys(r["trace_id"] for r in rows))
    server_of = {r["trace_id"]: r["server_id"] for r in rows}

    if plan.mode == KNOWN_SERVERS:
        order = stream_rng(plan.seed, 2).permutation(len(trace_ids))
        n_train = int(len(trace_ids) * plan.train_ratio)
        train_traces = {trace_ids[i] for i in order[:n_train]}
    else:
        servers = {server_of[t] for t in trace_ids}
        missing = set(plan.holdout_servers) - servers
        if missing:
            raise EvalError(f"holdout servers not present in manifest: {sorted(missing)}")
        train_traces = {t for t in trace_ids if server_of[t] not in plan.holdout_servers}

    train_rows = [r for r in rows if r["trace_id"] in train_traces]
    test_rows = [r for r in rows if r["trace_id"] not in train_traces]
    return train_rows, test_rows


def split_audit(train_rows: list[dict], test_rows: list[dict], plan: SplitPlan) -> dict:
    """Machine-checkable record of a split: ids, servers, disjointness."""
    train_traces = sorted({r["trace_id"] for r in train_rows})
    test_traces = sorted({r["trace_id"] for r in test_rows})
    audit = {
        "mode": plan.mode,
        "seed": plan.seed,
        "train_ratio": plan.train_ratio,
        "holdout_servers": sorted(plan.holdout_servers),
        "n_train_rows": len(train_rows),
        "n_test_rows": len(test_rows),
        "train_trace_ids": train_traces,
        "test_trace_ids": test_traces,
        "train_servers": sorted({r["server_id"] for r in train_rows}),
        "test_servers": sorted({r["server_id"] for r in test_rows}),
        "traces_disjoint": not (set(train_traces) & set(test_traces)),
    }
    if plan.mode == UNKNOWN_SERVERS:
        audit["servers_disjoint"] = not (set(audit["train_servers"]) & set(audit["test_servers"]))
    return audit


def nearest_rank(values, pct: float):
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    v = sorted(values)
    if not v:
        raise EvalError("percentile of empty list")
    rank = max(1, math.ceil(pct / 100.0 * len(v)))
    return v[rank - 1]


def per_class_stats(true_labels, predictions) -> list[dict]:
    """Per observed class: count plus 25/50/75th nearest-rank prediction percentiles."""
    y = np.asarray(true_labels)
    yhat = np.asarray(predictions)
    if y.shape != yhat.shape:
        raise EvalError("per_class_stats: length mismatch")
    out = []
    for c in sorted(set(int(v) for v in y)):
        preds = yhat[y == c]
        out.append(
            {
                "class": c,
                "count": int(preds.size),
                "p25": int(nearest_rank(preds, 25)),
                "p50": int(nearest_rank(preds, 50)),
                "p75": int(nearest_rank(preds, 75)),
            }
        )
    return out


def aggregate_trace(predictor, trace: Trace, spec: WindowSpec) -> tuple[int, int]:
    """(true_sum, pred_sum) over the trace's zero-overlap window tiling.

    predictor is either a TrainedModel-like object exposing
    logits(images) -> (B, K) or a callable mapping an image batch to class
    indices.  Events past the final window's end are outside the tiling and
    are not counted.
    """
    spec = WindowSpec(
        window_s=spec.window_s,
        overlap=0.0,
        time_bins=spec.time_bins,
        length_bins=spec.length_bins,
        max_len=spec.max_len,
    )
    images = featurize_trace(trace, spec)
    ds = images_from_dataset(images)
    if callable(predictor) and not hasattr(predictor, "logits"):
        preds = np.asarray(predictor(ds.images))
    else:
        preds = np.argmax(predictor.logits(ds.images), axis=1)
    return int(ds.labels.sum()), int(preds.sum())


def trace_tolerance(rows: list[tuple[str, int, int]], k: int = 3) -> float:
    """Fraction of traces with |pred_sum - true_sum| <= k."""
    if not rows:
        raise EvalError("trace_tolerance: empty report")
    hits = sum(1 for _, true_sum, pred_sum in rows if abs(pred_sum - true_sum) <= k)
    return hits / len(rows)


def trace_report(predictor, traces, spec: WindowSpec, k: int = 3) -> TraceReport:
    rows = []
    for trace in traces:
        true_sum, pred_sum = aggregate_trace(predictor, trace, spec)
        rows.append((trace.trace_id, true_sum, pred_sum))
    return TraceReport(rows=rows, tolerance_k=k, tolerance_fraction=trace_tolerance(rows, k))


def emit_reports(
    out_dir: str | Path,
    cap_reports: list[CapReport] | None = None,
    class_stats: list[dict] | None = None,
    trace_rows: list[tuple[str, int, int]] | None = None,
    audit: dict | None = None,
) -> list[Path]:
    """Write cap.csv / per_class_stats.csv / trace_scatter.csv / split_audit.json.

    Empty optional sections are skipped; the list of written files is
    returned (and is deterministic for identical inputs).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if cap_reports:
        path = out_dir / "cap.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["k", "fraction", "n"])
            for r in cap_reports:
                writer.writerow([r.k, f"{r.fraction:.6f}", r.n])
        written.append(path)

    if class_stats:
        path = out_dir / "per_class_stats.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["class", "count", "p25", "p50", "p75"])
            for row in class_stats:
                writer.writerow([row["class"], row["count"], row["p25"], row["p50"], row["p75"]])
        written.append(path)

    if trace_rows:
        path = out_dir / "trace_scatter.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["trace_id", "true_sum", "pred_sum"])
            for trace_id, true_sum, pred_sum in trace_rows:
                writer.writerow([trace_id, true_sum, pred_sum])
        written.append(path)

    if audit is not None:
        path = out_dir / "split_audit.json"
        path.write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
        written.append(path)

    return written
