"""RMSE / REL / delta1 and their aggregation over domains and stages."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

DELTA1_THRESHOLD = 1.25
CSV_HEADER = ("stage", "domain", "rmse", "rel", "delta1", "routing_mode")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    rmse: float
    rel: float
    delta1: float
    n_pixels: int


def compute_metrics(pred, gt, mask=None) -> MetricsRecord:
    """Metrics over pixels that are masked valid and have gt > 0."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricsError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt > 0
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != gt.shape:
            raise MetricsError(f"mask shape {mask.shape} != gt shape {gt.shape}")
        valid &= mask.astype(bool)
    n = int(valid.sum())
    if n == 0:
        raise MetricsError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    err = p - g
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    return MetricsRecord(
        rmse=float(np.sqrt(np.mean(err * err))),
        rel=float(np.mean(np.abs(err) / g)),
        delta1=float(np.mean(ratio < DELTA1_THRESHOLD)),
        n_pixels=n,
    )


def aggregate(records: Mapping[str, MetricsRecord] | Iterable[MetricsRecord]) -> MetricsRecord:
    """Unweighted mean over domains; n_pixels is the total."""
    recs = list(records.values()) if isinstance(records, Mapping) else list(records)
    if not recs:
        raise MetricsError("aggregate needs at least one record")
    return MetricsRecord(
        rmse=float(np.mean([r.rmse for r in recs])),
        rel=float(np.mean([r.rel for r in recs])),
        delta1=float(np.mean([r.delta1 for r in recs])),
        n_pixels=sum(r.n_pixels for r in recs),
    )


@dataclass(frozen=True)
class StageRecord:
    stage: int
    domain: str
    metrics: MetricsRecord
    routing_mode: str = "oracle"


def forgetting_curve(records: Sequence[StageRecord]) -> dict[str, list[tuple[int, float]]]:
    """Per domain, (stage, delta1) after every stage in which it was evaluated."""
    curve: dict[str, list[tuple[int, float]]] = {}
    for r in sorted(records, key=lambda r: r.stage):
        curve.setdefault(r.domain, []).append((r.stage, r.metrics.delta1))
    return curve


def records_to_csv(records: Sequence[StageRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([r.stage, r.domain, repr(r.metrics.rmse), repr(r.metrics.rel), repr(r.metrics.delta1),
                    r.routing_mode])
    return buf.getvalue()
