import math

import numpy as np
import pytest

from lifelong_depth.metrics import (
    CSV_HEADER,
    MetricsError,
    MetricsRecord,
    StageRecord,
    aggregate,
    compute_metrics,
    forgetting_curve,
    records_to_csv,
)


def brute_force(pred, gt, mask):
    sq = ab = hit = n = 0
    for p, g, m in zip(pred.ravel(), gt.ravel(), mask.ravel()):
        if not m or g <= 0:
            continue
        n += 1
        sq += (p - g) ** 2
        ab += abs(p - g) / g
        hit += max(p / g, g / p) < 1.25
    return math.sqrt(sq / n), ab / n, hit / n, n


def test_perfect():
    gt = np.random.default_rng(0).uniform(1, 9, (4, 4))
    r = compute_metrics(gt, gt)
    assert (r.rmse, r.rel, r.delta1, r.n_pixels) == (0.0, 0.0, 1.0, 16)


def test_ratio_1_2():
    gt = np.random.default_rng(1).uniform(1, 9, (5, 5))
    r = compute_metrics(1.2 * gt, gt)
    assert r.rel == pytest.approx(0.2, abs=1e-12)
    assert r.delta1 == 1.0


def test_ratio_1_3():
    gt = np.random.default_rng(2).uniform(1, 9, (5, 5))
    assert compute_metrics(1.3 * gt, gt).delta1 == 0.0
    assert compute_metrics(gt / 1.3, gt).delta1 == 0.0


def test_threshold_is_strict():
    assert compute_metrics(np.array([1.25]), np.array([1.0])).delta1 == 0.0


def test_brute_force_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        gt = rng.uniform(-1, 10, shape)
        pred = rng.uniform(0.01, 12, shape)
        mask = rng.random(shape) < 0.8
        if not np.any(mask & (gt > 0)):
            continue
        r = compute_metrics(pred, gt, mask)
        rmse, rel, d1, n = brute_force(pred, gt, mask)
        assert abs(r.rmse - rmse) < 1e-12 and abs(r.rel - rel) < 1e-12 and abs(r.delta1 - d1) < 1e-12
        assert r.n_pixels == n


def test_scale_properties():
    rng = np.random.default_rng(4)
    gt, pred = rng.uniform(1, 5, (6, 6)), rng.uniform(1, 5, (6, 6))
    a, b = compute_metrics(pred, gt), compute_metrics(7.5 * pred, 7.5 * gt)
    assert a.delta1 == b.delta1
    assert a.rel == pytest.approx(b.rel, rel=1e-12)
    assert b.rmse == pytest.approx(7.5 * a.rmse, rel=1e-12)


def test_masked_pixels_ignored():
    gt = np.array([1.0, 2.0, 3.0])
    mask = np.array([True, True, False])
    a = compute_metrics(np.array([1.0, 2.0, 100.0]), gt, mask)
    b = compute_metrics(np.array([1.0, 2.0, -5.0]), gt, mask)
    assert a == b


def test_non_positive_gt_invalid():
    r = compute_metrics(np.array([1.0, 5.0]), np.array([1.0, 0.0]))
    assert r.n_pixels == 1 and r.delta1 == 1.0


def test_empty_mask():
    with pytest.raises(MetricsError):
        compute_metrics(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))


def test_shape_mismatch():
    with pytest.raises(MetricsError):
        compute_metrics(np.ones(3), np.ones(4))


def rec(d1):
    return MetricsRecord(1.0, 0.1, d1, 10)


def test_aggregate_average():
    assert aggregate({"nyu": rec(0.768), "kitti": rec(0.910)}).delta1 == pytest.approx(0.839, abs=1e-12)


def test_aggregate_single():
    assert aggregate([rec(0.5)]).delta1 == 0.5


def test_aggregate_empty():
    with pytest.raises(MetricsError):
        aggregate([])


def stage_records():
    order = ["A", "B", "C"]
    return [StageRecord(t, d, rec(0.1 * t + i)) for t in range(1, 4) for i, d in enumerate(order[:t])]


def test_forgetting_curve_points():
    curve = forgetting_curve(stage_records())
    assert sum(len(v) for v in curve.values()) == 6
    assert [s for s, _ in curve["A"]] == [1, 2, 3]
    assert len(curve["C"]) == 1


def test_csv():
    text = records_to_csv(stage_records())
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 7
    assert lines[1].startswith("1,A,1.0,0.1,")
    assert text == records_to_csv(stage_records())
