import json

import numpy as np
import pytest

from posegen import losses, metrics
from posegen.geometry import Quaternion, RigidTransform, random_unit_quaternion
from posegen.metrics import EvalRecord


def _rec(d, obj="a", symmetric=False, adds=None, diameter=0.1):
    return EvalRecord(obj, d, d if adds is None else adds, symmetric, diameter)


def _random_records(rng, n):
    add = rng.uniform(0, 0.15, n)
    adds = add * rng.uniform(0.3, 1.0, n)
    sym = rng.uniform(size=n) < 0.3
    return [EvalRecord(f"o{k % 3}", a, s, bool(f), 0.1) for k, (a, s, f) in
            enumerate(zip(add, adds, sym))]


def test_distances_share_the_loss_oracles():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    gt = RigidTransform(random_unit_quaternion(rng), rng.normal(size=3))
    est = RigidTransform(random_unit_quaternion(rng), rng.normal(size=3))
    assert metrics.add_distance(gt, est, x) == losses.pose_loss(gt, est, x)
    assert metrics.adds_distance(gt, est, x) == losses.sym_pose_loss(gt, est, x)
    assert metrics.add_distance(gt, gt, x) == 0.0
    shift = RigidTransform(Quaternion.identity(), [0, 0.03, 0])
    assert metrics.add_distance(RigidTransform.identity(), shift, x) == pytest.approx(0.03)


def test_record_validation():
    with pytest.raises(ValueError):
        EvalRecord("a", -1.0, 0.0)
    with pytest.raises(ValueError):
        EvalRecord("a", np.inf, 0.0)


def test_accuracy_examples():
    assert metrics.accuracy_at([_rec(0.0)] * 4, 0.02) == 1.0
    assert metrics.accuracy_at([_rec(0.01), _rec(0.03)], 0.02) == 0.5
    assert metrics.accuracy_at([_rec(0.02)], 0.02) == 0.0  # strict inequality
    with pytest.raises(ValueError):
        metrics.accuracy_at([], 0.02)
    with pytest.raises(ValueError):
        metrics.accuracy_at([_rec(0.0)], 0.0)


def test_accuracy_matches_counting_oracle():
    rng = np.random.default_rng(1)
    recs = _random_records(rng, 1000)
    for thr in (0.005, 0.02, 0.07):
        for rule in (False, True):
            count = 0
            for r in recs:
                d = (r.adds_distance if r.symmetric else r.add_distance) if rule else r.adds_distance
                count += d < thr
            assert metrics.accuracy_at(recs, thr, rule) == count / 1000


def test_accuracy_monotone_in_threshold():
    recs = _random_records(np.random.default_rng(2), 300)
    accs = [metrics.accuracy_at(recs, t) for t in np.linspace(0.001, 0.2, 50)]
    assert all(b >= a for a, b in zip(accs, accs[1:]))


def test_add_accuracy_uses_diameter_and_symmetric_rule():
    recs = [EvalRecord("a", 0.009, 0.009, False, 0.1), EvalRecord("a", 0.011, 0.011, False, 0.1),
            EvalRecord("b", 0.5, 0.001, True, 0.1)]
    assert metrics.add_accuracy(recs) == pytest.approx(2 / 3)


def test_auc_examples():
    assert metrics.auc([_rec(0.0)] * 3) == 1.0
    assert metrics.auc([_rec(0.05)], 0.1) == pytest.approx(0.5, abs=1e-15)
    assert metrics.auc([_rec(0.5)]) == 0.0
    with pytest.raises(ValueError):
        metrics.auc([])
    with pytest.raises(ValueError):
        metrics.auc([_rec(0.0)], 0.0)


def test_auc_matches_trapezoid_integration():
    rng = np.random.default_rng(3)
    recs = _random_records(rng, 200)
    d = np.array([r.adds_distance for r in recs])
    grid = np.linspace(0, 0.1, 100_000)
    acc = np.array([np.count_nonzero(d < t) for t in grid]) / len(d)
    assert abs(metrics.auc(recs) - np.trapezoid(acc, grid) / 0.1) < 1e-4


def test_auc_bounds_and_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(50):
        recs = _random_records(rng, 20)
        a = metrics.auc(recs)
        assert 0.0 <= a <= 1.0
        worse = [EvalRecord(r.object_id, r.add_distance, r.adds_distance * 1.5 + 0.001)
                 for r in recs]
        assert metrics.auc(worse) <= a


def test_report_rows_and_mean():
    perfect = {"obj": [_rec(0.0, "obj")] * 3}
    rows = metrics.per_object_report(perfect)
    assert rows[0] == metrics.ReportRow("obj", 1.0, 1.0, 1.0)
    assert rows[-1].object == "MEAN"
    two = {"x": [_rec(0.02, "x")], "y": [_rec(0.0, "y")]}
    rows = metrics.per_object_report(two)
    assert [r.auc for r in rows] == pytest.approx([0.8, 1.0, 0.9])


def test_report_recomputes_from_raw_records(tmp_path):
    recs = _random_records(np.random.default_rng(5), 90)
    rows = metrics.per_object_report(recs)
    for row in rows[:-1]:
        mine = [r for r in recs if r.object_id == row.object]
        assert row.auc == metrics.auc(mine)
        assert row.acc_2cm == metrics.accuracy_at(mine, 0.02)
        assert row.acc_add == metrics.add_accuracy(mine)
    assert rows[-1].auc == pytest.approx(np.mean([r.auc for r in rows[:-1]]), abs=1e-15)
    csv_path, json_path = tmp_path / "r.csv", tmp_path / "r.json"
    metrics.write_report(rows, csv_path, json_path, {"note": "x"})
    assert metrics.read_report_csv(csv_path) == rows
    payload = json.loads(json_path.read_text())
    assert [metrics.ReportRow(**r) for r in payload["rows"]] == rows
    assert payload["note"] == "x"
    assert csv_path.read_text().splitlines()[0] == "object,auc,acc_2cm,acc_add"
