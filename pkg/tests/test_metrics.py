import csv
import json

import numpy as np
import pytest

from nocspose.correspondence import NocsMap
from nocspose.geometry import Pose, axis_angle, box_mesh, compute_nocs_bounds, random_rotation
from nocspose.metrics import (
    SUMMARY_COLUMNS,
    EvalRecord,
    add_metric,
    add_recall,
    correspondence_error,
    dice,
    iou,
    nocs_ce_loss,
    summarize,
    total_loss,
    write_report,
)
from nocspose.raster import render
from nocspose.symmetry import SymmetrySpec


def test_add_examples(blob, rng):
    gt = Pose(random_rotation(rng), [0.1, 0.2, 3.0])
    assert add_metric(gt, gt, blob) == 0.0
    t = np.array([0.3, -0.4, 1.2])
    assert add_metric(Pose(gt.rotation, gt.translation + t), gt, blob) == pytest.approx(np.linalg.norm(t), rel=1e-12)


def test_add_half_turn_cube():
    cube = box_mesh()
    gt = Pose(np.eye(3), [0, 0, 4.0])
    est = Pose(axis_angle([0, 0, 1], np.pi), [0, 0, 4.0])
    direct = np.mean([np.linalg.norm(est.apply(v[None])[0] - gt.apply(v[None])[0]) for v in cube.vertices])
    assert add_metric(est, gt, cube) == pytest.approx(direct, rel=1e-12)
    assert direct == pytest.approx(np.sqrt(2), rel=1e-12)


def test_add_symmetric_in_arguments(blob, rng):
    a = Pose(random_rotation(rng), rng.normal(size=3))
    b = Pose(random_rotation(rng), rng.normal(size=3))
    assert add_metric(a, b, blob) == pytest.approx(add_metric(b, a, blob), rel=1e-12)


def _records(dists):
    return [EvalRecord("obj", str(i), add=d, add_sym=d) for i, d in enumerate(dists)]


def test_add_recall_counts(rng):
    assert add_recall(_records([0.0] * 5), 1.0) == 1.0
    assert add_recall(_records([1.0] * 5), 1.0) == 0.0
    d = rng.uniform(0, 0.3, size=200)
    assert add_recall(_records(d), 2.0) == np.count_nonzero(d < 0.2) / 200
    recs = _records([0.0, 0.0]) + [EvalRecord("obj", "x", status="failed: no consensus")]
    assert add_recall(recs, 1.0) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        add_recall([], 1.0)


def test_add_recall_uses_symmetric_distance():
    r = EvalRecord("obj", "0", add=0.5, add_sym=0.01)
    assert add_recall([r], 1.0) == 1.0


def test_dice_iou_examples():
    a = np.zeros((10, 20), bool)
    b = np.zeros((10, 20), bool)
    assert dice(a, b) == 1.0 and iou(a, b) == 0.0
    a[:, :10] = True
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0
    b[:, 10:] = True
    assert dice(a, b) == 0.0 and iou(a, b) == 0.0
    # |A| = |B| = 100 with 50 shared
    A = np.zeros(150, bool)
    B = np.zeros(150, bool)
    A[:100] = True
    B[50:] = True
    assert dice(A, B) == 0.5
    big = np.ones((8, 8), bool)
    quarter = np.zeros((8, 8), bool)
    quarter[:4, :4] = True
    assert iou(big, quarter) == 0.25


def test_dice_iou_properties(rng):
    for _ in range(50):
        a = rng.random((12, 12)) < 0.4
        b = rng.random((12, 12)) < 0.4
        assert dice(a, b) == dice(b, a) and iou(a, b) == iou(b, a)
        assert dice(a, b) >= iou(a, b)
        assert 0 <= iou(a, b) <= 1


@pytest.fixture
def rendered(blob, blob_bounds, camera):
    pose = Pose(random_rotation(np.random.default_rng(7)), [0, 0, 2.4])
    return pose, NocsMap.from_render(render(blob, blob_bounds, pose, camera))


def test_corr_error_identity_and_offset(rendered, blob_bounds):
    _, gt = rendered
    assert correspondence_error(gt, gt, blob_bounds) <= np.linalg.norm(blob_bounds.extent) / 510
    k = 3
    bins = gt.bins.astype(int)
    room = gt.mask & (bins[..., 0] <= 255 - k)
    bins[..., 0] = np.where(room, bins[..., 0] + k, bins[..., 0])
    pred = NocsMap(room, bins.astype(np.uint8))
    err = correspondence_error(pred, gt, blob_bounds)
    assert err == pytest.approx(k / 255 * blob_bounds.extent[0], rel=1e-9)


def test_corr_error_no_overlap(rendered, blob_bounds):
    _, gt = rendered
    empty = NocsMap(np.zeros_like(gt.mask), gt.bins)
    with pytest.raises(ValueError):
        correspondence_error(empty, gt, blob_bounds)


def test_corr_error_symmetric_orbit(cylinder, camera):
    bounds = compute_nocs_bounds(cylinder)
    spec = SymmetrySpec.continuous()
    gt_pose = Pose(random_rotation(np.random.default_rng(2)), [0, 0, 3.5])
    other = Pose(gt_pose.rotation @ axis_angle([0, 0, 1], np.deg2rad(40)), gt_pose.translation)
    gt = NocsMap.from_render(render(cylinder, bounds, gt_pose, camera))
    pred = NocsMap.from_render(render(cylinder, bounds, other, camera))
    quant = np.linalg.norm(bounds.extent) / 510
    assert correspondence_error(pred, gt, bounds) > 10 * quant
    err = correspondence_error(pred, gt, bounds, gt_pose, spec, cylinder, camera)
    assert err <= quant
    with pytest.raises(ValueError):
        correspondence_error(pred, gt, bounds, symmetry=spec)


def _one_hot(gt: NocsMap):
    probs = np.zeros(gt.shape + (3, 256))
    np.put_along_axis(probs, gt.bins[..., None].astype(int), 1.0, axis=-1)
    return probs


def test_ce_loss_examples(rendered):
    _, gt = rendered
    assert nocs_ce_loss(_one_hot(gt), gt) == 0.0
    uniform = np.full(gt.shape + (3, 256), 1 / 256)
    assert nocs_ce_loss(uniform, gt) == pytest.approx(gt.mask.sum() * 3 * np.log(256), rel=1e-12)
    empty = NocsMap(np.zeros_like(gt.mask), gt.bins)
    assert nocs_ce_loss(uniform, empty) == 0.0
    with pytest.raises(ValueError):
        nocs_ce_loss(uniform * 1.01, gt)
    with pytest.raises(ValueError):
        nocs_ce_loss(uniform[..., :128], gt)


def test_ce_loss_positive_when_wrong(rendered):
    _, gt = rendered
    probs = 0.9 * _one_hot(gt) + 0.1 / 256
    assert nocs_ce_loss(probs, gt) > 0


def test_total_loss_decomposition(rendered):
    _, gt = rendered
    probs = _one_hot(gt)
    assert total_loss(probs, gt.mask, gt) == 0.0
    partial = gt.mask.copy()
    partial[: partial.shape[0] // 2] = False
    assert total_loss(probs, partial, gt) == pytest.approx(5.0 * (1 - dice(partial, gt.mask)), rel=1e-12)
    soft = 0.5 * probs + 0.5 / 256
    assert total_loss(soft, partial, gt, alpha=0.0) == nocs_ce_loss(soft, gt)


def _mixed_records():
    recs = _records([0.01, 0.02, 0.5])
    recs += [EvalRecord("cyl", "0", add=0.3, add_sym=0.001, corr_err_median=0.004, dice=0.9, iou=0.8)]
    recs += [EvalRecord("cyl", "1", status="failed: no consensus")]
    return recs


def test_summarize_rows():
    rows = summarize(_mixed_records(), {"obj": 1.0, "cyl": 1.0})
    assert [r["object_id"] for r in rows] == ["cyl", "obj"]
    cyl, obj = rows
    assert cyl["n_failed"] == 1 and cyl["add_recall"] == 0.5 and cyl["mean_add_sym"] == 0.001
    assert obj["add_recall"] == pytest.approx(2 / 3) and obj["median_add"] == 0.02
    assert obj["mean_dice"] is None
    with pytest.raises(ValueError):
        summarize([], {})


def test_write_report_is_byte_stable(tmp_path):
    recs = _mixed_records()
    j1, c1 = write_report(recs, {"obj": 1.0, "cyl": 1.0}, tmp_path / "a")
    j2, c2 = write_report(recs, {"obj": 1.0, "cyl": 1.0}, tmp_path / "b")
    assert j1.read_bytes() == j2.read_bytes() and c1.read_bytes() == c2.read_bytes()
    with c1.open() as fh:
        assert next(csv.reader(fh)) == SUMMARY_COLUMNS
    back = [EvalRecord.from_json(o) for o in json.loads(j1.read_text())]
    assert back == recs
