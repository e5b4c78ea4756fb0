import csv

import numpy as np
import pytest

from deftrack.association import CloudFrame, Intrinsics
from deftrack.errors import LengthMismatch
from deftrack.metrics import (
    REPORT_FIELDS,
    Sequence,
    accuracy_curve,
    compare_modes,
    evaluate_run,
    frame_distances,
    joint_accuracy,
    joint_errors,
    reconstruction_error,
    visible_vertices,
    write_curves,
    write_report,
)
from deftrack.rigs import sheet, sphere
from deftrack.seqio import GroundTruth
from deftrack.skeleton import forward_kinematics, joint_positions, link_offsets
from deftrack.skinmesh import skin
from deftrack.synth import render_frame
from deftrack.tracker import TrackConfig

from conftest import vertex_cloud


def test_identical_estimates_score_one(rng):
    j = rng.normal(size=(10, 5, 3))
    curve = joint_accuracy(j, j)
    assert np.all(curve.fraction == 1.0)
    assert curve.auc == 1.0


def test_two_sample_example():
    est = np.zeros((1, 2, 3))
    gt = np.array([[[0.05, 0, 0], [0.15, 0, 0]]])
    curve = joint_accuracy(est, gt, thresholds=[0.0, 0.1, 0.2])
    assert curve.at(0.1) == 0.5
    assert curve.fraction.tolist() == [0.0, 0.5, 1.0]
    # trapezoid over [0, 0.2] normalised by the range
    assert curve.auc == pytest.approx(0.5)


def test_curve_matches_counting_oracle(rng):
    est = rng.normal(size=(20, 6, 3))
    gt = est + rng.normal(scale=0.08, size=est.shape)
    vis = rng.random((20, 6)) < 0.8
    t = np.linspace(0, 0.3, 31)
    curve = joint_accuracy(est, gt, vis, thresholds=t)
    d = [np.linalg.norm(est[f, j] - gt[f, j]) for f in range(20) for j in range(6) if vis[f, j]]
    expect = np.array([sum(x <= th for x in d) / len(d) for th in t])
    np.testing.assert_array_equal(curve.fraction, expect)
    assert curve.n_samples == len(d)
    assert np.all(np.diff(curve.fraction) >= 0)
    assert np.all((curve.fraction >= 0) & (curve.fraction <= 1))
    np.testing.assert_allclose(curve.auc, np.sum((expect[1:] + expect[:-1]) / 2 * np.diff(t)) / 0.3, rtol=1e-12)


def test_mean_subtraction_removes_constant_offsets(rng):
    gt = rng.normal(size=(8, 4, 3))
    est = gt + rng.normal(size=(1, 4, 3))
    assert np.max(joint_errors(est, gt, mean_subtract=True)) <= 1e-12
    assert np.min(joint_errors(est, gt)) > 0


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        joint_accuracy(np.zeros((3, 2, 3)), np.zeros((4, 2, 3)))
    with pytest.raises(LengthMismatch):
        joint_accuracy(np.zeros((3, 2, 3)), np.zeros((3, 2, 3)), np.ones((3, 3), bool))


def test_threshold_validation():
    with pytest.raises(ValueError):
        accuracy_curve([0.1], [0.2, 0.1])
    with pytest.raises(ValueError):
        accuracy_curve([], [0.0, 0.1])


def test_frame_distances_match_brute_force(rng):
    pts = rng.normal(size=(12, 10, 3))
    valid = rng.random((12, 10)) < 0.7
    frame = CloudFrame(pts, valid)
    verts = rng.normal(size=(200, 3))
    d = frame_distances(verts, frame)
    cloud = pts[valid]
    brute = np.sqrt(np.min(np.sum((verts[:, None] - cloud[None]) ** 2, axis=2), axis=1))
    np.testing.assert_allclose(d, brute, rtol=1e-14, atol=0)
    empty = CloudFrame(pts, np.zeros_like(valid))
    assert np.all(np.isinf(frame_distances(verts, empty)))


def test_own_vertex_cloud_scores_zero(kinect):
    b = sphere(iterations=3)
    posed = skin(b.mesh, link_offsets(b.skeleton, np.zeros(3)))
    frame = vertex_cloud(posed, kinect)
    rec = reconstruction_error(posed, b.mesh.faces, frame, kinect)
    assert rec.all().size > 100
    # every visible vertex projects to its own pixel except where a nearer one shares it
    assert np.median(rec.all()) == 0.0


def test_visible_vertices_rule(kinect):
    b = sphere(iterations=3)
    posed = skin(b.mesh, link_offsets(b.skeleton, np.zeros(3)))
    vis = visible_vertices(posed, b.mesh.faces, kinect)
    facing = np.einsum("ij,ij->i", posed.n, posed.v) <= 0
    assert np.all(facing[vis])
    assert 0.3 < vis.mean() < 0.55
    # the far side of the sphere is never visible
    assert not np.any(vis & (posed.v[:, 2] > 1.0 + 0.1))


def test_planar_five_millimetre_offset():
    intr = Intrinsics(2000.0, 2000.0, 150.0, 150.0, 300, 300)
    b = sheet(center=(0, 0, 1.0), size=0.1, n=21)
    frame = render_frame(b, [0.0], None, intr)
    posed = skin(b.mesh, link_offsets(b.skeleton, [0.005]))
    rec = reconstruction_error(posed, b.mesh.faces, frame, intr)
    assert rec.all().size == b.mesh.n_vertices
    assert abs(rec.median - 0.005) <= 1e-4


def short_sequence(b, intr, thetas, name):
    skel = b.skeleton
    frames = [render_frame(b, t, None, intr) for t in thetas]
    joints = np.array([joint_positions(forward_kinematics(skel, t), b.labeled_joints) for t in thetas])
    gt = GroundTruth(np.array(thetas), joints, np.ones(joints.shape[:2], bool), ["tx", "ty", "tz"], b.joint_names)
    return Sequence(name, frames, intr, gt)


def test_rigid_equals_smooth_bind_on_rigid_rig(small_intr, tmp_path):
    b = sphere(iterations=3)
    seqs = [
        short_sequence(b, small_intr, [np.zeros(3), [0.01, 0, 0.01], [0.02, 0, 0.015]], "a"),
        short_sequence(b, small_intr, [np.zeros(3), [0, -0.01, 0], [0, -0.02, -0.01]], "b"),
    ]
    results = compare_modes(b, seqs, ("rigid", "smooth-bind"), TrackConfig())
    assert [(r.mode, r.sequence) for r in results] == [("rigid", "a"), ("rigid", "b"),
                                                       ("smooth-bind", "a"), ("smooth-bind", "b")]
    for rig, smooth in zip(results[:2], results[2:]):
        assert rig.theta.tobytes() == smooth.theta.tobytes()
        assert rig.recon.all().tobytes() == smooth.recon.all().tobytes()
    write_report(tmp_path / "m.csv", results)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(rows) == 2 * 2
    assert tuple(rows[0]) == REPORT_FIELDS
    write_curves(tmp_path / "c.csv", results)
    curve_rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert len(curve_rows) == 1 + 4 * (len(results[0].joints.thresholds) + len(results[0].recon_curve.thresholds))


def test_evaluate_run_length_mismatch(small_intr):
    b = sphere(iterations=2)
    seq = short_sequence(b, small_intr, [np.zeros(3), np.zeros(3)], "s")
    with pytest.raises(LengthMismatch):
        evaluate_run(b, seq, np.zeros((3, 3)), None, "smooth-bind")


def test_perfect_run_scores_full_accuracy():
    # 1 mm pixel footprint at the sphere's depth
    intr = Intrinsics(1000.0, 1000.0, 200.0, 200.0, 400, 400)
    b = sphere(iterations=2)
    thetas = [np.zeros(3), [0.01, 0.0, 0.0]]
    seq = short_sequence(b, intr, thetas, "s")
    res = evaluate_run(b, seq, np.array(thetas), None, "smooth-bind")
    assert res.joints.auc == 1.0 and res.joint_mean == 0.0
    assert res.recon.median < 0.001
