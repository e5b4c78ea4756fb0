"""Evaluation: joint accuracy curves and surface reconstruction error."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .association import pixel_of
from .errors import LengthMismatch
from .raster import rasterize
from .skeleton import forward_kinematics, joint_positions, link_offsets
from .skinmesh import skin
from .tracker import MODES, TrackConfig, track_sequence

JOINT_THRESHOLDS = np.linspace(0.0, 0.2, 41)
RECON_THRESHOLDS = np.linspace(0.0, 0.02, 41)


@dataclass
class AccuracyCurve:
    """Fraction of samples within each threshold, with normalised AUC."""

    thresholds: np.ndarray
    fraction: np.ndarray
    auc: float
    n_samples: int

    def at(self, threshold):
        """Fraction at a threshold that must be one of ``thresholds``."""
        k = np.flatnonzero(np.isclose(self.thresholds, threshold, rtol=0, atol=1e-12))
        if k.size == 0:
            raise KeyError(f"threshold {threshold} not sampled")
        return float(self.fraction[k[0]])


def _thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64).ravel()
    if t.size < 2 or np.any(np.diff(t) <= 0) or t[0] < 0:
        raise ValueError("thresholds must be non-negative, strictly ascending, at least two")
    return t


def accuracy_curve(distances, thresholds):
    """Curve of ``|{d <= t}| / |d|`` sampled at ``thresholds``."""
    t = _thresholds(thresholds)
    d = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    if d.size == 0:
        raise ValueError("no samples to evaluate")
    fraction = np.searchsorted(d, t, side="right") / d.size
    auc = float(np.trapezoid(fraction, t) / (t[-1] - t[0]))
    return AccuracyCurve(thresholds=t, fraction=fraction, auc=auc, n_samples=int(d.size))


def joint_errors(estimated, truth, visible=None, mean_subtract=False):
    """Per-sample joint distances over visible ``(frame, joint)`` pairs.

    With ``mean_subtract`` each joint's average offset over its visible frames
    is removed first, giving the best constant placement of every estimate.
    """
    est = np.asarray(estimated, dtype=np.float64)
    gt = np.asarray(truth, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 3 or est.shape[2] != 3:
        raise LengthMismatch(f"estimated {est.shape} and ground truth {gt.shape} differ")
    vis = np.ones(est.shape[:2], dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    if vis.shape != est.shape[:2]:
        raise LengthMismatch(f"visibility {vis.shape} does not match {est.shape[:2]}")
    diff = est - gt
    if mean_subtract:
        count = vis.sum(axis=0)
        offset = np.einsum("fj,fjk->jk", vis.astype(np.float64), diff) / np.maximum(count, 1)[:, None]
        diff = diff - offset[None]
    return np.linalg.norm(diff, axis=2)[vis]


def joint_accuracy(estimated, truth, visible=None, thresholds=JOINT_THRESHOLDS, mean_subtract=False):
    """Accuracy-vs-threshold curve for joint positions ``(F, J, 3)``."""
    return accuracy_curve(joint_errors(estimated, truth, visible, mean_subtract), thresholds)


@dataclass
class ReconError:
    """Per-frame distances from visible vertices to the observed cloud."""

    distances: list = field(default_factory=list)

    def all(self):
        if not self.distances:
            return np.zeros(0)
        return np.concatenate(self.distances)

    def percentiles(self, q=(50, 90, 95)):
        d = self.all()
        return {p: float(np.percentile(d, p)) if d.size else float("nan") for p in q}

    @property
    def median(self):
        return self.percentiles((50,))[50]

    @property
    def mean(self):
        d = self.all()
        return float(d.mean()) if d.size else float("nan")

    def curve(self, thresholds=RECON_THRESHOLDS):
        return accuracy_curve(self.all(), thresholds)


def visible_vertices(posed, faces, intr):
    """Vertices seen in the mesh's own render.

    A vertex counts when it is valid, in frame, not back-facing and a corner
    of at least one triangle that won a z-buffer pixel.
    """
    _, _, in_frame = pixel_of(intr, posed.v)
    facing = np.einsum("ij,ij->i", posed.n, posed.v) <= 0
    _, tri = rasterize(posed.v, faces, intr)
    won = np.zeros(len(posed.v), dtype=bool)
    won[np.asarray(faces)[np.unique(tri[tri >= 0])].ravel()] = True
    return in_frame & facing & posed.valid & won


def frame_distances(vertices, frame):
    """Exact nearest-valid-point distance for each row of ``vertices``."""
    cloud = frame.points[frame.valid]
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        return np.zeros(0)
    if len(cloud) == 0:
        return np.full(len(vertices), np.inf)
    d, _ = cKDTree(cloud).query(vertices, k=1)
    return d


def reconstruction_error(posed, faces, frame, intr, visible=None):
    """Distances for one frame, as a single-frame :class:`ReconError`."""
    if visible is None:
        visible = visible_vertices(posed, faces, intr)
    return ReconError(distances=[frame_distances(posed.v[visible], frame)])


@dataclass
class Sequence:
    """Evaluation input: named frames with intrinsics and ground truth."""

    name: str
    frames: list
    intrinsics: object
    ground_truth: object


@dataclass
class ModeResult:
    mode: str
    sequence: str
    theta: np.ndarray
    joints: AccuracyCurve
    joint_mean: float
    recon: ReconError
    recon_curve: AccuracyCurve


def evaluate_run(bundle, seq, thetas, phis, mode, thresholds=JOINT_THRESHOLDS, recon_thresholds=RECON_THRESHOLDS):
    """Metrics for a tracked run given per-frame ``thetas`` and ``phis``.

    ``phis`` may be ``None`` (no warp) or indexable per frame.
    """
    skel = bundle.skeleton
    gt = seq.ground_truth
    thetas = np.asarray(thetas, dtype=np.float64)
    if len(thetas) != len(seq.frames) or len(gt.theta) != len(seq.frames):
        raise LengthMismatch(
            f"{seq.name}: {len(thetas)} tracked frames, {len(seq.frames)} observed, {len(gt.theta)} ground truth"
        )
    mesh = bundle.mesh.rigid() if mode == "rigid" else bundle.mesh
    estimated = np.empty((len(thetas), len(bundle.labeled_joints), 3))
    recon = ReconError()
    for f, (theta, frame) in enumerate(zip(thetas, seq.frames)):
        fk = forward_kinematics(skel, theta)
        estimated[f] = joint_positions(fk, bundle.labeled_joints)
        phi = None if phis is None else phis[f]
        posed = skin(mesh, link_offsets(skel, theta, fk), phi)
        recon.distances.extend(reconstruction_error(posed, mesh.faces, frame, seq.intrinsics).distances)
    errors = joint_errors(estimated, gt.joints, gt.visible)
    return ModeResult(
        mode=mode,
        sequence=seq.name,
        theta=thetas,
        joints=accuracy_curve(errors, thresholds),
        joint_mean=float(errors.mean()),
        recon=recon,
        recon_curve=recon.curve(recon_thresholds),
    )


def run_mode(bundle, seq, mode, config=None):
    """Track ``seq`` from its ground-truth first pose; returns ``(thetas, phis)``."""
    base = config or TrackConfig()
    cfg = TrackConfig(mode=mode, kin=base.kin, shape=base.shape, window_radius=base.window_radius, cutoff=base.cutoff)
    thetas, phis = [], []
    for res in track_sequence(bundle, seq.frames, seq.intrinsics, seq.ground_truth.theta[0], cfg):
        thetas.append(res.theta)
        phis.append(np.array(res.phi, copy=True))
    return np.array(thetas), phis


def compare_modes(bundle, sequences, modes=MODES, config=None, thresholds=JOINT_THRESHOLDS,
                  recon_thresholds=RECON_THRESHOLDS):
    """Track and evaluate every sequence under every mode.

    Results are ordered mode-major, then by sequence.
    """
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ValueError(f"unknown modes {unknown}; expected a subset of {MODES}")
    results = []
    for mode in modes:
        for seq in sequences:
            thetas, phis = run_mode(bundle, seq, mode, config)
            results.append(evaluate_run(bundle, seq, thetas, phis, mode, thresholds, recon_thresholds))
    return results


REPORT_FIELDS = (
    "mode",
    "sequence",
    "frames",
    "joint_samples",
    "joint_auc",
    "joint_acc_10cm",
    "joint_mean_m",
    "recon_samples",
    "recon_auc",
    "recon_median_m",
    "recon_p90_m",
    "recon_mean_m",
)


def report_rows(results):
    rows = []
    for r in results:
        pct = r.recon.percentiles((50, 90))
        try:
            ten = r.joints.at(0.1)
        except KeyError:
            ten = ""
        rows.append({
            "mode": r.mode,
            "sequence": r.sequence,
            "frames": len(r.theta),
            "joint_samples": r.joints.n_samples,
            "joint_auc": r.joints.auc,
            "joint_acc_10cm": ten,
            "joint_mean_m": r.joint_mean,
            "recon_samples": r.recon_curve.n_samples,
            "recon_auc": r.recon_curve.auc,
            "recon_median_m": pct[50],
            "recon_p90_m": pct[90],
            "recon_mean_m": r.recon.mean,
        })
    return rows


def write_report(path, results):
    """One row per (mode, sequence) with summary metrics."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in report_rows(results):
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def write_curves(path, results):
    """Long-format curve samples: mode, sequence, metric, threshold, fraction."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "sequence", "metric", "threshold_m", "fraction"])
        for r in results:
            for metric, curve in (("joint", r.joints), ("recon", r.recon_curve)):
                for t, frac in zip(curve.thresholds, curve.fraction):
                    writer.writerow([r.mode, r.sequence, metric, repr(float(t)), repr(float(frac))])
    return path
