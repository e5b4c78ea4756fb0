"""Synthetic ground truth: render organised clouds of a posed, warped model."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .association import CloudFrame
from .errors import ValidationError
from .raster import depth_to_points, rasterize
from .seqio import GroundTruth, SequenceWriter, save_ground_truth
from .skeleton import forward_kinematics, joint_positions, link_offsets
from .skinmesh import skin


@dataclass
class Curve:
    """Joint value over time: ``constant``, ``linear`` ramp or ``sinusoid``."""

    kind: str = "constant"
    value: float = 0.0
    start: float = 0.0
    end: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0
    phase: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "sinusoid"):
            raise ValueError(f"unknown curve kind {self.kind!r}")

    def __call__(self, frame, frame_count, frame_rate):
        if self.kind == "constant":
            return self.value
        if self.kind == "linear":
            u = frame / (frame_count - 1) if frame_count > 1 else 0.0
            return self.start + (self.end - self.start) * u
        t = frame / frame_rate
        return self.offset + self.amplitude * np.sin(2 * np.pi * self.frequency * t + self.phase)

    def extent(self):
        if self.kind == "constant":
            return abs(self.value)
        if self.kind == "linear":
            return max(abs(self.start), abs(self.end))
        return abs(self.offset) + abs(self.amplitude)


@dataclass
class TrajectorySpec:
    curves: dict = field(default_factory=dict)
    frame_count: int = 300
    frame_rate: float = 30.0

    def pose(self, skel, frame):
        theta = np.zeros(skel.n_joints)
        for name, curve in self.curves.items():
            k = skel.links[skel.index(name)].joint.theta_index
            theta[k] = curve(frame, self.frame_count, self.frame_rate)
        return theta

    def validate(self, skel):
        problems = []
        names = skel.names
        for name, curve in self.curves.items():
            if name not in names:
                problems.append(f"trajectory: unknown joint {name!r}")
                continue
            limits = skel.links[skel.index(name)].joint.limits
            if limits is not None and curve.extent() > max(abs(limits[0]), abs(limits[1])) + 1e-12:
                problems.append(f"trajectory: curve for {name!r} exceeds the joint range {limits}")
        if self.frame_count < 1:
            problems.append("trajectory: frame_count must be positive")
        if problems:
            raise ValidationError(problems)

    def to_dict(self):
        return {
            "frame_count": self.frame_count,
            "frame_rate": self.frame_rate,
            "curves": {name: asdict(c) for name, c in self.curves.items()},
        }

    @classmethod
    def from_dict(cls, doc):
        curves = {name: Curve(**c) for name, c in doc.get("curves", {}).items()}
        return cls(curves=curves, frame_count=int(doc.get("frame_count", 300)), frame_rate=float(doc.get("frame_rate", 30.0)))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


@dataclass
class NoiseSpec:
    sigma: float = 0.0
    dropout: float = 0.0
    quantization: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")
        if self.quantization < 0:
            raise ValueError("quantization must be non-negative")

    @property
    def active(self):
        return self.sigma > 0 or self.dropout > 0 or self.quantization > 0

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class PhiAnimation:
    """Warp field scaled linearly from ``scale_start`` to ``scale_end``."""

    field: np.ndarray
    scale_start: float = 1.0
    scale_end: float = 1.0

    def at(self, frame, frame_count):
        u = frame / (frame_count - 1) if frame_count > 1 else 0.0
        return self.field * (self.scale_start + (self.scale_end - self.scale_start) * u)


def apply_noise(depth, noise, frame_index=0):
    """Gaussian depth noise, optional quantisation and dropout (depth 0)."""
    if not noise.active:
        return depth
    rng = np.random.default_rng(noise.seed ^ frame_index)
    out = np.array(depth, dtype=np.float64)
    valid = out > 0
    if noise.sigma > 0:
        out[valid] += rng.normal(0.0, noise.sigma, size=int(valid.sum()))
    if noise.quantization > 0:
        out[valid] = np.round(out[valid] / noise.quantization) * noise.quantization
    if noise.dropout > 0:
        drop = rng.random(out.shape) < noise.dropout
        out[drop] = 0.0
    out[out <= 0] = 0.0
    return out


def render_depth(bundle, theta, phi, intr):
    """Noiseless float64 depth (``inf`` empty), triangle ids and posed mesh."""
    skel = bundle.skeleton
    posed = skin(bundle.mesh, link_offsets(skel, theta), phi)
    depth, tri = rasterize(posed.v, bundle.mesh.faces, intr)
    return depth, tri, posed


def stored_depth(depth, noise=None, frame_index=0):
    """Depth as it goes into a sequence file: float32, 0 for empty pixels."""
    d = np.where(np.isfinite(depth), depth, 0.0)
    if noise is not None:
        d = apply_noise(d, noise, frame_index)
    return d.astype("<f4")


def render_frame(bundle, theta, phi, intr, noise=None, frame_index=0):
    """Organised cloud of the posed (and warped) model, as a sensor would see it.

    Depth is rounded to float32 exactly as stored on disk, so the returned
    frame equals the one a reader decodes from the written sequence.
    """
    depth, _, _ = render_depth(bundle, theta, phi, intr)
    points, valid = depth_to_points(stored_depth(depth, noise, frame_index).astype(np.float64), intr)
    return CloudFrame(points=points, valid=valid)


def visible_joints(bundle, tri):
    """Labelled-joint visibility from a triangle-id buffer.

    A joint is visible when at least one vertex dominated by its link belongs
    to a triangle that won a pixel.
    """
    owned = np.unique(tri[tri >= 0])
    winners = np.unique(bundle.mesh.faces[owned].ravel())
    links = set(bundle.mesh.dominant_link()[winners].tolist())
    return np.array([j in links for j in bundle.labeled_joints], dtype=bool)


def _frame_job(bundle, trajectory, phi_animation, intr, noise):
    skel = bundle.skeleton

    def job(index):
        theta = trajectory.pose(skel, index)
        phi = phi_animation.at(index, trajectory.frame_count) if phi_animation is not None else None
        depth, tri, _ = render_depth(bundle, theta, phi, intr)
        joints = joint_positions(forward_kinematics(skel, theta), bundle.labeled_joints)
        return stored_depth(depth, noise, index), theta, joints, visible_joints(bundle, tri)

    return job


def generate_sequence(bundle, trajectory, intr, out_dir, noise=None, phi_animation=None, threads=1, batch=16):
    """Render every frame of ``trajectory`` and write the sequence + ground truth.

    Frames are independent, so they are rendered in parallel batches; each
    frame's noise is seeded from ``seed ^ frame_index`` and results are
    written in frame order. Returns ``(sequence_path, ground_truth_path)``.
    """
    trajectory.validate(bundle.skeleton)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    job = _frame_job(bundle, trajectory, phi_animation, intr, noise)
    n = trajectory.frame_count
    thetas, joints, visible = [], [], []
    seq_path = out_dir / "sequence.bin"
    with SequenceWriter(seq_path, intr) as writer:
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            for lo in range(0, n, batch):
                idx = range(lo, min(lo + batch, n))
                results = list(pool.map(job, idx)) if pool else [job(i) for i in idx]
                for depth, theta, jpos, vis in results:
                    writer.write(depth)
                    thetas.append(theta)
                    joints.append(jpos)
                    visible.append(vis)
        finally:
            if pool:
                pool.shutdown()
    skel = bundle.skeleton
    theta_names = [None] * skel.n_joints
    for link in skel.links:
        theta_names[link.joint.theta_index] = link.name
    gt = GroundTruth(
        theta=np.array(thetas),
        joints=np.array(joints),
        visible=np.array(visible),
        theta_names=theta_names,
        joint_names=bundle.joint_names,
    )
    gt_path = save_ground_truth(out_dir / "ground_truth.csv", gt)
    return seq_path, gt_path
