"""Frame-by-frame tracking: pose optimisation followed by shape refinement."""

from dataclasses import dataclass, field

import numpy as np

from .association import DEFAULT_CUTOFF, DEFAULT_WINDOW
from .kinopt import KinSolverConfig, influence_counts, optimize_pose
from .shapeopt import ShapeSolverConfig, optimize_shape

MODES = ("dynamic", "shape-match", "smooth-bind", "rigid")


@dataclass
class TrackerState:
    skeleton: object
    mesh: object
    theta: np.ndarray
    phi: np.ndarray
    influence: np.ndarray = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.influence is None:
            self.influence = influence_counts(self.skeleton, self.mesh)


@dataclass
class TrackConfig:
    mode: str = "dynamic"
    kin: KinSolverConfig = field(default_factory=KinSolverConfig)
    shape: ShapeSolverConfig = field(default_factory=ShapeSolverConfig)
    window_radius: int = DEFAULT_WINDOW
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def estimates_shape(self):
        return self.mode in ("dynamic", "shape-match")


@dataclass
class FrameResult:
    index: int
    theta: np.ndarray
    phi: np.ndarray
    pose_log: list
    shape_report: object = None


def initial_state(bundle, theta0, mode="dynamic"):
    mesh = bundle.mesh.rigid() if mode == "rigid" else bundle.mesh
    return TrackerState(skeleton=bundle.skeleton, mesh=mesh, theta=theta0, phi=np.zeros_like(mesh.v0))


def track_frame(state, frame, intr, config, index):
    """Advance ``state`` in place by one frame and return its result."""
    state.theta, log = optimize_pose(state, frame, intr, config.kin, config.window_radius, config.cutoff)
    report = None
    if config.mode == "dynamic" or (config.mode == "shape-match" and index == 0):
        state.phi, report = optimize_shape(state, frame, intr, config.shape, config.window_radius, config.cutoff)
    return FrameResult(index=index, theta=state.theta.copy(), phi=state.phi, pose_log=log, shape_report=report)


def track_sequence(bundle, frames, intr, theta0, config):
    """Generator over :class:`FrameResult` for every frame in ``frames``."""
    state = initial_state(bundle, theta0, config.mode)
    for index, frame in enumerate(frames):
        yield track_frame(state, frame, intr, config, index)
