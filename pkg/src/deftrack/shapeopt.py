"""Per-vertex warp refinement with independent, damped 3x3 solves."""

from dataclasses import dataclass

import numpy as np

from .association import DEFAULT_CUTOFF, DEFAULT_WINDOW, associate, point_plane_residual
from .skeleton import forward_kinematics, link_offsets
from .skinmesh import skin


@dataclass
class ShapeSolverConfig:
    iterations: int = 2
    lambda_phi: float = 0.01
    lambda_nbr: float = 0.1
    lambda_w: float = 1e-2
    diag_floor: float = 1e-9
    backtrack: int = 8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.backtrack < 0:
            raise ValueError("backtrack must be >= 0")
        for name in ("lambda_phi", "lambda_nbr", "lambda_w", "diag_floor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def smoothness(phi, neighbors):
    """Per-vertex ``sum_n |phi_i - phi_n|^2``."""
    diff = phi[:, None, :] - phi[neighbors]
    return np.sum(diff * diff, axis=(1, 2))


def shape_residuals(residual, count, phi, neighbors, config):
    """Regularised residual ``r + l_phi |phi|^2 + l_nbr sum |phi - phi_n|^2``.

    Unobserved vertices use ``r = 0``; neighbour values come from the same
    (previous) iterate for every vertex.
    """
    r = np.where(count > 0, residual, 0.0)
    return r + config.lambda_phi * np.sum(phi * phi, axis=1) + config.lambda_nbr * smoothness(phi, neighbors)


def shape_residual(i, residual, count, phi, neighbors, config):
    r = residual[i] if count[i] > 0 else 0.0
    diff = phi[i] - phi[neighbors[i]]
    return float(r + config.lambda_phi * phi[i] @ phi[i] + config.lambda_nbr * np.sum(diff * diff))


def residual_gradient(normals, rotation, count):
    """``d r_i / d phi_i = -n_i^T R_i`` (zero for unobserved vertices)."""
    g = -np.einsum("vi,vij->vj", normals, rotation)
    return np.where((count > 0)[:, None], g, 0.0)


def shape_jacobian(normals, rotation, count, phi, neighbors, config):
    """Per-vertex 3-vector ``J_i`` with neighbours held fixed."""
    diff = np.sum(phi[:, None, :] - phi[neighbors], axis=1)
    return residual_gradient(normals, rotation, count) + 2.0 * config.lambda_phi * phi + 2.0 * config.lambda_nbr * diff


def _systems(jac, rhat, config):
    jtj = jac[:, :, None] * jac[:, None, :]
    diag = np.einsum("vii->vi", jtj)
    a = jtj + (config.lambda_w * diag + config.diag_floor)[:, :, None] * np.eye(3)
    b = jac * rhat[:, None]
    return a, b


def solve_vertex(jac, rhat, config):
    """Solve one damped 3x3 system; returns ``(x, singular)``."""
    a, b = _systems(np.asarray(jac, dtype=np.float64)[None], np.atleast_1d(float(rhat)), config)
    try:
        x = np.linalg.solve(a[0], b[0])
    except np.linalg.LinAlgError:
        return np.zeros(3), True
    if not np.all(np.isfinite(x)):
        return np.zeros(3), True
    return x, False


def solve_all(jac, rhat, config):
    """Batched version of :func:`solve_vertex`; singular systems give zero steps."""
    a, b = _systems(jac, rhat, config)
    singular = np.abs(np.linalg.det(a)) <= 1e-300
    x = np.zeros_like(b)
    ok = ~singular
    if np.any(ok):
        x[ok] = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    bad = ~np.all(np.isfinite(x), axis=1)
    x[bad] = 0.0
    return x, singular | bad


def local_objective(residual, grad, step, phi, neighbors, config):
    """Per-vertex ``r^2 + l_phi |phi|^2 + l_nbr sum |phi - phi_n|^2`` after ``phi -= step``.

    Neighbours stay frozen and ``r`` is linearised along ``grad``.
    """
    p, r, nbr = _trial(residual, grad, step, phi, neighbors)
    return r * r + config.lambda_phi * np.sum(p * p, axis=1) + config.lambda_nbr * nbr


def regularised_objective(residual, grad, step, phi, neighbors, config):
    """Per-vertex ``rhat^2`` after ``phi -= step``; the quantity each solve reduces."""
    p, r, nbr = _trial(residual, grad, step, phi, neighbors)
    rhat = r + config.lambda_phi * np.sum(p * p, axis=1) + config.lambda_nbr * nbr
    return rhat * rhat


def _trial(residual, grad, step, phi, neighbors):
    p = phi - step
    r = residual - np.einsum("vi,vi->v", grad, step)
    diff = p[:, None, :] - phi[neighbors]
    return p, r, np.sum(diff * diff, axis=(1, 2))


def accept_steps(step, residual, grad, phi, neighbors, config):
    """Halve each vertex's step until its local objective does not increase.

    Steps still increasing it after ``config.backtrack`` halvings become zero.
    Returns ``(accepted_step, rejected_mask)``.
    """
    base = local_objective(residual, grad, np.zeros_like(step), phi, neighbors, config)
    out = np.zeros_like(step)
    pending = np.ones(len(step), dtype=bool)
    scale = 1.0
    for _ in range(config.backtrack + 1):
        trial = step * scale
        ok = pending & (local_objective(residual, grad, trial, phi, neighbors, config) <= base)
        out[ok] = trial[ok]
        pending &= ~ok
        if not np.any(pending):
            break
        scale *= 0.5
    return out, pending & np.any(step != 0, axis=1)


@dataclass
class ShapeReport:
    mean_phi: float
    max_phi: float
    mean_abs_r_before: float
    mean_abs_r_after: float
    singular: int
    rejected: int = 0


def optimize_shape(state, frame, intr, config, window_radius=DEFAULT_WINDOW, cutoff=DEFAULT_CUTOFF):
    """Jacobi refinement of the warp offsets for the current pose.

    All vertices are solved against the previous iterate and updated
    together, so the result does not depend on vertex order.
    """
    skel, mesh = state.skeleton, state.mesh
    phi = np.array(state.phi, dtype=np.float64)
    offsets = link_offsets(skel, state.theta, forward_kinematics(skel, state.theta))
    singular = rejected = 0
    before = None
    for _ in range(config.iterations):
        posed = skin(mesh, offsets, phi)
        assoc = associate(frame, intr, posed, window_radius, cutoff)
        count = np.where(posed.valid, assoc.count, 0)
        if before is None:
            before = _mean_abs(assoc.residual, count)
        r = np.where(count > 0, assoc.residual, 0.0)
        grad = residual_gradient(posed.n, posed.rotation, count)
        rhat = shape_residuals(assoc.residual, count, phi, mesh.neighbors, config)
        jac = shape_jacobian(posed.n, posed.rotation, count, phi, mesh.neighbors, config)
        step, bad = solve_all(jac, rhat, config)
        step, refused = accept_steps(step, r, grad, phi, mesh.neighbors, config)
        singular += int(bad.sum())
        rejected += int(refused.sum())
        phi = phi - step
    posed = skin(mesh, offsets, phi)
    after = _mean_abs(point_plane_residual(assoc.p_tilde, posed.v, posed.n, count), count)
    norms = np.linalg.norm(phi, axis=1)
    report = ShapeReport(
        mean_phi=float(norms.mean()) if len(norms) else 0.0,
        max_phi=float(norms.max()) if len(norms) else 0.0,
        mean_abs_r_before=before,
        mean_abs_r_after=after,
        singular=singular,
        rejected=rejected,
    )
    return phi, report


def _mean_abs(residual, count):
    hit = count > 0
    return float(np.mean(np.abs(residual[hit]))) if np.any(hit) else 0.0
