"""Damped least squares pose optimisation over the skinned point-plane residual."""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import dualquat as dq
from .association import DEFAULT_CUTOFF, DEFAULT_WINDOW, associate, point_plane_residual
from .errors import NotPositiveDefinite
from .parallel import CHUNK, chunked_map, tree_sum
from .skeleton import forward_kinematics, link_offset_jacobian, link_offsets
from .skinmesh import MAX_INFLUENCES, skin


@dataclass
class KinSolverConfig:
    iterations: int = 12
    lambda_k: float = 1e-2
    lambda_s: float = 1e-4
    diag_floor: float = 1e-9
    assoc_refresh: int = 1
    clamp_limits: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lambda_k < 0 or self.diag_floor < 0 or self.lambda_s < 0:
            raise ValueError("damping terms must be non-negative")
        if self.assoc_refresh < 1:
            raise ValueError("assoc_refresh must be >= 1")


@dataclass
class NormalSystem:
    jtj: np.ndarray
    jtr: np.ndarray


def influence_counts(skel, mesh):
    """Diagonal of the prior weighting: vertices each joint moves.

    A vertex counts for joint ``k`` when any of its nonzero-weight links has
    ``k`` on its root path.
    """
    mask = skel.ancestor_mask  # (links, joints)
    moved = np.zeros((mesh.n_vertices, skel.n_joints), dtype=bool)
    for a in range(MAX_INFLUENCES):
        active = mesh.weight_values[:, a] > 0
        moved |= mask[mesh.weight_links[:, a]] & active[:, None]
    return moved.sum(axis=0).astype(np.float64)


def _blend_gradients(mesh, posed, normals, phi, idx):
    local = mesh.v0[idx] + phi[idx]
    dv_db = dq.d_transform_point_blend(posed.blend[idx], local)  # (n, 3, 8)
    return -np.einsum("ni,nij->nj", normals[idx], dv_db)


def pose_jacobian(skel, mesh, posed, theta, idx, fk=None, normals=None, phi=None):
    """Rows ``d r_i / d theta`` for the vertices ``idx``, shape ``(len(idx), joints)``.

    ``normals`` defaults to the posed normals; they are treated as constants.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if fk is None:
        fk = forward_kinematics(skel, theta)
    normals = posed.n if normals is None else normals
    phi = mesh.phi if phi is None else phi
    dlink = link_offset_jacobian(skel, theta, fk).reshape(skel.n_links * 8, skel.n_joints)
    n_links = skel.n_links

    def rows_for(lo, hi):
        sub = idx[lo:hi]
        g = _blend_gradients(mesh, posed, normals, phi, sub)
        coeff = np.zeros((len(sub), n_links, 8))
        r = np.arange(len(sub))
        scale = mesh.weight_values[sub] * posed.signs[sub]
        for a in range(MAX_INFLUENCES):
            coeff[r, mesh.weight_links[sub, a]] += scale[:, a, None] * g
        return np.einsum("nc,ck->nk", coeff.reshape(len(sub), n_links * 8), dlink)

    parts = chunked_map(rows_for, len(idx))
    if not parts:
        return np.zeros((0, skel.n_joints))
    return np.concatenate(parts, axis=0)


def vertex_jacobian(i, skel, mesh, posed, theta, count=None, fk=None, phi=None):
    """Single row ``d r_i / d theta``; zero when the vertex has no observations."""
    if count is not None and count[i] == 0:
        return np.zeros(skel.n_joints)
    return pose_jacobian(skel, mesh, posed, theta, [i], fk=fk, phi=phi)[0]


def accumulate(rows, residuals, config, theta, influence):
    """Prior-augmented normal equations, summed with a fixed reduction tree."""
    rows = np.asarray(rows, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    n = rows.shape[1] if rows.ndim == 2 else len(theta)

    def partial(lo, hi):
        block = rows[lo:hi]
        return np.concatenate(
            [np.einsum("ij,ik->jk", block, block).ravel(), np.einsum("ij,i->j", block, residuals[lo:hi])]
        )

    parts = chunked_map(partial, len(rows), CHUNK)
    total = tree_sum(parts) if parts else np.zeros(n * n + n)
    jtj = total[: n * n].reshape(n, n)
    jtr = total[n * n :]
    prior = (config.lambda_s * np.asarray(influence, dtype=np.float64)) ** 2
    jtj = jtj + np.diag(prior)
    jtr = jtr + prior * np.asarray(theta, dtype=np.float64)
    return NormalSystem(jtj=jtj, jtr=jtr)


def solve_step(system, config):
    """Solve ``(JtJ + lambda_k diag(JtJ) + floor I) x = Jtr`` by Cholesky.

    The caller subtracts ``x`` from the pose.
    """
    a = system.jtj + np.diag(config.lambda_k * np.diag(system.jtj) + config.diag_floor)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(system.jtr))):
        raise NotPositiveDefinite("normal system is not finite")
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return cho_solve(factor, system.jtr, check_finite=False)


@dataclass
class PoseIteration:
    iteration: int
    residual_sum: float
    step_norm: float
    n_associated: int
    skipped: bool = False


def optimize_pose(state, frame, intr, config, window_radius=DEFAULT_WINDOW, cutoff=DEFAULT_CUTOFF):
    """Run ``config.iterations`` damped steps on ``state.theta`` against ``frame``.

    Each iteration skins the mesh, refreshes normals (and, every
    ``assoc_refresh`` iterations, the association), builds the Jacobian and
    takes one step. Degenerate systems skip the step. Returns the new pose and
    per-iteration diagnostics.
    """
    skel, mesh = state.skeleton, state.mesh
    theta = np.array(state.theta, dtype=np.float64)
    phi = state.phi
    influence = state.influence
    log = []
    assoc = None
    for it in range(config.iterations):
        fk = forward_kinematics(skel, theta)
        posed = skin(mesh, link_offsets(skel, theta, fk), phi)
        if assoc is None or it % config.assoc_refresh == 0:
            assoc = associate(frame, intr, posed, window_radius, cutoff)
            count = assoc.count
            residual = assoc.residual
        else:
            residual = point_plane_residual(assoc.p_tilde, posed.v, posed.n, count)
        sel = np.flatnonzero((count > 0) & posed.valid)
        r = residual[sel]
        rows = pose_jacobian(skel, mesh, posed, theta, sel, fk=fk, phi=phi)
        system = accumulate(rows, r, config, theta, influence)
        try:
            step = solve_step(system, config)
        except NotPositiveDefinite:
            log.append(PoseIteration(it, float(r @ r), 0.0, len(sel), skipped=True))
            continue
        theta = theta - step
        if config.clamp_limits:
            theta = skel.clamp(theta)
        log.append(PoseIteration(it, float(r @ r), float(np.linalg.norm(step)), len(sel)))
    return theta, log
