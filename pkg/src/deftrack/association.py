"""Projective data association between an organised point cloud and a mesh."""

from dataclasses import dataclass

import numba
import numpy as np

# Prefer OpenMP over a possibly outdated TBB unless the user chose a layer.
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

DEFAULT_WINDOW = 5
DEFAULT_CUTOFF = 0.10


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")


@dataclass
class CloudFrame:
    """``points`` is ``(H, W, 3)`` in the camera frame; ``valid`` is ``(H, W)``."""

    points: np.ndarray
    valid: np.ndarray

    @property
    def valid_points(self):
        return self.points[self.valid]


@dataclass
class AssociationResult:
    p_tilde: np.ndarray
    count: np.ndarray
    residual: np.ndarray
    winner: np.ndarray  # (H, W) vertex index per observation, -1 if none

    @property
    def associated(self):
        return self.count > 0


def pixel_of(intr, points):
    """Pixel bucket ``(u, v)`` and an in-frame mask for an ``(N, 3)`` array."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = np.floor(intr.fx * points[:, 0] / zs + intr.cx + 0.5)
    v = np.floor(intr.fy * points[:, 1] / zs + intr.cy + 0.5)
    ok = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    u = np.where(ok, u, -1).astype(np.int64)
    v = np.where(ok, v, -1).astype(np.int64)
    return u, v, ok


def project(intr, p):
    """Pixel ``(u, v)`` of a single point, or ``None`` when it is out of frame."""
    u, v, ok = pixel_of(intr, np.asarray(p, dtype=np.float64)[None])
    return (int(u[0]), int(v[0])) if ok[0] else None


@dataclass
class Buckets:
    """CSR layout: vertices of pixel ``b`` are ``verts[start[b]:start[b + 1]]``."""

    start: np.ndarray
    verts: np.ndarray
    width: int
    height: int

    def at(self, u, v):
        b = v * self.width + u
        return self.verts[self.start[b] : self.start[b + 1]]


def bucket_occupancy(posed, intr):
    """Bucket visible vertices by projected pixel.

    Visible means valid, in frame and not back-facing (``n . v <= 0``). Bucket
    contents are sorted by vertex index.
    """
    u, v, ok = pixel_of(intr, posed.v)
    facing = np.einsum("ij,ij->i", posed.n, posed.v) <= 0
    vis = np.flatnonzero(ok & facing & posed.valid)
    pix = v[vis] * intr.width + u[vis]
    order = np.lexsort((vis, pix))
    verts = vis[order]
    counts = np.bincount(pix, minlength=intr.width * intr.height)
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return Buckets(start=start, verts=verts.astype(np.int64), width=intr.width, height=intr.height)


@numba.njit(parallel=True, cache=True, nogil=True)
def _window_search(points, valid, start, verts, vpos, width, height, radius, cutoff2):
    n_pix = width * height
    winner = np.full(n_pix, -1, dtype=np.int64)
    for pix in numba.prange(n_pix):
        if not valid[pix]:
            continue
        py = pix // width
        px = pix - py * width
        ox = points[pix, 0]
        oy = points[pix, 1]
        oz = points[pix, 2]
        best = cutoff2
        bi = -1
        for y in range(max(0, py - radius), min(height, py + radius + 1)):
            for x in range(max(0, px - radius), min(width, px + radius + 1)):
                b = y * width + x
                for s in range(start[b], start[b + 1]):
                    vi = verts[s]
                    dx = vpos[vi, 0] - ox
                    dy = vpos[vi, 1] - oy
                    dz = vpos[vi, 2] - oz
                    d2 = dx * dx + dy * dy + dz * dz
                    if bi == -1:
                        if d2 <= best:
                            best = d2
                            bi = vi
                    elif d2 < best or (d2 == best and vi < bi):
                        best = d2
                        bi = vi
        winner[pix] = bi
    return winner


def nearest_in_window(frame, intr, posed, window_radius=DEFAULT_WINDOW, cutoff=DEFAULT_CUTOFF, buckets=None):
    """Winning vertex per observation pixel, ``(H, W)`` with ``-1`` for none."""
    if buckets is None:
        buckets = bucket_occupancy(posed, intr)
    pts = np.ascontiguousarray(frame.points.reshape(-1, 3), dtype=np.float64)
    valid = np.ascontiguousarray(frame.valid.reshape(-1))
    winner = _window_search(
        pts,
        valid,
        buckets.start,
        buckets.verts,
        np.ascontiguousarray(posed.v, dtype=np.float64),
        intr.width,
        intr.height,
        int(window_radius),
        float(cutoff) ** 2,
    )
    return winner.reshape(intr.height, intr.width)


def average_observations(points, winner, n_vertices):
    """Per-vertex mean of the points each vertex won, plus hit counts.

    Sums run in observation (row-major pixel) order, so the result does not
    depend on how the search was scheduled.
    """
    flat = winner.reshape(-1)
    sel = np.flatnonzero(flat >= 0)
    idx = flat[sel]
    pts = points.reshape(-1, 3)[sel]
    count = np.bincount(idx, minlength=n_vertices)
    p_tilde = np.zeros((n_vertices, 3))
    hit = count > 0
    for d in range(3):
        s = np.bincount(idx, weights=pts[:, d], minlength=n_vertices)
        p_tilde[hit, d] = s[hit] / count[hit]
    return p_tilde, count


def point_plane_residual(p_tilde, v, n, count):
    """``n . (p_tilde - v)`` where observed, zero elsewhere."""
    r = np.einsum("ij,ij->i", n, p_tilde - v)
    return np.where(count > 0, r, 0.0)


def associate(frame, intr, posed, window_radius=DEFAULT_WINDOW, cutoff=DEFAULT_CUTOFF):
    """Assign each observation to its nearest visible vertex and average.

    Only vertices projecting within ``window_radius`` pixels of the
    observation's pixel are searched; matches farther than ``cutoff`` meters
    are ignored. Ties go to the lower vertex index.
    """
    winner = nearest_in_window(frame, intr, posed, window_radius, cutoff)
    p_tilde, count = average_observations(frame.points, winner, len(posed.v))
    residual = point_plane_residual(p_tilde, posed.v, posed.n, count)
    return AssociationResult(p_tilde=p_tilde, count=count, residual=residual, winner=winner)


def set_threads(n):
    """Thread count for the parallel search; results do not depend on it."""
    if n is not None and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
