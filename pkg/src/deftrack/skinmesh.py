"""Skinned template meshes: dual quaternion skinning, warps, normals, neighbours."""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import dualquat as dq
from .errors import DegenerateBlend

MAX_INFLUENCES = 4
WEIGHT_TOL = 1e-6


@dataclass
class SkinnedMesh:
    """Template mesh bound to a skeleton.

    ``weight_links``/``weight_values`` are ``(V, 4)`` arrays holding the sparse
    skin weights, sorted by decreasing weight and padded with zero weights.
    ``polys`` optionally keeps the quad-dominant control faces (``-1`` padded)
    that ``faces`` was triangulated from, so the mesh can be subdivided again.
    """

    v0: np.ndarray
    faces: np.ndarray
    weight_links: np.ndarray
    weight_values: np.ndarray
    neighbors: np.ndarray
    phi: Optional[np.ndarray] = None
    polys: Optional[np.ndarray] = None

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.weight_links = np.asarray(self.weight_links, dtype=np.int64)
        self.weight_values = np.asarray(self.weight_values, dtype=np.float64)
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)
        if self.phi is None:
            self.phi = np.zeros_like(self.v0)
        if self.polys is not None:
            self.polys = np.asarray(self.polys, dtype=np.int64)

    @property
    def n_vertices(self):
        return len(self.v0)

    def dominant_link(self):
        return self.weight_links[:, 0]

    def rigid(self):
        """Copy with every vertex bound only to its highest-weight link."""
        links = np.repeat(self.weight_links[:, :1], MAX_INFLUENCES, axis=1)
        values = np.zeros_like(self.weight_values)
        values[:, 0] = 1.0
        return replace(self, weight_links=links, weight_values=values, phi=np.zeros_like(self.v0))


@dataclass
class PosedMesh:
    v: np.ndarray
    n: np.ndarray
    valid: np.ndarray
    blend: Optional[np.ndarray] = None
    signs: Optional[np.ndarray] = None
    rotation: Optional[np.ndarray] = None


def pack_weights(rows, n_vertices=None):
    """Dense ``(V, 4)`` link/weight arrays from per-vertex ``{link: weight}`` rows.

    Entries are sorted by decreasing weight (ties by link index), truncated to
    four and renormalised.
    """
    n = len(rows) if n_vertices is None else n_vertices
    links = np.zeros((n, MAX_INFLUENCES), dtype=np.int64)
    values = np.zeros((n, MAX_INFLUENCES))
    for i, row in enumerate(rows):
        items = sorted(((float(w), int(j)) for j, w in dict(row).items() if w > 0), key=lambda t: (-t[0], t[1]))
        items = items[:MAX_INFLUENCES]
        total = sum(w for w, _ in items)
        for a, (w, j) in enumerate(items):
            links[i, a] = j
            values[i, a] = w / total
        links[i, len(items):] = items[0][1] if items else 0
    return links, values


def normalize_weight_matrix(dense):
    """Top-4 truncation and renormalisation of a dense ``(V, L)`` weight matrix."""
    dense = np.clip(np.asarray(dense, dtype=np.float64), 0.0, None)
    n, n_links = dense.shape
    # stable sort on -w keeps lower link index first among ties
    order = np.argsort(-dense, axis=1, kind="stable")[:, :MAX_INFLUENCES]
    values = np.take_along_axis(dense, order, axis=1)
    if n_links < MAX_INFLUENCES:
        pad = MAX_INFLUENCES - n_links
        order = np.concatenate([order, np.repeat(order[:, :1], pad, axis=1)], axis=1)
        values = np.concatenate([values, np.zeros((n, pad))], axis=1)
    values = values / values.sum(axis=1, keepdims=True)
    order = np.where(values > 0, order, order[:, :1])
    return order.astype(np.int64), values


def dense_weights(mesh, n_links):
    out = np.zeros((mesh.n_vertices, n_links))
    rows = np.arange(mesh.n_vertices)
    for a in range(MAX_INFLUENCES):
        np.add.at(out, (rows, mesh.weight_links[:, a]), mesh.weight_values[:, a])
    return out


def mesh_problems(mesh, n_links=None):
    """Every invariant breach of ``mesh`` as a list of strings naming the entity."""
    problems = []
    nv = mesh.n_vertices
    if mesh.v0.ndim != 2 or mesh.v0.shape[1] != 3:
        problems.append(f"mesh: vertices must have shape (V, 3), got {mesh.v0.shape}")
        return problems
    if not np.all(np.isfinite(mesh.v0)):
        problems.append("mesh: non-finite vertex positions")
    f = mesh.faces
    bad = np.flatnonzero(np.any((f < 0) | (f >= nv), axis=1))
    for k in bad[:20]:
        problems.append(f"faces[{k}]: vertex index out of range")
    degenerate = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
    for k in degenerate[:20]:
        problems.append(f"faces[{k}]: degenerate face (repeated vertex)")
    wl, wv = mesh.weight_links, mesh.weight_values
    if wl.shape != (nv, MAX_INFLUENCES) or wv.shape != (nv, MAX_INFLUENCES):
        problems.append(f"weights: expected shape ({nv}, {MAX_INFLUENCES})")
    else:
        sums = wv.sum(axis=1)
        for i in np.flatnonzero(np.abs(sums - 1.0) > WEIGHT_TOL)[:20]:
            problems.append(f"weights[{i}]: weights sum to {sums[i]:.6g}, expected 1")
        for i in np.flatnonzero(np.any((wv < 0) | (wv > 1), axis=1))[:20]:
            problems.append(f"weights[{i}]: weight outside [0, 1]")
        if n_links is not None:
            for i in np.flatnonzero(np.any((wl < 0) | (wl >= n_links), axis=1))[:20]:
                problems.append(f"weights[{i}]: link index out of range")
    nb = mesh.neighbors
    if nb.ndim != 2 or len(nb) != nv:
        problems.append("neighbors: expected one row per vertex")
    else:
        for i in np.flatnonzero(np.any(nb == np.arange(nv)[:, None], axis=1))[:20]:
            problems.append(f"neighbors[{i}]: vertex listed as its own neighbour")
        for i in np.flatnonzero(np.any((nb < 0) | (nb >= nv), axis=1))[:20]:
            problems.append(f"neighbors[{i}]: neighbour index out of range")
    if mesh.phi.shape != mesh.v0.shape:
        problems.append("phi: warp offsets must match vertex array shape")
    return problems


def blend_all(offsets, weight_links, weight_values):
    """Weighted dual quaternion blend of link offsets for every vertex.

    Returns ``(blend, signs)``: the unnormalised blend ``(V, 8)`` and the
    per-slot antipodality signs ``(V, 4)``. Each slot's offset is flipped when
    its real part points away from the first (highest-weight) slot's.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    gathered = offsets[weight_links]  # (V, 4, 8)
    pivot = gathered[:, 0, :4]
    dots = np.einsum("va,vka->vk", pivot, gathered[:, :, :4])
    signs = np.where(dots < 0, -1.0, 1.0)
    blend = np.einsum("vk,vkc->vc", weight_values * signs, gathered)
    return blend, signs


def blend(offsets, links, weights):
    """Blend for a single vertex; returns ``(normalized, unnormalized)``.

    Raises :class:`DegenerateBlend` if the blend cannot be normalised.
    """
    links = np.asarray(links, dtype=np.int64)[None]
    weights = np.asarray(weights, dtype=np.float64)[None]
    raw, _ = blend_all(offsets, links, weights)
    return dq.normalize(raw[0]), raw[0]


def compute_normals(v, faces):
    """Area-weighted vertex normals; returns ``(normals, supported)``."""
    v = np.asarray(v, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    fn = np.cross(b - a, c - a)
    n = len(v)
    idx = faces.ravel()
    acc = np.empty((n, 3))
    for d in range(3):
        # bincount sums in input order, so accumulation is reproducible
        acc[:, d] = np.bincount(idx, weights=np.repeat(fn[:, d], 3), minlength=n)
    length = np.linalg.norm(acc, axis=1)
    supported = length > 0
    out = np.zeros_like(acc)
    out[supported] = acc[supported] / length[supported, None]
    return out, supported


def skin(mesh, offsets, phi=None):
    """Posed vertices ``H_sigma (v0 + phi)`` and their normals.

    Vertices whose blend is degenerate are flagged invalid instead of raising.
    """
    if phi is None:
        phi = mesh.phi
    raw, signs = blend_all(offsets, mesh.weight_links, mesh.weight_values)
    norm2 = np.sum(raw[:, :4] ** 2, axis=1)
    ok = norm2 > 1e-24
    safe = np.where(ok[:, None], raw, dq.IDENTITY)
    local = mesh.v0 + phi
    q = safe[:, :4]
    rot = dq.rotation_matrix(q) / norm2.clip(1e-24)[:, None, None]
    v = np.einsum("vij,vj->vi", rot, local) + 2.0 * dq.qmul(safe[:, 4:], dq.qconj(q))[:, 1:] / norm2.clip(1e-24)[:, None]
    normals, supported = compute_normals(v, mesh.faces)
    return PosedMesh(v=v, n=normals, valid=ok & supported, blend=raw, signs=signs, rotation=rot)


def skin_vertex(offsets, links, weights, point):
    """Skin a single point; raises :class:`DegenerateBlend` on a bad blend."""
    h, _ = blend(offsets, links, weights)
    return dq.transform_point(h, point)


def build_neighbors(v0, k=4):
    """Indices of the ``k`` nearest other vertices; ties go to the lower index."""
    v0 = np.asarray(v0, dtype=np.float64)
    n = len(v0)
    if k < 1:
        raise ValueError("k must be at least 1")
    if n <= k:
        raise ValueError(f"need more than {k} vertices to pick {k} neighbours")
    tree = cKDTree(v0)
    dist, _ = tree.query(v0, k=k + 1)
    radius = dist[:, -1]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand = np.asarray(tree.query_ball_point(v0[i], radius[i] * (1 + 1e-9) + 1e-15), dtype=np.int64)
        cand = cand[cand != i]
        d2 = np.sum((v0[cand] - v0[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        out[i] = cand[order[:k]]
    return out


def bind_pose_error(mesh, n_links):
    """Max displacement when skinning with identity offsets (should be zero)."""
    posed = skin(mesh, np.tile(dq.IDENTITY, (n_links, 1)), np.zeros_like(mesh.v0))
    return float(np.max(np.abs(posed.v - mesh.v0))) if mesh.n_vertices else 0.0


__all__ = [
    "SkinnedMesh",
    "PosedMesh",
    "DegenerateBlend",
    "blend",
    "blend_all",
    "skin",
    "compute_normals",
    "build_neighbors",
    "pack_weights",
    "normalize_weight_matrix",
    "mesh_problems",
]
