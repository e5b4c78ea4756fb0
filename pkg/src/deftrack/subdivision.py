"""Catmull-Clark subdivision of quad-dominant meshes, with skin weight transfer.

One refinement step is expressed as a sparse matrix ``S`` of shape
``(V + E + F, V)`` so that any per-vertex attribute (positions, dense skin
weights, warp offsets) is refined by the same affine combinations:
``new = S @ old``. New vertices are ordered original vertices first, then
edge points, then face points.
"""

import numpy as np
import scipy.sparse as sp

from .errors import NonManifold
from .skinmesh import SkinnedMesh, build_neighbors, dense_weights, normalize_weight_matrix


def as_polys(faces):
    """Pad a list of polygons (or an int array) into a ``-1`` padded array."""
    if isinstance(faces, np.ndarray):
        return faces.astype(np.int64)
    width = max(len(f) for f in faces)
    out = -np.ones((len(faces), width), dtype=np.int64)
    for i, f in enumerate(faces):
        out[i, : len(f)] = f
    return out


def _corners(polys):
    sizes = np.sum(polys >= 0, axis=1)
    if np.any(sizes < 3):
        raise ValueError("every polygon needs at least three vertices")
    face_idx, slot = np.nonzero(polys >= 0)
    k = sizes[face_idx]
    cur = polys[face_idx, slot]
    nxt = polys[face_idx, (slot + 1) % k]
    return face_idx, slot, sizes, cur, nxt


def edge_table(polys, n_vertices):
    """Unique undirected edges and, per face corner, the id of its outgoing edge."""
    face_idx, slot, sizes, cur, nxt = _corners(polys)
    lo, hi = np.minimum(cur, nxt), np.maximum(cur, nxt)
    keys = lo * n_vertices + hi
    uniq, corner_edge = np.unique(keys, return_inverse=True)
    edges = np.stack([uniq // n_vertices, uniq % n_vertices], axis=1)
    return edges, corner_edge, (face_idx, slot, sizes, cur, nxt)


def subdivision_matrix(polys, n_vertices):
    """Refinement matrix and the refined quad faces for one Catmull-Clark step.

    Raises :class:`NonManifold` if an edge borders more than two faces.
    """
    polys = as_polys(polys)
    nv, nf = n_vertices, len(polys)
    edges, corner_edge, (face_idx, slot, sizes, cur, nxt) = edge_table(polys, nv)
    ne = len(edges)
    edge_faces = np.bincount(corner_edge, minlength=ne)
    if np.any(edge_faces > 2):
        bad = edges[np.argmax(edge_faces > 2)]
        raise NonManifold(f"edge ({bad[0]}, {bad[1]}) is shared by more than two faces")

    # face points: mean of the face's corners
    fmat = sp.csr_matrix((1.0 / sizes[face_idx], (face_idx, cur)), shape=(nf, nv))

    # the (up to two) faces on each edge
    order = np.argsort(corner_edge, kind="stable")
    first = np.searchsorted(corner_edge[order], np.arange(ne))
    f_a = face_idx[order[first]]
    f_b = np.where(edge_faces == 2, face_idx[order[np.minimum(first + 1, len(order) - 1)]], -1)

    interior = edge_faces == 2
    rows, cols, vals = [], [], []
    e_ids = np.arange(ne)
    # interior edge point: (a + b + fp_a + fp_b) / 4
    for end in (0, 1):
        rows.append(e_ids)
        cols.append(edges[:, end])
        vals.append(np.where(interior, 0.25, 0.5))
    edge_vert = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ne, nv)
    )
    ei = e_ids[interior]
    edge_face = sp.csr_matrix(
        (np.full(2 * len(ei), 0.25), (np.concatenate([ei, ei]), np.concatenate([f_a[interior], f_b[interior]]))),
        shape=(ne, nf),
    )
    emat = edge_vert + edge_face @ fmat

    # vertex points
    valence = np.bincount(edges.ravel(), minlength=nv).astype(np.float64)
    face_count = np.bincount(cur, minlength=nv).astype(np.float64)
    boundary_edges = edges[~interior]
    boundary_deg = np.bincount(boundary_edges.ravel(), minlength=nv)
    is_boundary = boundary_deg > 0
    smooth = ~is_boundary & (valence > 0)

    n = np.where(valence > 0, valence, 1.0)
    m = np.where(face_count > 0, face_count, 1.0)
    # (F + 2R + (n - 3) P) / n, with F the mean face point and R the mean edge midpoint
    sel = smooth[cur]
    vf = sp.csr_matrix(
        (1.0 / (n[cur[sel]] * m[cur[sel]]), (cur[sel], face_idx[sel])), shape=(nv, nf)
    )
    r, c, w = [], [], []
    for end, other in ((0, 1), (1, 0)):
        a, b = edges[:, end], edges[:, other]
        s = smooth[a]
        r += [a[s], a[s]]
        c += [b[s], a[s]]
        w += [1.0 / n[a[s]] ** 2, 1.0 / n[a[s]] ** 2]
    sm = np.flatnonzero(smooth)
    r.append(sm)
    c.append(sm)
    w.append((n[sm] - 3.0) / n[sm])
    # boundary rule: 3/4 P + 1/8 (b1 + b2); irregular boundary vertices stay put
    regular_b = is_boundary & (boundary_deg == 2)
    for end, other in ((0, 1), (1, 0)):
        a, b = boundary_edges[:, end], boundary_edges[:, other]
        s = regular_b[a]
        r.append(a[s])
        c.append(b[s])
        w.append(np.full(int(s.sum()), 0.125))
    rb = np.flatnonzero(regular_b)
    r.append(rb)
    c.append(rb)
    w.append(np.full(len(rb), 0.75))
    fixed = np.flatnonzero((is_boundary & ~regular_b) | (valence == 0))
    r.append(fixed)
    c.append(fixed)
    w.append(np.ones(len(fixed)))
    vmat = vf @ fmat + sp.csr_matrix(
        (np.concatenate(w), (np.concatenate(r), np.concatenate(c))), shape=(nv, nv)
    )

    smat = sp.vstack([vmat, emat, fmat]).tocsr()

    # refined quads: (corner, edge to next, face point, edge from previous)
    prev_edge = np.empty_like(corner_edge)
    k = sizes[face_idx]
    start = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    prev_pos = start[face_idx] + (slot - 1) % k
    prev_edge[:] = corner_edge[prev_pos]
    quads = np.stack([cur, nv + corner_edge, nv + ne + face_idx, nv + prev_edge], axis=1)
    return smat, quads


def catmull_clark(vertices, polys, iterations=1, attributes=()):
    """Refine positions (and any extra per-vertex attribute arrays)."""
    v = np.asarray(vertices, dtype=np.float64)
    attrs = [np.asarray(a, dtype=np.float64) for a in attributes]
    polys = as_polys(polys)
    for _ in range(iterations):
        smat, polys = subdivision_matrix(polys, len(v))
        v = smat @ v
        attrs = [smat @ a for a in attrs]
    return v, polys, attrs


def triangulate(vertices, polys):
    """Split quads along their shorter diagonal; triangles pass through."""
    polys = as_polys(polys)
    sizes = np.sum(polys >= 0, axis=1)
    if np.any(sizes > 4):
        raise ValueError("only triangles and quads can be triangulated")
    v = np.asarray(vertices)
    tris = polys[sizes == 3, :3]
    q = polys[sizes == 4]
    ac = np.sum((v[q[:, 0]] - v[q[:, 2]]) ** 2, axis=1)
    bd = np.sum((v[q[:, 1]] - v[q[:, 3]]) ** 2, axis=1)
    use_ac = ac <= bd
    t1 = np.where(use_ac[:, None], q[:, [0, 1, 2]], q[:, [0, 1, 3]])
    t2 = np.where(use_ac[:, None], q[:, [0, 2, 3]], q[:, [1, 2, 3]])
    # keep triangles in face order: each quad's pair stays adjacent
    quad_tris = np.stack([t1, t2], axis=1).reshape(-1, 3)
    out = np.empty((len(tris) + len(quad_tris), 3), dtype=np.int64)
    tri_rows = np.flatnonzero(sizes == 3)
    quad_rows = np.flatnonzero(sizes == 4)
    # positions: every polygon contributes 1 (tri) or 2 (quad) rows, in order
    counts = np.where(sizes == 3, 1, 2)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out[offsets[tri_rows]] = tris
    out[offsets[quad_rows]] = t1
    out[offsets[quad_rows] + 1] = t2
    return out


def subdivide(mesh, n_links, iterations=1, k_neighbors=4):
    """Catmull-Clark refine a skinned mesh.

    Skin weights and warp offsets follow the same affine combinations as the
    positions; weights are then truncated to four influences and renormalised.
    The result is triangulated, keeps the refined quads in ``polys`` and has
    freshly computed neighbour sets.
    """
    polys = mesh.polys if mesh.polys is not None else mesh.faces
    weights = dense_weights(mesh, n_links)
    v, quads, (w, phi) = catmull_clark(mesh.v0, polys, iterations, attributes=(weights, mesh.phi))
    links, values = normalize_weight_matrix(w)
    return SkinnedMesh(
        v0=v,
        faces=triangulate(v, quads),
        weight_links=links,
        weight_values=values,
        neighbors=build_neighbors(v, k_neighbors),
        phi=phi,
        polys=quads,
    )


def euler_counts(polys, n_vertices):
    """``(V, E, F)`` of a polygon mesh."""
    edges, _, _ = edge_table(as_polys(polys), n_vertices)
    return n_vertices, len(edges), len(polys)
