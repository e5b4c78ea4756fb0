"""Programmatic test rigs: a 3-link arm, a 12-link biped, a rigid sphere, a sheet.

All rigs are posed in the camera frame (x right, y down, z forward) so that a
camera at the origin sees them without any extra extrinsics.
"""

import numpy as np

from . import dualquat as dq
from .seqio import ModelBundle
from .skeleton import HINGE, PRISMATIC, Joint, Link, Skeleton
from .skinmesh import SkinnedMesh, build_neighbors, pack_weights
from .subdivision import as_polys, catmull_clark, triangulate


def _basis(axis):
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return a, e1, e2


def capsule(start, end, radius, segments=16, cap_rings=4, body_rings=8):
    """Closed capsule as quads plus triangle fans at the poles.

    Returns ``(vertices, polys, axial)`` where ``axial`` is each vertex's
    coordinate along the axis measured from ``start``.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    length = np.linalg.norm(end - start)
    a, e1, e2 = _basis(end - start)
    rings = []
    for k in range(1, cap_rings + 1):
        alpha = 0.5 * np.pi * k / cap_rings
        rings.append((-radius * np.cos(alpha), radius * np.sin(alpha)))
    for k in range(1, body_rings + 1):
        rings.append((length * k / body_rings, radius))
    for k in range(cap_rings - 1, 0, -1):
        alpha = 0.5 * np.pi * k / cap_rings
        rings.append((length + radius * np.cos(alpha), radius * np.sin(alpha)))
    phis = 2 * np.pi * np.arange(segments) / segments
    verts = [start - radius * a]
    axial = [-radius]
    for h, rho in rings:
        for phi in phis:
            verts.append(start + h * a + rho * (np.cos(phi) * e1 + np.sin(phi) * e2))
            axial.append(h)
    verts.append(start + (length + radius) * a)
    axial.append(length + radius)
    verts = np.array(verts)
    top = len(verts) - 1

    def ring(i, m):
        return 1 + i * segments + (m % segments)

    polys = []
    for m in range(segments):
        polys.append([0, ring(0, m + 1), ring(0, m)])
    for i in range(len(rings) - 1):
        for m in range(segments):
            polys.append([ring(i, m), ring(i, m + 1), ring(i + 1, m + 1), ring(i + 1, m)])
    last = len(rings) - 1
    for m in range(segments):
        polys.append([ring(last, m), ring(last, m + 1), top])
    return verts, polys, np.array(axial)


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _assemble(links, parts, name, labeled=None, k_neighbors=4):
    """Skeleton + merged mesh from ``(vertices, polys, weight_rows)`` parts."""
    skel = Skeleton(links)
    verts, polys, rows = [], [], []
    base = 0
    for v, p, w in parts:
        verts.append(v)
        polys += [[base + i for i in poly] for poly in p]
        rows += w
        base += len(v)
    v0 = np.concatenate(verts)
    poly_arr = as_polys(polys)
    wl, wv = pack_weights(rows)
    mesh = SkinnedMesh(
        v0=v0,
        faces=triangulate(v0, poly_arr),
        weight_links=wl,
        weight_values=wv,
        neighbors=build_neighbors(v0, k_neighbors),
        polys=poly_arr,
    )
    labeled = [skel.index(n) for n in labeled] if labeled else []
    return ModelBundle(skeleton=skel, mesh=mesh, name=name, labeled_joints=labeled)


def _link(name, parent, offset, kind, axis, limits=None, index=None):
    return Link(
        name=name,
        parent=parent,
        parent_offset=dq.translation(offset),
        joint=Joint(kind=kind, axis=np.asarray(axis, dtype=np.float64), theta_index=index, limits=limits),
    )


def arm(origin=(-0.4, 0.0, 1.5), lengths=(0.2, 0.3, 0.3), radius=0.05, segments=16):
    """Three hinge links along +x covered by one capsule."""
    origin = np.asarray(origin, dtype=np.float64)
    names = ["base", "upper", "fore"]
    axes = [(0, 0, 1), (0, 0, 1), (0, 1, 0)]
    links = []
    for i, (n, ax) in enumerate(zip(names, axes)):
        offset = origin if i == 0 else np.array([lengths[i - 1], 0.0, 0.0])
        links.append(_link(n, None if i == 0 else i - 1, offset, HINGE, ax, limits=(-1.5, 1.5), index=i))
    total = float(sum(lengths))
    v, p, s = capsule(origin, origin + [total, 0, 0], radius, segments=segments, cap_rings=4, body_rings=24)
    bounds = np.cumsum([0.0, *lengths])
    blend = 0.04
    rows = []
    for x in s:
        j = int(np.clip(np.searchsorted(bounds, x, side="right") - 1, 0, 2))
        row = {j: 1.0}
        if j > 0 and x - bounds[j] < blend:
            t = smoothstep((x - bounds[j] + blend) / (2 * blend))
            row = {j: t, j - 1: 1 - t}
        elif j < 2 and bounds[j + 1] - x < blend:
            t = smoothstep((x - bounds[j + 1] + blend) / (2 * blend))
            row = {j + 1: t, j: 1 - t}
        rows.append(row)
    return _assemble(links, [(v, p, rows)], "arm")


# biped layout: name, parent, offset from parent, joint kind, axis,
# capsule start/end in the link frame, radius
BIPED = [
    ("pelvis", None, (0.0, 0.05, 2.8), HINGE, (0, 1, 0), (-0.11, 0.0, 0.0), (0.11, 0.0, 0.0), 0.1),
    ("spine", "pelvis", (0.0, -0.08, 0.0), PRISMATIC, (0, -1, 0), (0.0, 0.0, 0.0), (0.0, -0.18, 0.0), 0.1),
    ("chest", "spine", (0.0, -0.22, 0.0), HINGE, (0, 0, 1), (0.0, 0.0, 0.0), (0.0, -0.2, 0.0), 0.13),
    ("head", "chest", (0.0, -0.3, 0.0), HINGE, (1, 0, 0), (0.0, -0.1, 0.0), (0.0, -0.2, 0.0), 0.09),
    ("l_upperarm", "chest", (-0.2, -0.2, 0.0), HINGE, (0, 0, 1), (-0.02, 0.0, 0.0), (-0.26, 0.0, 0.0), 0.05),
    ("l_forearm", "l_upperarm", (-0.28, 0.0, 0.0), HINGE, (0, 1, 0), (0.0, 0.0, 0.0), (-0.24, 0.0, 0.0), 0.045),
    ("r_upperarm", "chest", (0.2, -0.2, 0.0), HINGE, (0, 0, 1), (0.02, 0.0, 0.0), (0.26, 0.0, 0.0), 0.05),
    ("r_forearm", "r_upperarm", (0.28, 0.0, 0.0), HINGE, (0, 1, 0), (0.0, 0.0, 0.0), (0.24, 0.0, 0.0), 0.045),
    ("l_thigh", "pelvis", (-0.1, 0.06, 0.0), HINGE, (0, 0, 1), (0.0, 0.03, 0.0), (0.0, 0.4, 0.0), 0.07),
    ("l_shin", "l_thigh", (0.0, 0.43, 0.0), HINGE, (1, 0, 0), (0.0, 0.0, 0.0), (0.0, 0.38, 0.0), 0.055),
    ("r_thigh", "pelvis", (0.1, 0.06, 0.0), HINGE, (0, 0, 1), (0.0, 0.03, 0.0), (0.0, 0.4, 0.0), 0.07),
    ("r_shin", "r_thigh", (0.0, 0.43, 0.0), HINGE, (1, 0, 0), (0.0, 0.0, 0.0), (0.0, 0.38, 0.0), 0.055),
]


def biped(segments=16, cap_rings=4, body_rings=10, blend=0.05):
    """Twelve-link biped (one prismatic spine stretch) over capsule limbs.

    Roughly 3k vertices; each capsule is bound to its link and blended with
    the parent link near the proximal joint.
    """
    names = [row[0] for row in BIPED]
    links = []
    for i, (name, parent, offset, kind, axis, *_rest) in enumerate(BIPED):
        limits = (-0.1, 0.1) if kind == PRISMATIC else (-1.5, 1.5)
        links.append(_link(name, None if parent is None else names.index(parent), offset, kind, axis, limits, index=i))
    skel = Skeleton(links)
    origins = dq.translation_of(skel.bind_pose)
    parts = []
    for i, (name, parent, _o, _k, _a, c0, c1, radius) in enumerate(BIPED):
        start = origins[i] + np.asarray(c0)
        end = origins[i] + np.asarray(c1)
        v, p, s = capsule(start, end, radius, segments=segments, cap_rings=cap_rings, body_rings=body_rings)
        # axial coordinate relative to the link's own joint
        axis = (end - start) / np.linalg.norm(end - start)
        rel = (v - origins[i]) @ axis
        rows = []
        for x in rel:
            if parent is None:
                rows.append({i: 1.0})
            else:
                t = float(smoothstep((x + blend) / (2 * blend)))
                rows.append({i: t, names.index(parent): 1.0 - t})
        parts.append((v, p, rows))
    return _assemble(links, parts, "biped")


def cube_sphere(center, radius, iterations=4):
    """Quad sphere: a Catmull-Clark refined cube projected onto the sphere."""
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    v, polys, _ = catmull_clark(v, quads, iterations)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center) + radius * v, polys


def sphere(center=(0.0, 0.0, 1.0), radius=0.15, iterations=5):
    """Rigid sphere on a three-prismatic translation chain (x, y, z)."""
    center = np.asarray(center, dtype=np.float64)
    links = [
        _link("tx", None, center, PRISMATIC, (1, 0, 0), limits=(-0.5, 0.5), index=0),
        _link("ty", 0, (0, 0, 0), PRISMATIC, (0, 1, 0), limits=(-0.5, 0.5), index=1),
        _link("tz", 1, (0, 0, 0), PRISMATIC, (0, 0, 1), limits=(-0.5, 0.5), index=2),
    ]
    v, polys = cube_sphere(center, radius, iterations)
    rows = [{2: 1.0}] * len(v)
    return _assemble(links, [(v, polys, rows)], "sphere", labeled=["tz"])


def sheet(center=(0.0, 0.0, 1.0), size=0.4, n=21):
    """Flat square facing the camera, on a single prismatic-z link."""
    center = np.asarray(center, dtype=np.float64)
    links = [_link("slide", None, center, PRISMATIC, (0, 0, 1), index=0)]
    xs = np.linspace(-size / 2, size / 2, n)
    gx, gy = np.meshgrid(xs, xs)
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1) + center
    polys = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            # wound so normals face the camera (-z)
            polys.append([a, a + n, a + n + 1, a + 1])
    return _assemble(links, [(v, polys, [{0: 1.0}] * len(v))], "sheet")


RIGS = {"arm": arm, "biped": biped, "sphere": sphere, "sheet": sheet}


def dent_field(mesh, center, directions, depth=0.02, width=0.35):
    """Smooth inward radial dents on a sphere-like mesh.

    ``directions`` are unit vectors from ``center``; each dent has a Gaussian
    angular profile of ``width`` radians. The combined displacement is capped
    at ``depth`` meters.
    """
    rel = mesh.v0 - np.asarray(center)
    radial = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    mag = np.zeros(len(rel))
    for d in directions:
        d = np.asarray(d, dtype=np.float64)
        ang = np.arccos(np.clip(radial @ (d / np.linalg.norm(d)), -1.0, 1.0))
        mag += depth * np.exp(-((ang / width) ** 2))
    mag = np.minimum(mag, depth)
    return -mag[:, None] * radial
