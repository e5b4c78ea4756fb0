import numpy as np
import pytest

from deftrack import dualquat as dq
from deftrack.association import Intrinsics
from deftrack.seqio import ModelBundle
from deftrack.skeleton import HINGE, PRISMATIC, Joint, Link, Skeleton
from deftrack.skinmesh import SkinnedMesh, build_neighbors, pack_weights


def unit_vector(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_rotation(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_unit_dq(rng, scale=1.0):
    """Random rigid transform as a unit dual quaternion."""
    return dq.compose(dq.translation(rng.uniform(-scale, scale, 3)), dq.hinge(rng.uniform(-np.pi, np.pi), unit_vector(rng)))


def random_matrix(rng, scale=1.0):
    return dq.to_matrix(random_unit_dq(rng, scale))


def random_links(rng, n, prismatic_fraction=0.3, chain=False):
    """Random tree (or chain) of single-axis joints with rotated offsets."""
    links = []
    for j in range(n):
        parent = None if j == 0 else (j - 1 if chain else int(rng.integers(0, j)))
        offset = dq.compose(dq.translation(rng.uniform(-0.3, 0.3, 3)), dq.hinge(rng.uniform(-1, 1), unit_vector(rng)))
        kind = PRISMATIC if rng.random() < prismatic_fraction else HINGE
        links.append(Link(f"l{j}", parent, offset, Joint(kind, unit_vector(rng), j)))
    order = rng.permutation(n)
    # shuffle theta indices so link order and joint order differ
    return [Link(l.name, l.parent, l.parent_offset, Joint(l.joint.kind, l.joint.axis, int(order[i])))
            for i, l in enumerate(links)]


def random_skeleton(rng, n, **kw):
    return Skeleton(random_links(rng, n, **kw))


def random_mesh(rng, skel, n_vertices, max_influences=4, spread=0.5):
    """Point set around the bind-pose link origins with random sparse weights."""
    origins = dq.translation_of(skel.bind_pose)
    v0 = origins[rng.integers(0, skel.n_links, n_vertices)] + rng.normal(scale=spread, size=(n_vertices, 3))
    rows = []
    for _ in range(n_vertices):
        k = int(rng.integers(1, max_influences + 1))
        links = rng.choice(skel.n_links, size=min(k, skel.n_links), replace=False)
        w = rng.uniform(0.1, 1.0, len(links))
        rows.append(dict(zip(links.tolist(), (w / w.sum()).tolist())))
    wl, wv = pack_weights(rows)
    faces = np.array([[i, (i + 1) % n_vertices, (i + 2) % n_vertices] for i in range(0, n_vertices - 2, 3)])
    return SkinnedMesh(v0=v0, faces=faces, weight_links=wl, weight_values=wv, neighbors=build_neighbors(v0, 4))


def random_pose(rng, skel, scale=0.6):
    return rng.uniform(-scale, scale, skel.n_joints)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def kinect():
    return Intrinsics(365.0, 365.0, 256.0, 212.0, 512, 424)


@pytest.fixture
def small_intr():
    return Intrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


def single_link_bundle(v0, faces, kind=PRISMATIC, axis=(0, 0, 1), offset=(0, 0, 0)):
    links = [Link("root", None, dq.translation(offset), Joint(kind, np.asarray(axis, float), 0))]
    skel = Skeleton(links)
    v0 = np.asarray(v0, dtype=np.float64)
    wl, wv = pack_weights([{0: 1.0}] * len(v0))
    k = min(4, len(v0) - 1)
    mesh = SkinnedMesh(v0=v0, faces=faces, weight_links=wl, weight_values=wv, neighbors=build_neighbors(v0, k))
    return ModelBundle(skeleton=skel, mesh=mesh, name="single")


def vertex_cloud(posed, intr):
    """Organised cloud holding, per pixel, the lowest-index visible vertex projecting there.

    Every point coincides with a vertex, so the point-plane residual is zero
    at the generating pose and association is exact.
    """
    from deftrack.association import CloudFrame, bucket_occupancy

    b = bucket_occupancy(posed, intr)
    pts = np.zeros((intr.height * intr.width, 3))
    valid = np.zeros(intr.height * intr.width, dtype=bool)
    pix = np.flatnonzero(b.start[:-1] < b.start[1:])
    pts[pix] = posed.v[b.verts[b.start[pix]]]
    valid[pix] = True
    return CloudFrame(pts.reshape(intr.height, intr.width, 3), valid.reshape(intr.height, intr.width))
