"""File formats: model bundles, depth sequences, ground truth and mesh export.

Model bundle
    A JSON document (``format: deftrack-model``) describing the skeleton and
    metadata, referencing a sidecar ``.npz`` with the mesh arrays. Dual
    quaternions are written as 8 numbers, real part first, ``w`` first.

Depth sequence
    Little-endian binary: a fixed header (see :data:`HEADER`) followed by
    ``frame_count`` row-major float32 depth images. Depth 0 marks an invalid
    pixel; metric depth is ``value * depth_scale``.

Ground truth
    CSV with one row per frame: ``frame``, one ``theta:<link>`` column per
    joint, then ``<joint>:x,y,z,vis`` for each labelled joint.
"""

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dualquat as dq
from .association import CloudFrame, Intrinsics
from .errors import HeaderMismatch, ParseError, TruncatedFile, ValidationError, VersionError
from .raster import depth_to_points
from .skeleton import BIND_TOL, Joint, Link, Skeleton, _fk, skeleton_problems
from .skinmesh import SkinnedMesh, bind_pose_error, mesh_problems

MODEL_FORMAT = "deftrack-model"
MODEL_VERSION = 1

MAGIC = b"DTSQ"
SEQUENCE_VERSION = 1
# magic, version, width, height, fx, fy, cx, cy, frame_count, depth_scale
HEADER = struct.Struct("<4sIIIddddId")


@dataclass
class ModelBundle:
    skeleton: Skeleton
    mesh: SkinnedMesh
    name: str = "model"
    units: str = "m"
    scale: float = 1.0
    labeled_joints: list = field(default_factory=list)

    def __post_init__(self):
        if not self.labeled_joints:
            self.labeled_joints = list(range(self.skeleton.n_links))

    @property
    def joint_names(self):
        return [self.skeleton.links[j].name for j in self.labeled_joints]


# ---------------------------------------------------------------- model bundles


def _links_from_doc(doc):
    raw = doc.get("links")
    if not isinstance(raw, list) or not raw:
        raise ParseError("model: 'links' must be a non-empty list")
    names = [entry.get("name") for entry in raw]
    if len(set(names)) != len(names):
        raise ValidationError("links: link names must be unique")
    index = {name: i for i, name in enumerate(names)}
    links = []
    for i, entry in enumerate(raw):
        try:
            parent = entry.get("parent")
            if parent is not None:
                if parent not in index:
                    raise ValidationError(f"links[{i}] ({entry['name']}): unknown parent {parent!r}")
                parent = index[parent]
            j = entry["joint"]
            limits = j.get("limits")
            joint = Joint(
                kind=j["kind"],
                axis=np.asarray(j["axis"], dtype=np.float64),
                theta_index=int(j.get("theta_index", i)),
                limits=tuple(limits) if limits is not None else None,
            )
            offset = np.asarray(entry.get("offset", dq.IDENTITY), dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"links[{i}]: malformed entry ({exc})") from exc
        links.append(Link(name=entry["name"], parent=parent, parent_offset=offset, joint=joint))
    return links


def _mesh_from_npz(path):
    try:
        with np.load(path) as data:
            return SkinnedMesh(
                v0=data["v0"],
                faces=data["faces"],
                weight_links=data["weight_links"],
                weight_values=data["weight_values"],
                neighbors=data["neighbors"],
                polys=data["polys"] if "polys" in data.files else None,
            )
    except FileNotFoundError:
        raise
    except (KeyError, ValueError, OSError) as exc:
        raise ParseError(f"{path}: cannot read mesh arrays ({exc})") from exc


def bundle_problems(links, bind_pose, mesh, labeled=None):
    """Every invariant breach of a would-be bundle."""
    problems = skeleton_problems(links)
    if not problems and bind_pose is not None:
        zero = _fk(links, np.zeros(len(links)))
        bind_pose = np.asarray(bind_pose, dtype=np.float64)
        if bind_pose.shape != zero.shape or np.max(np.abs(bind_pose - zero)) > BIND_TOL:
            problems.append("bind_pose: does not match forward kinematics at the zero pose")
    problems += mesh_problems(mesh, len(links))
    if labeled is not None:
        for name in labeled:
            if name not in [link.name for link in links]:
                problems.append(f"labeled_joints: unknown link {name!r}")
    if not problems and bind_pose_error(mesh, len(links)) > 1e-12:
        problems.append("mesh: skinning at the bind pose does not reproduce the template")
    return problems


def _read_doc(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"{path}: not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model version {doc.get('version')!r}")
    return doc


def validate_model(path):
    """List every invariant violated by the bundle at ``path`` (empty if valid)."""
    doc = _read_doc(path)
    links = _links_from_doc(doc)
    mesh = _mesh_from_npz(Path(path).parent / doc["mesh"])
    return bundle_problems(links, doc.get("bind_pose"), mesh, doc.get("labeled_joints"))


def load_model(path):
    """Load and fully validate a model bundle."""
    doc = _read_doc(path)
    if "mesh" not in doc:
        raise ParseError(f"{path}: missing 'mesh' reference")
    links = _links_from_doc(doc)
    mesh = _mesh_from_npz(Path(path).parent / doc["mesh"])
    labeled = doc.get("labeled_joints")
    problems = bundle_problems(links, doc.get("bind_pose"), mesh, labeled)
    if problems:
        raise ValidationError(problems)
    skel = Skeleton(links, bind_pose=doc.get("bind_pose"))
    return ModelBundle(
        skeleton=skel,
        mesh=mesh,
        name=doc.get("name", Path(path).stem),
        units=doc.get("units", "m"),
        scale=float(doc.get("scale", 1.0)),
        labeled_joints=[skel.index(n) for n in labeled] if labeled else [],
    )


def save_model(path, bundle):
    """Write ``path`` (JSON) and its sidecar ``<stem>.mesh.npz``."""
    path = Path(path)
    skel, mesh = bundle.skeleton, bundle.mesh
    mesh_name = path.name[: -len(path.suffix)] + ".mesh.npz" if path.suffix else path.name + ".mesh.npz"
    links = []
    for link in skel.links:
        joint = {
            "kind": link.joint.kind,
            "axis": [float(a) for a in link.joint.axis],
            "theta_index": int(link.joint.theta_index),
        }
        if link.joint.limits is not None:
            joint["limits"] = [float(x) for x in link.joint.limits]
        links.append(
            {
                "name": link.name,
                "parent": None if link.parent is None else skel.links[link.parent].name,
                "offset": [float(x) for x in link.parent_offset],
                "joint": joint,
            }
        )
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": bundle.name,
        "units": bundle.units,
        "scale": bundle.scale,
        "mesh": mesh_name,
        "labeled_joints": bundle.joint_names,
        "links": links,
        "bind_pose": [[float(x) for x in h] for h in skel.bind_pose],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    arrays = dict(
        v0=mesh.v0,
        faces=mesh.faces,
        weight_links=mesh.weight_links,
        weight_values=mesh.weight_values,
        neighbors=mesh.neighbors,
    )
    if mesh.polys is not None:
        arrays["polys"] = mesh.polys
    with open(path.parent / mesh_name, "wb") as fh:
        np.savez(fh, **arrays)
    return path


# ------------------------------------------------------------------- sequences


@dataclass(frozen=True)
class SequenceHeader:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    frame_count: int
    depth_scale: float = 1.0
    magic: bytes = MAGIC
    version: int = SEQUENCE_VERSION

    @property
    def intrinsics(self):
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def frame_bytes(self):
        return 4 * self.width * self.height

    def pack(self):
        return HEADER.pack(
            self.magic,
            self.version,
            self.width,
            self.height,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.frame_count,
            self.depth_scale,
        )


def read_header(fh):
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise TruncatedFile("sequence header is truncated")
    magic, version, w, h, fx, fy, cx, cy, n, scale = HEADER.unpack(raw)
    if magic != MAGIC:
        raise HeaderMismatch(f"bad magic {magic!r}")
    if version != SEQUENCE_VERSION:
        raise VersionError(f"unsupported sequence version {version}")
    if w * h == 0:
        raise HeaderMismatch("header has an empty image size")
    return SequenceHeader(w, h, fx, fy, cx, cy, n, scale)


class SequenceReader:
    """Lazy, in-order access to the frames of a depth sequence."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            self.header = read_header(fh)
        size = os.path.getsize(self.path)
        expected = HEADER.size + self.header.frame_count * self.header.frame_bytes
        if size > expected:
            raise HeaderMismatch(f"{self.path}: {size - expected} trailing bytes after the last frame")

    @property
    def intrinsics(self):
        return self.header.intrinsics

    def __len__(self):
        return self.header.frame_count

    def read_depth(self, index):
        """Raw float32 depth image of frame ``index``."""
        h = self.header
        if not 0 <= index < h.frame_count:
            raise IndexError(index)
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size + index * h.frame_bytes)
            raw = fh.read(h.frame_bytes)
        if len(raw) < h.frame_bytes:
            raise TruncatedFile(f"{self.path}: frame {index} is truncated", frame_index=index)
        return np.frombuffer(raw, dtype="<f4").reshape(h.height, h.width)

    def frame(self, index):
        return depth_frame(self.read_depth(index), self.intrinsics, self.header.depth_scale)

    def __iter__(self):
        h = self.header
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size)
            for index in range(h.frame_count):
                raw = fh.read(h.frame_bytes)
                if len(raw) < h.frame_bytes:
                    raise TruncatedFile(f"{self.path}: frame {index} is truncated", frame_index=index)
                depth = np.frombuffer(raw, dtype="<f4").reshape(h.height, h.width)
                yield depth_frame(depth, self.intrinsics, h.depth_scale)


def depth_frame(depth, intr, depth_scale=1.0):
    """Organised cloud from a stored depth image (0 marks invalid pixels)."""
    metric = np.asarray(depth, dtype=np.float64) * depth_scale
    points, valid = depth_to_points(metric, intr)
    return CloudFrame(points=points, valid=valid)


def load_sequence(path):
    return SequenceReader(path)


class SequenceWriter:
    """Streaming writer; the frame count in the header is patched on close."""

    def __init__(self, path, intr, depth_scale=1.0):
        self.path = Path(path)
        self.intr = intr
        self.depth_scale = float(depth_scale)
        self.count = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._fh.write(self._header().pack())

    def _header(self):
        i = self.intr
        return SequenceHeader(i.width, i.height, i.fx, i.fy, i.cx, i.cy, self.count, self.depth_scale)

    def write(self, depth):
        depth = np.asarray(depth)
        if depth.shape != (self.intr.height, self.intr.width):
            raise HeaderMismatch(f"frame shape {depth.shape} does not match the header")
        self._fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())
        self.count += 1

    def close(self):
        if self._fh is None:
            return
        self._fh.seek(0)
        self._fh.write(self._header().pack())
        self._fh.close()
        self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_sequence(path, intr, depth_frames, depth_scale=1.0):
    with SequenceWriter(path, intr, depth_scale) as writer:
        for depth in depth_frames:
            writer.write(depth)
    return Path(path)


# ---------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    theta: np.ndarray  # (T, joints)
    joints: np.ndarray  # (T, J, 3)
    visible: np.ndarray  # (T, J) bool
    theta_names: list
    joint_names: list

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        t = len(self.theta)
        if self.joints.shape[0] != t or self.visible.shape != self.joints.shape[:2]:
            raise ValidationError("ground truth: per-frame arrays disagree in length")

    @property
    def n_frames(self):
        return len(self.theta)


def save_ground_truth(path, gt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["frame"] + [f"theta:{n}" for n in gt.theta_names]
    for name in gt.joint_names:
        header += [f"{name}:x", f"{name}:y", f"{name}:z", f"{name}:vis"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(gt.n_frames):
            row = [str(t)] + [repr(float(x)) for x in gt.theta[t]]
            for j in range(len(gt.joint_names)):
                row += [repr(float(x)) for x in gt.joints[t, j]] + [str(int(gt.visible[t, j]))]
            writer.writerow(row)
    return path


def load_ground_truth(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "frame":
        raise ParseError(f"{path}: missing ground-truth header")
    header = rows[0]
    theta_names = [h.split(":", 1)[1] for h in header if h.startswith("theta:")]
    joint_cols = header[1 + len(theta_names) :]
    if len(joint_cols) % 4:
        raise ParseError(f"{path}: joint columns must come in x,y,z,vis groups")
    joint_names = [joint_cols[i].rsplit(":", 1)[0] for i in range(0, len(joint_cols), 4)]
    nt, nj = len(theta_names), len(joint_names)
    theta = np.zeros((len(rows) - 1, nt))
    joints = np.zeros((len(rows) - 1, nj, 3))
    visible = np.zeros((len(rows) - 1, nj), dtype=bool)
    for t, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {t + 1} has {len(row)} fields, expected {len(header)}")
        try:
            theta[t] = [float(x) for x in row[1 : 1 + nt]]
            rest = row[1 + nt :]
            for j in range(nj):
                joints[t, j] = [float(x) for x in rest[4 * j : 4 * j + 3]]
                visible[t, j] = rest[4 * j + 3] == "1"
        except ValueError as exc:
            raise ParseError(f"{path}: row {t + 1}: {exc}") from exc
    return GroundTruth(theta=theta, joints=joints, visible=visible, theta_names=theta_names, joint_names=joint_names)


def load_pose(path):
    """Pose vector from a JSON list, a ground-truth CSV (frame 0) or plain numbers."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return np.asarray(json.loads(text), dtype=np.float64)
    if text.startswith("frame"):
        return load_ground_truth(path).theta[0]
    try:
        return np.asarray([float(x) for x in text.replace(",", " ").split()], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: cannot parse pose ({exc})") from exc


# ------------------------------------------------------------------ mesh export


def save_posed_mesh(path, vertices, normals, faces):
    """ASCII PLY with per-vertex positions and normals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n")
        for p in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property double {p}\n")
        fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n")
        for p, n in zip(vertices, normals):
            fh.write(" ".join(repr(float(x)) for x in (*p, *n)) + "\n")
        for f in faces:
            fh.write(f"3 {int(f[0])} {int(f[1])} {int(f[2])}\n")
    return path


def load_posed_mesh(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: not a PLY file")
    nv = nf = 0
    end = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
        elif line == "end_header":
            end = i + 1
            break
    data = np.array([[float(x) for x in line.split()] for line in lines[end : end + nv]]).reshape(nv, 6)
    faces = np.array([[int(x) for x in line.split()[1:]] for line in lines[end + nv : end + nv + nf]], dtype=np.int64)
    return data[:, :3], data[:, 3:], faces.reshape(nf, 3)
