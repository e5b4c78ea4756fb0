"""Kinematic trees of single-axis hinge and prismatic joints."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import dualquat as dq
from .errors import ValidationError

HINGE = "hinge"
PRISMATIC = "prismatic"

BIND_TOL = 1e-9


@dataclass(frozen=True)
class Joint:
    kind: str
    axis: np.ndarray
    theta_index: int
    limits: Optional[tuple] = None

    def transform(self, theta):
        if self.kind == HINGE:
            return dq.hinge(theta, self.axis)
        return dq.prismatic(theta, self.axis)

    def derivative(self, theta):
        if self.kind == HINGE:
            return dq.d_hinge(theta, self.axis)
        return dq.d_prismatic(theta, self.axis)


@dataclass(frozen=True)
class Link:
    name: str
    parent: Optional[int]
    parent_offset: np.ndarray
    joint: Joint


def skeleton_problems(links):
    """Every invariant breach in a link list, as human-readable strings."""
    problems = []
    n = len(links)
    roots = [i for i, link in enumerate(links) if link.parent is None]
    if len(roots) != 1:
        problems.append(f"skeleton: expected exactly one root link, found {len(roots)}")
    for i, link in enumerate(links):
        where = f"links[{i}] ({link.name})"
        axis = np.asarray(link.joint.axis, dtype=np.float64)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            problems.append(f"{where}: joint axis is not a unit 3-vector")
        if link.joint.kind not in (HINGE, PRISMATIC):
            problems.append(f"{where}: unknown joint kind {link.joint.kind!r}")
        offset = np.asarray(link.parent_offset, dtype=np.float64)
        if offset.shape != (8,) or not dq.is_unit(offset):
            problems.append(f"{where}: parent offset is not a unit dual quaternion")
        if link.parent is not None and not 0 <= link.parent < n:
            problems.append(f"{where}: parent index {link.parent} out of range")
    # cycle detection before the ordering check so cycles are named as such
    for i in range(n):
        seen = set()
        j = i
        while j is not None and 0 <= j < n:
            if j in seen:
                problems.append(f"links[{i}] ({links[i].name}): parent chain contains a cycle")
                break
            seen.add(j)
            j = links[j].parent
    for i, link in enumerate(links):
        if link.parent is not None and 0 <= link.parent < n and link.parent >= i:
            problems.append(
                f"links[{i}] ({link.name}): parent index {link.parent} is not "
                "before the link (links must be topologically sorted)"
            )
    indices = sorted(link.joint.theta_index for link in links)
    if indices != list(range(n)):
        problems.append("skeleton: joint theta indices must be a permutation of 0..n-1")
    return problems


def _fk(links, theta):
    out = np.empty((len(links), 8))
    for j, link in enumerate(links):
        local = dq.compose(link.parent_offset, link.joint.transform(theta[link.joint.theta_index]))
        out[j] = local if link.parent is None else dq.compose(out[link.parent], local)
    return out


@dataclass
class Skeleton:
    """Ordered links plus the bind pose ``H0[j]`` (forward kinematics at zero)."""

    links: list
    bind_pose: np.ndarray = None
    _joint_link: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        problems = skeleton_problems(self.links)
        if problems:
            raise ValidationError(problems)
        zero = _fk(self.links, np.zeros(len(self.links)))
        if self.bind_pose is None:
            self.bind_pose = zero
        else:
            self.bind_pose = np.asarray(self.bind_pose, dtype=np.float64)
            if self.bind_pose.shape != zero.shape or np.max(np.abs(self.bind_pose - zero)) > BIND_TOL:
                raise ValidationError("skeleton: bind pose does not match forward kinematics at zero pose")
        self._joint_link = np.empty(len(self.links), dtype=np.int64)
        for j, link in enumerate(self.links):
            self._joint_link[link.joint.theta_index] = j
        self._bind_inv = dq.inverse(self.bind_pose)
        self._ancestor_mask = np.zeros((len(self.links), len(self.links)), dtype=bool)
        for j in range(len(self.links)):
            self._ancestor_mask[j, self.ancestors(j)] = True

    @property
    def n_links(self):
        return len(self.links)

    @property
    def n_joints(self):
        return len(self.links)

    @property
    def names(self):
        return [link.name for link in self.links]

    def index(self, name):
        for i, link in enumerate(self.links):
            if link.name == name:
                return i
        raise KeyError(name)

    def joint_kinds(self):
        kinds = [None] * self.n_joints
        for link in self.links:
            kinds[link.joint.theta_index] = link.joint.kind
        return kinds

    def joint_link(self, k):
        """Index of the link whose joint drives ``theta[k]``."""
        return int(self._joint_link[k])

    def ancestors(self, j):
        """Joint indices on the root-to-``j`` path, root first, ``j`` included."""
        chain = []
        while j is not None:
            chain.append(self.links[j].joint.theta_index)
            j = self.links[j].parent
        return chain[::-1]

    @property
    def ancestor_mask(self):
        """Boolean ``(links, joints)`` matrix: joint ``k`` moves link ``j``."""
        return self._ancestor_mask

    def clamp(self, theta):
        theta = np.array(theta, dtype=np.float64)
        for link in self.links:
            if link.joint.limits is not None:
                lo, hi = link.joint.limits
                k = link.joint.theta_index
                theta[k] = min(max(theta[k], lo), hi)
        return theta


def _check_pose(skel, theta):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (skel.n_joints,):
        raise ValueError(f"pose has {theta.shape} entries, skeleton has {skel.n_joints} joints")
    return theta


def forward_kinematics(skel, theta):
    """World transform ``H_{0,j}`` of every link, shape ``(links, 8)``."""
    return _fk(skel.links, _check_pose(skel, theta))


def link_offsets(skel, theta, fk=None):
    """``H_{j,delta} = H_{0,j} (H0_{0,j})^-1`` for every link."""
    if fk is None:
        fk = forward_kinematics(skel, theta)
    out = dq.compose(fk, skel._bind_inv)
    # links still at their bind transform get the identity exactly, not to rounding
    out[np.all(fk == skel.bind_pose, axis=1)] = dq.IDENTITY
    return out


def d_link_offset(skel, theta, fk, j, k):
    """Derivative of ``H_{j,delta}`` with respect to ``theta[k]`` as an 8-vector."""
    theta = _check_pose(skel, theta)
    if not skel.ancestor_mask[j, k]:
        return np.zeros(8)
    m = skel.joint_link(k)
    link = skel.links[m]
    prefix = link.parent_offset if link.parent is None else dq.compose(fk[link.parent], link.parent_offset)
    rel = dq.compose(dq.inverse(fk[m]), fk[j])
    return dq.compose_all(prefix, link.joint.derivative(theta[k]), rel, skel._bind_inv[j])


def link_offset_jacobian(skel, theta, fk=None):
    """All ``d_link_offset`` blocks at once, shape ``(links, 8, joints)``."""
    theta = _check_pose(skel, theta)
    if fk is None:
        fk = forward_kinematics(skel, theta)
    n = skel.n_links
    out = np.zeros((n, 8, skel.n_joints))
    fk_inv = dq.inverse(fk)
    for m, link in enumerate(skel.links):
        k = link.joint.theta_index
        prefix = link.parent_offset if link.parent is None else dq.compose(fk[link.parent], link.parent_offset)
        head = dq.compose(prefix, link.joint.derivative(theta[k]))
        js = np.flatnonzero(skel.ancestor_mask[:, k])
        rel = dq.compose(fk_inv[m], fk[js])
        out[js, :, k] = dq.compose(dq.compose(head, rel), skel._bind_inv[js])
    return out


def joint_positions(fk, link_indices=None):
    """World-space origins of the given links (all links by default)."""
    pos = dq.translation_of(fk)
    return pos if link_indices is None else pos[np.asarray(link_indices)]
