"""Dual quaternion algebra on plain numpy arrays.

A dual quaternion is stored as a float64 array whose last axis has length 8,
laid out as ``(real.w, real.x, real.y, real.z, dual.w, dual.x, dual.y, dual.z)``.
Every function broadcasts over leading axes, so a stack of transforms of shape
``(n, 8)`` is handled the same way as a single one.

``compose(a, b)`` is the transform that applies ``b`` first and then ``a``.
"""

import numpy as np

from .errors import DegenerateBlend, NonRigidMatrix

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])

UNIT_TOL = 1e-9


def _axis(axis):
    return np.asarray(axis, dtype=np.float64)


def qmul(a, b):
    """Hamilton product of quaternions stored as ``(..., 4)`` arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def qconj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def real(h):
    return np.asarray(h)[..., :4]


def dual(h):
    return np.asarray(h)[..., 4:]


def make(real_part, dual_part):
    return np.concatenate(
        [np.asarray(real_part, dtype=np.float64), np.asarray(dual_part, dtype=np.float64)],
        axis=-1,
    )


def hinge(theta, axis):
    """Rotation by ``theta`` radians about the unit ``axis``."""
    z = _axis(axis)
    half = 0.5 * np.asarray(theta, dtype=np.float64)
    s = np.sin(half)[..., None]
    out = np.zeros(np.shape(half) + (8,))
    out[..., 0] = np.cos(half)
    out[..., 1:4] = z * s
    return out


def prismatic(theta, axis):
    """Translation by ``theta`` meters along the unit ``axis``."""
    z = _axis(axis)
    half = 0.5 * np.asarray(theta, dtype=np.float64)
    out = np.zeros(np.shape(half) + (8,))
    out[..., 0] = 1.0
    out[..., 5:8] = z * half[..., None]
    return out


def d_hinge(theta, axis):
    """Componentwise derivative of :func:`hinge` with respect to ``theta``."""
    z = _axis(axis)
    half = 0.5 * np.asarray(theta, dtype=np.float64)
    out = np.zeros(np.shape(half) + (8,))
    out[..., 0] = -0.5 * np.sin(half)
    out[..., 1:4] = 0.5 * z * np.cos(half)[..., None]
    return out


def d_prismatic(theta, axis):
    """Componentwise derivative of :func:`prismatic`; independent of ``theta``."""
    z = _axis(axis)
    shape = np.shape(theta)
    out = np.zeros(shape + (8,))
    out[..., 5:8] = 0.5 * z
    return out


def translation(t):
    """Pure translation by the 3-vector ``t``."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(t.shape[:-1] + (8,))
    out[..., 0] = 1.0
    out[..., 5:8] = 0.5 * t
    return out


def compose(a, b):
    """Dual quaternion product ``a * b``.

    The product is bilinear, so it is also the right tool for chaining a
    derivative (a non-unit factor) between rigid transforms.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ar, ad = a[..., :4], a[..., 4:]
    br, bd = b[..., :4], b[..., 4:]
    return np.concatenate([qmul(ar, br), qmul(ar, bd) + qmul(ad, br)], axis=-1)


def compose_all(*factors):
    out = factors[0]
    for f in factors[1:]:
        out = compose(out, f)
    return out


def inverse(h):
    """Inverse of a unit dual quaternion (quaternion conjugate of both parts)."""
    h = np.asarray(h, dtype=np.float64)
    return h * np.array([1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0])


def is_unit(h, tol=UNIT_TOL):
    h = np.asarray(h, dtype=np.float64)
    r, d = h[..., :4], h[..., 4:]
    return np.all(np.abs(np.sum(r * r, axis=-1) - 1.0) <= tol) and np.all(
        np.abs(np.sum(r * d, axis=-1)) <= tol
    )


def normalize(h):
    """Project a (blended) dual quaternion back onto the unit manifold.

    Both parts are divided by the real-part norm and the dual part is made
    orthogonal to the real part. Raises :class:`DegenerateBlend` when the
    real-part norm is at most 1e-12.
    """
    h = np.asarray(h, dtype=np.float64)
    r, d = h[..., :4], h[..., 4:]
    norm = np.sqrt(np.sum(r * r, axis=-1))
    if np.any(norm <= 1e-12):
        raise DegenerateBlend("blend real part has norm <= 1e-12")
    r = r / norm[..., None]
    d = d / norm[..., None]
    d = d - r * np.sum(r * d, axis=-1)[..., None]
    return np.concatenate([r, d], axis=-1)


def rotation_matrix(q):
    """Matrix ``M(q)`` with ``M(q) p = q p q*``; a rotation when ``q`` is unit."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = w * w + x * x - y * y - z * z
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = w * w - x * x + y * y - z * z
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = w * w - x * x - y * y + z * z
    return m


def translation_of(h):
    """Translation vector ``2 vec(q_d q_r*)`` of a unit dual quaternion."""
    h = np.asarray(h, dtype=np.float64)
    return 2.0 * qmul(h[..., 4:], qconj(h[..., :4]))[..., 1:]


def transform_point(h, p):
    """Apply the unit dual quaternion ``h`` to the point(s) ``p``."""
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    rot = rotation_matrix(h[..., :4])
    return np.einsum("...ij,...j->...i", rot, p) + translation_of(h)


def transform_point_blend(b, p):
    """Transform ``p`` by the normalised version of an unnormalised blend ``b``.

    Evaluated as ``(q p q* + 2 vec(d q*)) / |q|^2`` which equals
    ``transform_point(normalize(b), p)`` but stays a smooth rational function
    of the eight blend components (used for the skinning Jacobian).
    """
    b = np.asarray(b, dtype=np.float64)
    q, d = b[..., :4], b[..., 4:]
    s = np.sum(q * q, axis=-1)
    rotated = np.einsum("...ij,...j->...i", rotation_matrix(q), p)
    trans = 2.0 * qmul(d, qconj(q))[..., 1:]
    return (rotated + trans) / s[..., None]


def _skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def d_transform_point_blend(b, p):
    """Jacobian ``(..., 3, 8)`` of :func:`transform_point_blend` w.r.t. ``b``.

    Includes the quotient rule on ``|q|^2``, i.e. it differentiates through
    blend normalisation.
    """
    b = np.asarray(b, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q, d = b[..., :4], b[..., 4:]
    w, u = q[..., 0], q[..., 1:]
    dw, dv = d[..., 0], d[..., 1:]
    s = np.sum(q * q, axis=-1)
    v = transform_point_blend(b, p)

    eye = np.broadcast_to(np.eye(3), u.shape[:-1] + (3, 3))
    up = np.sum(u * p, axis=-1)
    # q p q* = (w^2 - |u|^2) p + 2 (u.p) u + 2 w (u x p)
    d_rot_w = 2.0 * w[..., None] * p + 2.0 * np.cross(u, p)
    d_rot_u = (
        -2.0 * p[..., :, None] * u[..., None, :]
        + 2.0 * up[..., None, None] * eye
        + 2.0 * u[..., :, None] * p[..., None, :]
        - 2.0 * w[..., None, None] * _skew(p)
    )
    # 2 vec(d q*) = 2 (-dw u + w dv + u x dv)
    d_tr_w = 2.0 * dv
    d_tr_u = 2.0 * (-dw[..., None, None] * eye - _skew(dv))
    d_tr_dw = -2.0 * u
    d_tr_dv = 2.0 * (w[..., None, None] * eye + _skew(u))

    jac = np.empty(b.shape[:-1] + (3, 8))
    jac[..., :, 0] = d_rot_w + d_tr_w
    jac[..., :, 1:4] = d_rot_u + d_tr_u
    jac[..., :, 4] = d_tr_dw
    jac[..., :, 5:8] = d_tr_dv
    jac /= s[..., None, None]
    # quotient rule: d(1/s) = -2 q / s^2
    jac[..., :, 0:4] -= 2.0 * v[..., :, None] * q[..., None, :] / s[..., None, None]
    return jac


def to_matrix(h):
    """4x4 homogeneous matrix of a unit dual quaternion."""
    h = np.asarray(h, dtype=np.float64)
    m = np.zeros(h.shape[:-1] + (4, 4))
    m[..., :3, :3] = rotation_matrix(h[..., :4])
    m[..., :3, 3] = translation_of(h)
    m[..., 3, 3] = 1.0
    return m


def _quat_from_rotation(r):
    # Shepperd's method: branch on the largest diagonal combination.
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def from_matrix(m, tol=1e-6):
    """Unit dual quaternion of a rigid 4x4 matrix; real part has ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise NonRigidMatrix(f"expected a 4x4 matrix, got shape {m.shape}")
    r = m[:3, :3]
    if (
        np.max(np.abs(r.T @ r - np.eye(3))) > tol
        or np.linalg.det(r) < 0
        or np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > tol
    ):
        raise NonRigidMatrix("rotation block is not orthonormal")
    q = _quat_from_rotation(r)
    t = np.concatenate([[0.0], m[:3, 3]])
    return make(q, 0.5 * qmul(t, q))
