"""Z-buffer triangle rasterisation into a pinhole camera.

Depth at a covered pixel is the exact intersection of the pixel's centre ray
with the winning triangle's plane, so rendered points lie on the mesh surface.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _rasterize(v, faces, fx, fy, cx, cy, width, height, near):
    depth = np.full((height, width), np.inf)
    tri = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        az, bz, cz = v[ia, 2], v[ib, 2], v[ic, 2]
        if az <= near or bz <= near or cz <= near:
            continue
        au = fx * v[ia, 0] / az + cx
        av = fy * v[ia, 1] / az + cy
        bu = fx * v[ib, 0] / bz + cx
        bv = fy * v[ib, 1] / bz + cy
        cu = fx * v[ic, 0] / cz + cx
        cv = fy * v[ic, 1] / cz + cy
        area = (bu - au) * (cv - av) - (bv - av) * (cu - au)
        if area == 0.0:
            continue
        umin = max(0, int(np.ceil(min(au, bu, cu))))
        umax = min(width - 1, int(np.floor(max(au, bu, cu))))
        vmin = max(0, int(np.ceil(min(av, bv, cv))))
        vmax = min(height - 1, int(np.floor(max(av, bv, cv))))
        if umin > umax or vmin > vmax:
            continue
        # plane through the triangle in camera space
        e1x = v[ib, 0] - v[ia, 0]
        e1y = v[ib, 1] - v[ia, 1]
        e1z = bz - az
        e2x = v[ic, 0] - v[ia, 0]
        e2y = v[ic, 1] - v[ia, 1]
        e2z = cz - az
        nx = e1y * e2z - e1z * e2y
        ny = e1z * e2x - e1x * e2z
        nz = e1x * e2y - e1y * e2x
        nd = nx * v[ia, 0] + ny * v[ia, 1] + nz * az
        for py in range(vmin, vmax + 1):
            for px in range(umin, umax + 1):
                w0 = (bu - px) * (cv - py) - (bv - py) * (cu - px)
                w1 = (cu - px) * (av - py) - (cv - py) * (au - px)
                w2 = (au - px) * (bv - py) - (av - py) * (bu - px)
                if area > 0:
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                elif w0 > 0 or w1 > 0 or w2 > 0:
                    continue
                dx = (px - cx) / fx
                dy = (py - cy) / fy
                denom = nx * dx + ny * dy + nz
                if denom == 0.0:
                    continue
                t = nd / denom
                if t <= near:
                    continue
                if t < depth[py, px]:
                    depth[py, px] = t
                    tri[py, px] = f
    return depth, tri


def rasterize(vertices, faces, intr, near=1e-6):
    """Depth map ``(H, W)`` (``inf`` where empty) and winning triangle ids."""
    return _rasterize(
        np.ascontiguousarray(vertices, dtype=np.float64),
        np.ascontiguousarray(faces, dtype=np.int64),
        float(intr.fx),
        float(intr.fy),
        float(intr.cx),
        float(intr.cy),
        int(intr.width),
        int(intr.height),
        float(near),
    )


def pixel_rays(intr):
    """Unit-depth ray direction of every pixel centre, ``(H, W, 3)``."""
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)


def depth_to_points(depth, intr):
    """Back-project a depth map; non-positive or non-finite depth is invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    points = pixel_rays(intr) * np.where(valid, depth, 0.0)[..., None]
    return points, valid
