"""Numba ray-marching kernels behind the DRR renderer and mask projector.

Rays are sampled at fixed positions determined solely by the volume's
bounding box (entry t0, exit t1, step <= min(spacing) * step_factor along
the unit direction). Mask projection reuses exactly the same sample
positions so that projecting a union of structures equals the union of
their projections.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _ray_box(ox, oy, oz, dx, dy, dz, lo0, lo1, lo2, hi0, hi1, hi2):
    """Slab intersection; returns (t0, t1), empty when t0 >= t1."""
    t0 = 0.0
    t1 = 1e30
    for axis in range(3):
        if axis == 0:
            o, d, lo, hi = ox, dx, lo0, hi0
        elif axis == 1:
            o, d, lo, hi = oy, dy, lo1, hi1
        else:
            o, d, lo, hi = oz, dz, lo2, hi2
        if abs(d) < 1e-12:
            if o < lo or o > hi:
                return 1.0, 0.0
        else:
            ta = (lo - o) / d
            tb = (hi - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@njit(parallel=True, cache=True)
def drr_kernel(labels, mu_lut, origin, spacing, vol_hi,
               cam_center, rot_t, focal_px, cu, cv, height, width, step_mm, out):
    nx, ny, nz = labels.shape
    for r in prange(height):
        for c in range(width):
            u = c + 0.5
            v = r + 0.5
            dcx = (u - cu) / focal_px
            dcy = (v - cv) / focal_px
            dx = rot_t[0, 0] * dcx + rot_t[0, 1] * dcy + rot_t[0, 2]
            dy = rot_t[1, 0] * dcx + rot_t[1, 1] * dcy + rot_t[1, 2]
            dz = rot_t[2, 0] * dcx + rot_t[2, 1] * dcy + rot_t[2, 2]
            norm = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            t0, t1 = _ray_box(cam_center[0], cam_center[1], cam_center[2],
                              dx, dy, dz,
                              origin[0], origin[1], origin[2],
                              vol_hi[0], vol_hi[1], vol_hi[2])
            if t1 <= t0:
                out[r, c] = 0.0
                continue
            nsteps = int(np.ceil((t1 - t0) / step_mm))
            if nsteps < 1:
                nsteps = 1
            dt = (t1 - t0) / nsteps
            acc = 0.0
            for k in range(nsteps):
                t = t0 + (k + 0.5) * dt
                px = cam_center[0] + t * dx
                py = cam_center[1] + t * dy
                pz = cam_center[2] + t * dz
                ix = int(np.floor((px - origin[0]) / spacing[0]))
                iy = int(np.floor((py - origin[1]) / spacing[1]))
                iz = int(np.floor((pz - origin[2]) / spacing[2]))
                if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                    acc += mu_lut[labels[ix, iy, iz]] * dt
            out[r, c] = 1.0 - np.exp(-acc)


@njit(parallel=True, cache=True)
def mask_project_kernel(mask, origin, spacing, vol_hi, struct_lo, struct_hi,
                        cam_center, rot_t, focal_px, cu, cv, height, width,
                        step_mm, out):
    """out[r, c] = 1 iff any volume-grid ray sample falls in a mask voxel.

    struct_lo/struct_hi bound the structure; sample positions still come
    from the volume box so results match full-volume marching exactly.
    """
    nx, ny, nz = mask.shape
    for r in prange(height):
        for c in range(width):
            u = c + 0.5
            v = r + 0.5
            dcx = (u - cu) / focal_px
            dcy = (v - cv) / focal_px
            dx = rot_t[0, 0] * dcx + rot_t[0, 1] * dcy + rot_t[0, 2]
            dy = rot_t[1, 0] * dcx + rot_t[1, 1] * dcy + rot_t[1, 2]
            dz = rot_t[2, 0] * dcx + rot_t[2, 1] * dcy + rot_t[2, 2]
            norm = np.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= norm
            dy /= norm
            dz /= norm
            out[r, c] = 0
            t0, t1 = _ray_box(cam_center[0], cam_center[1], cam_center[2],
                              dx, dy, dz,
                              origin[0], origin[1], origin[2],
                              vol_hi[0], vol_hi[1], vol_hi[2])
            if t1 <= t0:
                continue
            s0, s1 = _ray_box(cam_center[0], cam_center[1], cam_center[2],
                              dx, dy, dz,
                              struct_lo[0], struct_lo[1], struct_lo[2],
                              struct_hi[0], struct_hi[1], struct_hi[2])
            if s1 <= s0:
                continue
            nsteps = int(np.ceil((t1 - t0) / step_mm))
            if nsteps < 1:
                nsteps = 1
            dt = (t1 - t0) / nsteps
            k0 = int((s0 - t0) / dt) - 1
            k1 = int((s1 - t0) / dt) + 1
            if k0 < 0:
                k0 = 0
            if k1 > nsteps - 1:
                k1 = nsteps - 1
            for k in range(k0, k1 + 1):
                t = t0 + (k + 0.5) * dt
                px = cam_center[0] + t * dx
                py = cam_center[1] + t * dy
                pz = cam_center[2] + t * dz
                ix = int(np.floor((px - origin[0]) / spacing[0]))
                iy = int(np.floor((py - origin[1]) / spacing[1]))
                iz = int(np.floor((pz - origin[2]) / spacing[2]))
                if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                    if mask[ix, iy, iz]:
                        out[r, c] = 1
                        break
