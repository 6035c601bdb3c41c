"""Numba pixel loops for splat compositing and triangle rasterization.

Everything here is serial and order-deterministic so repeated runs are
bit-identical. Splats arrive pre-sorted front-to-back; per pixel that
global order restricts to the correct local order.

The Gaussian footprint is cut off at 3 sigma (q = 9) through a C1 smooth
window on q in [8, 9]; a hard cutoff would make finite-difference gradient
checks unreliable at footprint boundaries.
"""

import numpy as np
from numba import njit

ALPHA_MAX = 0.999
Q_WINDOW_LO = 8.0
Q_WINDOW_HI = 9.0


@njit(cache=True, fastmath=False)
def _window(q):
    """exp(-q/2) with a smoothstep fade to zero on q in [8, 9]."""
    if q >= Q_WINDOW_HI:
        return 0.0
    base = np.exp(-0.5 * q)
    if q <= Q_WINDOW_LO:
        return base
    t = (Q_WINDOW_HI - q) / (Q_WINDOW_HI - Q_WINDOW_LO)
    return base * t * t * (3.0 - 2.0 * t)


@njit(cache=True, fastmath=False)
def _window_deriv(q):
    """d/dq of _window."""
    if q >= Q_WINDOW_HI:
        return 0.0
    base = np.exp(-0.5 * q)
    if q <= Q_WINDOW_LO:
        return -0.5 * base
    span = Q_WINDOW_HI - Q_WINDOW_LO
    t = (Q_WINDOW_HI - q) / span
    s = t * t * (3.0 - 2.0 * t)
    ds_dq = (6.0 * t - 6.0 * t * t) * (-1.0 / span)
    return base * (-0.5 * s + ds_dq)


@njit(cache=True, fastmath=False)
def composite_forward(means2d, lam, opac, colors, depths, radii, H, W, far):
    """Front-to-back alpha compositing of depth-sorted splats.

    lam holds the inverse 2D covariance per splat as (la, lb, lc) with
    q = la*dx^2 + 2*lb*dx*dy + lc*dy^2.

    Returns rgb (H,W,3), transmittance (H,W), depth (H,W), wsum (H,W).
    """
    rgb = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    dep = np.zeros((H, W))
    wsum = np.zeros((H, W))
    n = means2d.shape[0]
    for i in range(n):
        u = means2d[i, 0]
        v = means2d[i, 1]
        r = radii[i]
        x0 = int(np.floor(u - r))
        x1 = int(np.ceil(u + r))
        y0 = int(np.floor(v - r))
        y1 = int(np.ceil(v + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        if x1 < x0 or y1 < y0:
            continue
        la = lam[i, 0]
        lb = lam[i, 1]
        lc = lam[i, 2]
        o = opac[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        d = depths[i]
        for py in range(y0, y1 + 1):
            dy = (py + 0.5) - v
            for px in range(x0, x1 + 1):
                dx = (px + 0.5) - u
                q = la * dx * dx + 2.0 * lb * dx * dy + lc * dy * dy
                if q >= Q_WINDOW_HI:
                    continue
                a = o * _window(q)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                T = trans[py, px]
                w = T * a
                rgb[py, px, 0] += w * c0
                rgb[py, px, 1] += w * c1
                rgb[py, px, 2] += w * c2
                dep[py, px] += w * d
                wsum[py, px] += w
                trans[py, px] = T * (1.0 - a)
    for py in range(H):
        for px in range(W):
            dep[py, px] += trans[py, px] * far
    return rgb, trans, dep, wsum


@njit(cache=True, fastmath=False)
def composite_backward(
    means2d, lam, opac, colors, depths, radii, H, W, far,
    trans_final, d_rgb, d_alpha, d_depth,
):
    """Gradients of the compositing pass, traversed back-to-front.

    Recomputes per-pixel alphas and rolls transmittance backwards.
    Returns per-splat gradients wrt 2D mean, (la,lb,lc), activated opacity,
    color, and splat depth.
    """
    n = means2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_lam = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_depth = np.zeros(n)

    # Per-pixel running state: transmittance before the current splat and
    # the suffix sum of w_j * u_j over splats behind it.
    trans = trans_final.copy()
    suffix = np.zeros((H, W))
    # Constant per pixel: gradient routed through the final transmittance
    # by the alpha output (A = 1 - T_end) and the depth background term.
    K = np.zeros((H, W))
    for py in range(H):
        for px in range(W):
            K[py, px] = (d_alpha[py, px] - d_depth[py, px] * far) * trans_final[py, px]

    for i in range(n - 1, -1, -1):
        u = means2d[i, 0]
        v = means2d[i, 1]
        r = radii[i]
        x0 = int(np.floor(u - r))
        x1 = int(np.ceil(u + r))
        y0 = int(np.floor(v - r))
        y1 = int(np.ceil(v + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        if x1 < x0 or y1 < y0:
            continue
        la = lam[i, 0]
        lb = lam[i, 1]
        lc = lam[i, 2]
        o = opac[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        d = depths[i]
        for py in range(y0, y1 + 1):
            dy = (py + 0.5) - v
            for px in range(x0, x1 + 1):
                dx = (px + 0.5) - u
                q = la * dx * dx + 2.0 * lb * dx * dy + lc * dy * dy
                if q >= Q_WINDOW_HI:
                    continue
                f = _window(q)
                a = o * f
                capped = a > ALPHA_MAX
                if capped:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                om = 1.0 - a
                T_i = trans[py, px] / om
                trans[py, px] = T_i
                w = T_i * a
                u_i = (
                    d_rgb[py, px, 0] * c0
                    + d_rgb[py, px, 1] * c1
                    + d_rgb[py, px, 2] * c2
                    + d_depth[py, px] * d
                )
                dL_da = T_i * u_i + (K[py, px] - suffix[py, px]) / om
                suffix[py, px] += w * u_i

                g_color[i, 0] += w * d_rgb[py, px, 0]
                g_color[i, 1] += w * d_rgb[py, px, 1]
                g_color[i, 2] += w * d_rgb[py, px, 2]
                g_depth[i] += w * d_depth[py, px]

                if not capped:
                    g_opac[i] += dL_da * f
                    dL_dq = dL_da * o * _window_deriv(q)
                    g_mean[i, 0] += dL_dq * (-(2.0 * la * dx + 2.0 * lb * dy))
                    g_mean[i, 1] += dL_dq * (-(2.0 * lb * dx + 2.0 * lc * dy))
                    g_lam[i, 0] += dL_dq * dx * dx
                    g_lam[i, 1] += dL_dq * 2.0 * dx * dy
                    g_lam[i, 2] += dL_dq * dy * dy
    return g_mean, g_lam, g_opac, g_color, g_depth


# ---------------------------------------------------------------------------
# Occupancy field sampling (meshing)
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=False)
def occupancy_accumulate(grid, origin, spacing, positions, inv_cov, opacities, radii):
    """Adds each splat's truncated density into a voxel grid in place.

    grid is (N,N,N) sampled at voxel centers origin + (idx + 0.5) * spacing.
    inv_cov is (M,3,3) world-space inverse covariance; radii the 3-sigma
    world-space bounding radius per splat. Hard 3-sigma cutoff (q <= 9).
    """
    nx, ny, nz = grid.shape
    m = positions.shape[0]
    for s in range(m):
        px = positions[s, 0]
        py = positions[s, 1]
        pz = positions[s, 2]
        r = radii[s]
        i0 = int(np.floor((px - r - origin[0]) / spacing[0] - 0.5))
        i1 = int(np.ceil((px + r - origin[0]) / spacing[0] - 0.5))
        j0 = int(np.floor((py - r - origin[1]) / spacing[1] - 0.5))
        j1 = int(np.ceil((py + r - origin[1]) / spacing[1] - 0.5))
        k0 = int(np.floor((pz - r - origin[2]) / spacing[2] - 0.5))
        k1 = int(np.ceil((pz + r - origin[2]) / spacing[2] - 0.5))
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if k0 < 0:
            k0 = 0
        if i1 > nx - 1:
            i1 = nx - 1
        if j1 > ny - 1:
            j1 = ny - 1
        if k1 > nz - 1:
            k1 = nz - 1
        o = opacities[s]
        a00 = inv_cov[s, 0, 0]
        a01 = inv_cov[s, 0, 1]
        a02 = inv_cov[s, 0, 2]
        a11 = inv_cov[s, 1, 1]
        a12 = inv_cov[s, 1, 2]
        a22 = inv_cov[s, 2, 2]
        for i in range(i0, i1 + 1):
            dx = origin[0] + (i + 0.5) * spacing[0] - px
            for j in range(j0, j1 + 1):
                dy = origin[1] + (j + 0.5) * spacing[1] - py
                for k in range(k0, k1 + 1):
                    dz = origin[2] + (k + 0.5) * spacing[2] - pz
                    q = (
                        a00 * dx * dx
                        + a11 * dy * dy
                        + a22 * dz * dz
                        + 2.0 * (a01 * dx * dy + a02 * dx * dz + a12 * dy * dz)
                    )
                    if q <= 9.0:
                        grid[i, j, k] += o * np.exp(-0.5 * q)


@njit(cache=True, fastmath=False)
def uv_raster_positions(corner_px, corner_world, tex_res, out_pos, out_cover):
    """Orthographic rasterization of triangles in texture space.

    corner_px: (T,3,2) texel coordinates per corner; corner_world: (T,3,3)
    world positions per corner. Fills out_pos (R,R,3) with barycentric
    world positions and out_cover (R,R) with 1 where covered.
    """
    nt = corner_px.shape[0]
    for t in range(nt):
        ax = corner_px[t, 0, 0]
        ay = corner_px[t, 0, 1]
        bx = corner_px[t, 1, 0]
        by = corner_px[t, 1, 1]
        cx = corner_px[t, 2, 0]
        cy = corner_px[t, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = int(np.floor(min(ax, min(bx, cx))))
        x1 = int(np.ceil(max(ax, max(bx, cx))))
        y0 = int(np.floor(min(ay, min(by, cy))))
        y1 = int(np.ceil(max(ay, max(by, cy))))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > tex_res - 1:
            x1 = tex_res - 1
        if y1 > tex_res - 1:
            y1 = tex_res - 1
        inv_area = 1.0 / area
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                w0 = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) * inv_area
                w1 = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                for k in range(3):
                    out_pos[py, px, k] = (
                        w0 * corner_world[t, 0, k]
                        + w1 * corner_world[t, 1, k]
                        + w2 * corner_world[t, 2, k]
                    )
                out_cover[py, px] = 1


@njit(cache=True, fastmath=False)
def mixture_colors(points, positions, inv_cov, opacities, colors, radii):
    """Opacity-weighted Gaussian-mixture color at query points.

    Returns (colors (P,3), weights (P,)); contributions truncated at the
    3-sigma radius per splat.
    """
    np_pts = points.shape[0]
    ns = positions.shape[0]
    out = np.zeros((np_pts, 3))
    wsum = np.zeros(np_pts)
    for p in range(np_pts):
        qx = points[p, 0]
        qy = points[p, 1]
        qz = points[p, 2]
        for s in range(ns):
            dx = qx - positions[s, 0]
            dy = qy - positions[s, 1]
            dz = qz - positions[s, 2]
            r = radii[s]
            if dx * dx + dy * dy + dz * dz > r * r:
                continue
            q = (
                inv_cov[s, 0, 0] * dx * dx
                + inv_cov[s, 1, 1] * dy * dy
                + inv_cov[s, 2, 2] * dz * dz
                + 2.0 * (inv_cov[s, 0, 1] * dx * dy + inv_cov[s, 0, 2] * dx * dz + inv_cov[s, 1, 2] * dy * dz)
            )
            if q > 9.0:
                continue
            w = opacities[s] * np.exp(-0.5 * q)
            out[p, 0] += w * colors[s, 0]
            out[p, 1] += w * colors[s, 1]
            out[p, 2] += w * colors[s, 2]
            wsum[p] += w
    for p in range(np_pts):
        if wsum[p] > 0.0:
            out[p, 0] /= wsum[p]
            out[p, 1] /= wsum[p]
            out[p, 2] /= wsum[p]
    return out, wsum


# ---------------------------------------------------------------------------
# Triangle z-buffer rasterizer (harmonization)
# ---------------------------------------------------------------------------


@njit(cache=True, fastmath=False)
def raster_triangles(
    verts_uvz, tris, tri_texel_base, tri_uv_px, H, W, far,
    zbuf, hit_node, hit_texel, tex_w,
):
    """Z-buffered rasterization recording which texel every pixel maps to.

    verts_uvz: (V,3) screen-space u, v and camera depth z per vertex.
    tris: (T,3) vertex indices. tri_texel_base: (T,) owning node index per
    triangle. tri_uv_px: (T,3,2) per-corner texture pixel coordinates,
    interpolated with perspective-correct barycentrics; all nodes share one
    square atlas resolution tex_w.
    """
    nt = tris.shape[0]
    for t in range(nt):
        ia = tris[t, 0]
        ib = tris[t, 1]
        ic = tris[t, 2]
        ax = verts_uvz[ia, 0]
        ay = verts_uvz[ia, 1]
        az = verts_uvz[ia, 2]
        bx = verts_uvz[ib, 0]
        by = verts_uvz[ib, 1]
        bz = verts_uvz[ib, 2]
        cx = verts_uvz[ic, 0]
        cy = verts_uvz[ic, 1]
        cz = verts_uvz[ic, 2]
        if az <= 0.0 or bz <= 0.0 or cz <= 0.0:
            continue
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = int(np.floor(min(ax, min(bx, cx))))
        x1 = int(np.ceil(max(ax, max(bx, cx))))
        y0 = int(np.floor(min(ay, min(by, cy))))
        y1 = int(np.ceil(max(ay, max(by, cy))))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        inv_area = 1.0 / area
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                w0 = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) * inv_area
                w1 = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # Perspective-correct interpolation via 1/z weighting.
                iz = w0 / az + w1 / bz + w2 / cz
                z = 1.0 / iz
                if z >= zbuf[py, px]:
                    continue
                zbuf[py, px] = z
                pa = (w0 / az) * z
                pb = (w1 / bz) * z
                pc = (w2 / cz) * z
                tu = pa * tri_uv_px[t, 0, 0] + pb * tri_uv_px[t, 1, 0] + pc * tri_uv_px[t, 2, 0]
                tv = pa * tri_uv_px[t, 0, 1] + pb * tri_uv_px[t, 1, 1] + pc * tri_uv_px[t, 2, 1]
                tx = int(tu)
                ty = int(tv)
                if tx < 0:
                    tx = 0
                if ty < 0:
                    ty = 0
                if tx > tex_w - 1:
                    tx = tex_w - 1
                hit_node[py, px] = tri_texel_base[t]
                hit_texel[py, px] = ty * tex_w + tx
