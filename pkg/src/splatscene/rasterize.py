"""Differentiable splat rendering: EWA projection plus alpha compositing.

The forward pass projects each 3D Gaussian to an image-space Gaussian via
the perspective Jacobian at its center, then composites depth-sorted
splats front to back. The backward pass propagates pixel gradients for
rgb, alpha and expected depth to every model parameter; its correctness is
pinned by finite-difference tests rather than trust in the algebra.

Rendering a union of models means concatenating their splats; gradients
flow back into each model's own buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from splatscene import _kernels
from splatscene.cameras import Camera
from splatscene.errors import RenderError
from splatscene.splats import GaussianModel, quat_to_rotmat, sigmoid

RADIUS_MARGIN_PX = 1.0


@dataclass
class RenderContext:
    camera: Camera
    models: tuple
    model_slices: tuple          # (start, stop) into the valid-splat arrays
    valid_indices: tuple         # per model: indices of splats that survived culling
    order: np.ndarray            # depth sort permutation over valid splats
    t_cam: np.ndarray            # (M,3) camera-space centers (sorted order)
    J: np.ndarray                # (M,2,3)
    cov_cam: np.ndarray          # (M,3,3)
    lam_mat: np.ndarray          # (M,2,2) inverse 2D covariance
    means2d: np.ndarray
    radii: np.ndarray
    opac: np.ndarray
    depths: np.ndarray
    trans_final: np.ndarray
    rotations_norm: np.ndarray   # (M,4) normalized quaternions (sorted order)
    raw_quat_norms: np.ndarray   # (M,)
    scales2: np.ndarray          # (M,3) exp(2*log_scale)
    rotmats: np.ndarray          # (M,3,3)


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (H,W,3) in [0,1]
    alpha: np.ndarray   # (H,W) in [0,1]
    depth: np.ndarray   # (H,W) meters, background at camera.far
    weight_sum: np.ndarray = None
    ctx: Optional[RenderContext] = field(default=None, repr=False)


def _as_model_list(models) -> list:
    if models is None:
        return []
    if isinstance(models, GaussianModel):
        return [models]
    return list(models)


def render(models: Union[GaussianModel, Sequence[GaussianModel], None], camera: Camera) -> RenderOutput:
    """Render one model or a union of models. Empty input gives background."""
    model_list = _as_model_list(models)
    H, W = camera.height, camera.width
    far = camera.far

    if not model_list:
        return RenderOutput(
            rgb=np.zeros((H, W, 3)),
            alpha=np.zeros((H, W)),
            depth=np.full((H, W), far),
            weight_sum=np.zeros((H, W)),
            ctx=None,
        )

    basis = camera.basis()
    eye = np.asarray(camera.eye)
    focal = camera.focal_px

    slices = []
    valid_indices = []
    parts = {
        "t": [], "quat": [], "qnorm": [], "scales2": [], "opac": [], "colors": [],
    }
    start = 0
    for m in model_list:
        t = (m.positions - eye) @ basis.T
        ok = t[:, 2] > camera.near
        idx = np.flatnonzero(ok)
        valid_indices.append(idx)
        count = len(idx)
        slices.append((start, start + count))
        start += count
        if count:
            q = m.rotations[idx]
            qn = np.linalg.norm(q, axis=1)
            parts["t"].append(t[idx])
            parts["quat"].append(q / qn[:, None])
            parts["qnorm"].append(qn)
            parts["scales2"].append(np.exp(2.0 * m.log_scales[idx]))
            parts["opac"].append(sigmoid(m.opacity_logits[idx]))
            parts["colors"].append(m.colors[idx])

    total = start
    if total == 0:
        return RenderOutput(
            rgb=np.zeros((H, W, 3)),
            alpha=np.zeros((H, W)),
            depth=np.full((H, W), far),
            weight_sum=np.zeros((H, W)),
            ctx=None,
        )

    t_cam = np.concatenate(parts["t"])
    quat = np.concatenate(parts["quat"])
    qnorm = np.concatenate(parts["qnorm"])
    scales2 = np.concatenate(parts["scales2"])
    opac = np.concatenate(parts["opac"])
    colors = np.concatenate(parts["colors"])

    depths = t_cam[:, 2]
    order = np.argsort(depths, kind="stable")

    t_cam = t_cam[order]
    quat = quat[order]
    qnorm = qnorm[order]
    scales2 = scales2[order]
    opac = opac[order]
    colors = colors[order]
    depths = depths[order]

    # World covariance R diag(s^2) R^T, then camera frame, then image plane.
    R = quat_to_rotmat(quat)
    cov_world = np.einsum("nij,nj,nkj->nik", R, scales2, R)
    cov_cam = np.einsum("ia,nab,jb->nij", basis, cov_world, basis)

    tz = t_cam[:, 2]
    J = np.zeros((total, 2, 3))
    J[:, 0, 0] = focal / tz
    J[:, 1, 1] = focal / tz
    J[:, 0, 2] = -focal * t_cam[:, 0] / tz**2
    J[:, 1, 2] = -focal * t_cam[:, 1] / tz**2

    cov2d = np.einsum("nia,nab,njb->nij", J, cov_cam, J)
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(det > 1e-300, det, np.inf)  # degenerate splats render nothing
    lam_mat = np.empty_like(cov2d)
    lam_mat[:, 0, 0] = c / det
    lam_mat[:, 0, 1] = -b / det
    lam_mat[:, 1, 0] = -b / det
    lam_mat[:, 1, 1] = a / det

    eig_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radii = 3.0 * np.sqrt(np.maximum(eig_max, 0.0)) + RADIUS_MARGIN_PX

    means2d = np.empty((total, 2))
    means2d[:, 0] = focal * t_cam[:, 0] / tz + 0.5 * W
    means2d[:, 1] = focal * t_cam[:, 1] / tz + 0.5 * H

    lam_packed = np.stack([lam_mat[:, 0, 0], lam_mat[:, 0, 1], lam_mat[:, 1, 1]], axis=1)
    rgb, trans, dep, wsum = _kernels.composite_forward(
        means2d, lam_packed, opac, colors, depths, radii, H, W, far
    )

    ctx = RenderContext(
        camera=camera,
        models=tuple(model_list),
        model_slices=tuple(slices),
        valid_indices=tuple(valid_indices),
        order=order,
        t_cam=t_cam,
        J=J,
        cov_cam=cov_cam,
        lam_mat=lam_mat,
        means2d=means2d,
        radii=radii,
        opac=opac,
        depths=depths,
        trans_final=trans,
        rotations_norm=quat,
        raw_quat_norms=qnorm,
        scales2=scales2,
        rotmats=R,
    )
    return RenderOutput(
        rgb=rgb, alpha=1.0 - trans, depth=dep, weight_sum=wsum, ctx=ctx
    )


def _quat_backward(g_R: np.ndarray, quat_n: np.ndarray, qnorm: np.ndarray) -> np.ndarray:
    """Chain rotation-matrix gradients to raw (unnormalized) quaternions."""
    w, x, y, z = quat_n.T
    G = g_R
    zero = np.zeros_like(w)

    def contract(rows):
        # rows: 3x3 nested list of (N,) entries = dR/dn_k
        out = zero.copy()
        for i in range(3):
            for j in range(3):
                out = out + G[:, i, j] * rows[i][j]
        return out

    dw = contract([
        [zero, -2 * z, 2 * y],
        [2 * z, zero, -2 * x],
        [-2 * y, 2 * x, zero],
    ])
    dx = contract([
        [zero, 2 * y, 2 * z],
        [2 * y, -4 * x, -2 * w],
        [2 * z, 2 * w, -4 * x],
    ])
    dy = contract([
        [-4 * y, 2 * x, 2 * w],
        [2 * x, zero, 2 * z],
        [-2 * w, 2 * z, -4 * y],
    ])
    dz = contract([
        [-4 * z, -2 * w, 2 * x],
        [2 * w, -4 * z, 2 * y],
        [2 * x, 2 * y, zero],
    ])
    g_n = np.stack([dw, dx, dy, dz], axis=1)
    # n = q / |q|: project out the radial component and rescale.
    radial = np.einsum("ni,ni->n", g_n, quat_n)
    return (g_n - radial[:, None] * quat_n) / qnorm[:, None]


def render_backward(
    output: RenderOutput,
    d_rgb: Optional[np.ndarray] = None,
    d_alpha: Optional[np.ndarray] = None,
    d_depth: Optional[np.ndarray] = None,
) -> None:
    """Accumulate parameter gradients into each rendered model's buffers.

    Pixel gradient arrays default to zero; passing all-zero gradients is
    valid and accumulates nothing.
    """
    ctx = output.ctx
    if ctx is None:
        raise RenderError("render_backward without a recorded forward pass")
    camera = ctx.camera
    H, W = camera.height, camera.width
    zeros_hw = np.zeros((H, W))
    d_rgb = np.zeros((H, W, 3)) if d_rgb is None else np.asarray(d_rgb, dtype=np.float64)
    d_alpha = zeros_hw if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    d_depth = zeros_hw if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    if d_rgb.shape != (H, W, 3) or d_alpha.shape != (H, W) or d_depth.shape != (H, W):
        raise RenderError("pixel gradient shapes do not match the render resolution")

    lam_packed = np.stack(
        [ctx.lam_mat[:, 0, 0], ctx.lam_mat[:, 0, 1], ctx.lam_mat[:, 1, 1]], axis=1
    )
    colors_sorted = np.concatenate(
        [m.colors[idx] for m, idx in zip(ctx.models, ctx.valid_indices) if len(idx)]
    )[ctx.order]
    g_mean, g_lam, g_opac, g_color, g_depth_splat = _kernels.composite_backward(
        ctx.means2d, lam_packed, ctx.opac, colors_sorted, ctx.depths, ctx.radii,
        H, W, camera.far, ctx.trans_final, d_rgb, d_alpha, d_depth,
    )

    # Inverse covariance -> 2D covariance. The kernel treats (la, lb, lc) as
    # independent scalars with q = la dx^2 + 2 lb dx dy + lc dy^2, so the
    # symmetric matrix cotangent puts half of the lb gradient on each
    # off-diagonal slot.
    G_lam = np.empty_like(ctx.lam_mat)
    G_lam[:, 0, 0] = g_lam[:, 0]
    G_lam[:, 0, 1] = 0.5 * g_lam[:, 1]
    G_lam[:, 1, 0] = 0.5 * g_lam[:, 1]
    G_lam[:, 1, 1] = g_lam[:, 2]
    L = ctx.lam_mat
    g_cov2d = -np.einsum("nij,njk,nkl->nil", L, G_lam, L)

    # cov2d = J cov_cam J^T
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, ctx.J, ctx.cov_cam)
    g_cov_cam = np.einsum("nji,njk,nkl->nil", ctx.J, g_cov2d, ctx.J)

    basis = camera.basis()
    g_cov_world = np.einsum("ji,njk,kl->nil", basis, g_cov_cam, basis)

    # cov_world = R diag(s2) R^T
    R = ctx.rotmats
    g_R = 2.0 * np.einsum("nij,njk,nk->nik", g_cov_world, R, ctx.scales2)
    g_diag = np.einsum("nji,njk,nki->ni", R, g_cov_world, R)
    g_log_scales = g_diag * 2.0 * ctx.scales2

    g_quat = _quat_backward(g_R, ctx.rotations_norm, ctx.raw_quat_norms)

    # Camera-space center gradients: through the projected mean (its
    # Jacobian is exactly J), through J's own dependence on t, and through
    # the per-splat depth.
    focal = camera.focal_px
    tx, ty, tz = ctx.t_cam.T
    g_t = np.einsum("nji,nj->ni", ctx.J, g_mean)
    g_t[:, 0] += g_J[:, 0, 2] * (-focal / tz**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-focal / tz**2)
    g_t[:, 2] += (
        (g_J[:, 0, 0] + g_J[:, 1, 1]) * (-focal / tz**2)
        + (g_J[:, 0, 2] * tx + g_J[:, 1, 2] * ty) * (2.0 * focal / tz**3)
    )
    g_t[:, 2] += g_depth_splat

    g_pos = g_t @ basis

    o = ctx.opac
    g_logit = g_opac * o * (1.0 - o)

    # Undo the depth sort, then scatter into each model's buffers.
    inv = np.empty_like(ctx.order)
    inv[ctx.order] = np.arange(len(ctx.order))
    per_field = {
        "positions": g_pos[inv],
        "log_scales": g_log_scales[inv],
        "rotations": g_quat[inv],
        "opacity_logits": g_logit[inv],
        "colors": g_color[inv],
    }
    for m, idx, (lo, hi) in zip(ctx.models, ctx.valid_indices, ctx.model_slices):
        if hi == lo:
            continue
        for name, grad in per_field.items():
            m.grads[name][idx] += grad[lo:hi]
