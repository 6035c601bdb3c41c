"""Differentiable image-space losses over renders, masks and guidance.

All scalar losses are means over pixels so the resolution ramp does not
rescale effective learning rates. The guidance term has no natural scalar;
its applied gradient is the provider field gated by the layout mask, and
the logged scalar is only a magnitude surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from splatscene.errors import EngineError
from splatscene.guidance import GuidanceResponse
from splatscene.rasterize import RenderOutput


@dataclass(frozen=True)
class LossWeights:
    guidance: float = 1.0
    layout: float = 10.0
    localization: float = 1.0


@dataclass
class LossBreakdown:
    layout: float
    masked_guidance: float      # logging surrogate, never differentiated
    localization: float | None
    total: float
    weights: LossWeights

    def to_json_dict(self) -> dict:
        out = {
            "layout": self.layout,
            "masked_guidance": self.masked_guidance,
            "total": self.total,
        }
        if self.localization is not None:
            out["localization"] = self.localization
        return out


@dataclass
class PixelGrads:
    d_rgb: np.ndarray
    d_alpha: np.ndarray


def _check_mask(image_shape, mask):
    mask = np.asarray(mask)
    if mask.shape != tuple(image_shape):
        raise EngineError(f"mask shape {mask.shape} != image shape {tuple(image_shape)}")
    return mask.astype(np.float64)


def layout_loss(alpha: np.ndarray, mask: np.ndarray):
    """Mean alpha mass outside the mask; zero iff alpha vanishes there.

    Returns (value, d_alpha). alpha is non-negative so the L1 penalty is
    linear with constant gradient (1 - M) / (H * W).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    m = _check_mask(alpha.shape, mask)
    inv = 1.0 - m
    n = alpha.size
    value = float(np.sum(alpha * inv) / n)
    return value, inv / n


def masked_guidance(grad: np.ndarray, mask: np.ndarray):
    """Gate the provider gradient by the layout mask.

    Returns (applied (H,W,3), surrogate scalar). The surrogate is the mean
    absolute gated gradient, for logs only.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 3 or grad.shape[2] != 3:
        raise EngineError(f"guidance grad must be (H, W, 3), got {grad.shape}")
    m = _check_mask(grad.shape[:2], mask)
    applied = grad * m[:, :, None]
    return applied, float(np.mean(np.abs(applied)))


def localization_loss(alpha: np.ndarray, attn: np.ndarray):
    """Mean squared gap between rendered alpha and the token attention map."""
    alpha = np.asarray(alpha, dtype=np.float64)
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != alpha.shape:
        raise EngineError(f"attention shape {attn.shape} != alpha shape {alpha.shape}")
    diff = alpha - attn
    n = alpha.size
    value = float(np.sum(diff * diff) / n)
    return value, 2.0 * diff / n


def node_objective(
    render: RenderOutput,
    mask: np.ndarray,
    guidance: GuidanceResponse,
    attn: np.ndarray | None = None,
    weights: LossWeights = LossWeights(),
    guidance_mask: np.ndarray | None = None,
):
    """Per-node objective: gated guidance plus layout, plus localization
    when an attention map is supplied (the super-node object branch).

    Returns (LossBreakdown, PixelGrads). With localization off the code
    path is identical to the plain single-node objective. guidance_mask
    overrides the gate on the guidance term alone (ablation instrument);
    the layout term always uses the box mask.
    """
    applied, surrogate = masked_guidance(
        guidance.grad, mask if guidance_mask is None else guidance_mask
    )
    lay_val, lay_grad = layout_loss(render.alpha, mask)

    w = weights
    d_rgb = w.guidance * applied
    d_alpha = w.layout * lay_grad
    total = w.guidance * surrogate + w.layout * lay_val
    loc_val = None
    if attn is not None and w.localization != 0.0:
        loc_val, loc_grad = localization_loss(render.alpha, attn)
        d_alpha = d_alpha + w.localization * loc_grad
        total += w.localization * loc_val

    breakdown = LossBreakdown(
        layout=lay_val,
        masked_guidance=surrogate,
        localization=loc_val,
        total=total,
        weights=w,
    )
    return breakdown, PixelGrads(d_rgb=d_rgb, d_alpha=d_alpha)


@dataclass
class SupernodeBreakdown:
    interaction: LossBreakdown
    members: tuple
    total: float

    def to_json_dict(self) -> dict:
        return {
            "interaction": self.interaction.to_json_dict(),
            "members": [m.to_json_dict() for m in self.members],
            "total": self.total,
        }


def supernode_objective(
    union_render: RenderOutput,
    union_mask: np.ndarray,
    union_guidance: GuidanceResponse,
    member_renders,
    member_masks,
    member_guidances,
    member_attns,
    weights: LossWeights = LossWeights(),
):
    """Joint objective: interaction branch over the union render plus one
    object branch per member.

    Returns (SupernodeBreakdown, union PixelGrads, [member PixelGrads]).
    Union-branch gradients reach both models through the union render;
    member-branch gradients stay with their own model. Member order is
    irrelevant to the total.
    """
    if not (len(member_renders) == len(member_masks) == len(member_guidances) == len(member_attns) == 2):
        raise EngineError("super-node objective needs exactly two members")

    int_breakdown, union_grads = node_objective(
        union_render, union_mask, union_guidance, attn=None, weights=weights
    )
    member_breakdowns = []
    member_grads = []
    for render_i, mask_i, guide_i, attn_i in zip(
        member_renders, member_masks, member_guidances, member_attns
    ):
        bd, pg = node_objective(render_i, mask_i, guide_i, attn=attn_i, weights=weights)
        member_breakdowns.append(bd)
        member_grads.append(pg)

    total = int_breakdown.total + sum(bd.total for bd in member_breakdowns)
    breakdown = SupernodeBreakdown(
        interaction=int_breakdown,
        members=tuple(member_breakdowns),
        total=total,
    )
    return breakdown, union_grads, member_grads
