"""Layout boxes: axis-aligned world-space cuboids with the floor at y=0.

Boxes constrain where each object may grow. The 2D projection of a box
under a camera is the binary mask that gates both the layout penalty and
the masked guidance gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from splatscene.errors import LayoutError, LayoutValidationError, ProjectionError

MIN_EXTENT = 1e-3  # meters; thinner boxes count as flat
OVERLAP_IOU_EPS = 1e-6  # treats touching faces as non-overlapping
CONTAINMENT_EPS = 1e-9


@dataclass(frozen=True)
class LayoutBox:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise LayoutError("box corners must be 3-vectors")
        if not np.all(hi > lo):
            raise LayoutError(f"box must satisfy max > min per axis: {self}")

    @classmethod
    def of(cls, lo, hi) -> "LayoutBox":
        return cls(tuple(float(c) for c in lo), tuple(float(c) for c in hi))

    def as_arrays(self):
        return (
            np.asarray(self.min, dtype=np.float64),
            np.asarray(self.max, dtype=np.float64),
        )

    def extents(self) -> np.ndarray:
        lo, hi = self.as_arrays()
        return hi - lo

    def center(self) -> np.ndarray:
        lo, hi = self.as_arrays()
        return 0.5 * (lo + hi)

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents()))

    def volume(self) -> float:
        return float(np.prod(self.extents()))

    def corners(self) -> np.ndarray:
        lo, hi = self.as_arrays()
        xs = (lo[0], hi[0])
        ys = (lo[1], hi[1])
        zs = (lo[2], hi[2])
        return np.array([(x, y, z) for x in xs for y in ys for z in zs])

    def contains_point(self, p) -> bool:
        lo, hi = self.as_arrays()
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def contains_box(self, other: "LayoutBox") -> bool:
        lo, hi = self.as_arrays()
        olo, ohi = other.as_arrays()
        return bool(np.all(olo >= lo - CONTAINMENT_EPS) and np.all(ohi <= hi + CONTAINMENT_EPS))

    def scaled(self, factor: float) -> "LayoutBox":
        """Box scaled about its own center."""
        c = self.center()
        half = 0.5 * self.extents() * factor
        return LayoutBox.of(c - half, c + half)

    def to_json_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}


def intersection_volume(a: LayoutBox, b: LayoutBox) -> float:
    alo, ahi = a.as_arrays()
    blo, bhi = b.as_arrays()
    overlap = np.minimum(ahi, bhi) - np.maximum(alo, blo)
    if np.any(overlap <= 0):
        return 0.0
    return float(np.prod(overlap))


def iou_3d(a: LayoutBox, b: LayoutBox) -> float:
    inter = intersection_volume(a, b)
    union = a.volume() + b.volume() - inter
    return inter / union if union > 0 else 0.0


def union_box(a: LayoutBox, b: LayoutBox) -> LayoutBox:
    """Axis-aligned hull: componentwise min of mins and max of maxes."""
    alo, ahi = a.as_arrays()
    blo, bhi = b.as_arrays()
    return LayoutBox.of(np.minimum(alo, blo), np.maximum(ahi, bhi))


@dataclass(frozen=True)
class LayoutSet:
    boxes: dict  # node id -> LayoutBox

    def __getitem__(self, node_id: str) -> LayoutBox:
        try:
            return self.boxes[node_id]
        except KeyError:
            raise LayoutError(f"no layout box for node '{node_id}'") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.boxes

    def ids(self):
        return sorted(self.boxes)

    def scene_bounds(self) -> LayoutBox:
        boxes = list(self.boxes.values())
        out = boxes[0]
        for b in boxes[1:]:
            out = union_box(out, b)
        return out

    @classmethod
    def from_json_dict(cls, raw: dict) -> "LayoutSet":
        boxes = {}
        for node_id, spec in raw.items():
            boxes[str(node_id)] = LayoutBox.of(spec["min"], spec["max"])
        return cls(boxes=boxes)

    def to_json_dict(self) -> dict:
        return {k: v.to_json_dict() for k, v in sorted(self.boxes.items())}


@dataclass(frozen=True)
class Violation:
    rule: str
    nodes: tuple[str, ...]
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(f"{v.rule}({','.join(v.nodes)})" for v in self.violations)

    def to_json(self) -> str:
        return json.dumps(
            [
                {"rule": v.rule, "nodes": list(v.nodes), "detail": v.detail}
                for v in self.violations
            ],
            indent=2,
        )

    def raise_if_failed(self):
        if not self.ok:
            raise LayoutValidationError(self)


def validate_layout(boxes: LayoutSet, graph) -> ValidationReport:
    """Check floor contact, 3D integrity, and the overlap rules.

    Non-interacting pairs must not overlap (3D IoU above a face-touching
    tolerance); interacting pairs must overlap partially, meaning a nonzero
    intersection with neither box containing the other.
    """
    for node in graph.nodes:
        if node.id not in boxes:
            raise LayoutError(f"no layout box for node '{node.id}'")

    violations: list[Violation] = []
    for node in graph.nodes:
        box = boxes[node.id]
        lo, hi = box.as_arrays()
        if lo[1] < 0:
            violations.append(
                Violation("floor", (node.id,), f"min_y = {lo[1]:.4g} dips below y=0")
            )
        extents = box.extents()
        if np.any(extents < MIN_EXTENT):
            axis = "xyz"[int(np.argmin(extents))]
            violations.append(
                Violation(
                    "integrity",
                    (node.id,),
                    f"extent along {axis} is {extents.min():.4g} m (< {MIN_EXTENT} m)",
                )
            )

    interacting = graph.interacting_pairs()
    ids = [n.id for n in graph.nodes]
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            pair = frozenset((a, b))
            box_a, box_b = boxes[a], boxes[b]
            if pair in interacting:
                inter = intersection_volume(box_a, box_b)
                if inter <= 0:
                    violations.append(
                        Violation(
                            "interaction-overlap",
                            (a, b),
                            "interacting pair has zero 3D overlap",
                        )
                    )
                elif box_a.contains_box(box_b) or box_b.contains_box(box_a):
                    violations.append(
                        Violation(
                            "interaction-overlap",
                            (a, b),
                            "one interacting box entirely contains the other",
                        )
                    )
            else:
                iou = iou_3d(box_a, box_b)
                if iou > OVERLAP_IOU_EPS:
                    violations.append(
                        Violation(
                            "spatial-overlap",
                            (a, b),
                            f"non-interacting pair overlaps with IoU {iou:.3g}",
                        )
                    )
    return ValidationReport(violations=tuple(violations))


# ---------------------------------------------------------------------------
# 2D projection masks
# ---------------------------------------------------------------------------


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def project_box(box: LayoutBox, camera, resolution=None) -> np.ndarray:
    """Binary mask (H, W) uint8: pixels whose centers fall inside the filled
    convex hull of the box's 8 projected corners.

    Raises ProjectionError when the box reaches behind the near plane (the
    projected footprint would be unbounded); callers resample the camera.
    """
    if resolution is None:
        h, w = camera.height, camera.width
    else:
        h, w = int(resolution[0]), int(resolution[1])

    if box.contains_point(camera.eye):
        raise ProjectionError("camera eye is inside the layout box")
    corners = box.corners()
    uv, depth = camera.project(corners)
    # Rescale to the requested mask resolution if it differs from the camera's.
    uv = uv * np.array([w / camera.width, h / camera.height])
    if np.any(depth <= camera.near):
        raise ProjectionError(
            f"box reaches behind the near plane (min depth {depth.min():.4g})"
        )

    hull = _convex_hull_2d(uv)
    mask = np.zeros((h, w), dtype=np.uint8)
    if len(hull) == 0:
        return mask
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    if len(hull) == 1:
        return mask
    if len(hull) == 2:
        return mask  # degenerate edge-on projection covers no pixel centers
    inside = np.ones((h, w), dtype=bool)
    centroid = hull.mean(axis=0)
    n = len(hull)
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        ref = ex * (centroid[1] - ay) - ey * (centroid[0] - ax)
        side = ex * (py - ay) - ey * (px - ax)
        # Interior pixels share the centroid's side of every edge.
        inside &= (side * np.sign(ref)) >= 0 if ref != 0 else side == 0
    mask[inside] = 1
    return mask
