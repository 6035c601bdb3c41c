"""Per-node Gaussian splat models.

Parameters are stored struct-of-arrays in float64: positions, log scales,
quaternions (scalar-first, normalized on use), opacity logits (sigmoid on
use) and RGB colors. Gradient buffers mirror the parameter arrays and are
filled by the renderer's backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from splatscene.errors import EngineError
from splatscene.layout import LayoutBox

GRLA_MAGIC = b"GRLA"
GRLA_VERSION = 1

PARAM_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")
_FIELD_WIDTH = {"positions": 3, "log_scales": 3, "rotations": 4, "opacity_logits": 1, "colors": 3}

INIT_OPACITY = 0.1
INIT_SCALE_FRACTION = 0.02  # isotropic stddev as a fraction of the box diagonal
INIT_COLOR_RANGE = (0.3, 0.7)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return float(np.log(p / (1.0 - p)))


@dataclass
class GaussianModel:
    node_id: str
    positions: np.ndarray      # (N, 3)
    log_scales: np.ndarray     # (N, 3)
    rotations: np.ndarray      # (N, 4) scalar-first quaternions
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) in [0, 1]
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.positions)
        if n == 0:
            raise EngineError(f"model '{self.node_id}' initialized with zero splats")
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise EngineError(f"model '{self.node_id}' has non-finite {name}")
        if not self.grads:
            self.zero_grads()

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def zero_grads(self):
        for name in PARAM_FIELDS:
            self.grads[name] = np.zeros_like(getattr(self, name))

    def copy(self) -> "GaussianModel":
        return GaussianModel(
            node_id=self.node_id,
            **{name: getattr(self, name).copy() for name in PARAM_FIELDS},
        )

    def equals(self, other: "GaussianModel") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in PARAM_FIELDS
        )


def init_in_box(box: LayoutBox, n: int, seed: int, node_id: str = "node") -> GaussianModel:
    """Seeded uniform initialization inside a layout box.

    Positions are uniform in the box, scales isotropic at 2% of the box
    diagonal, opacity starts at 0.1 and colors are mid-range so guidance can
    pull them either way.
    """
    if n < 1:
        raise EngineError("need at least one splat")
    rng = np.random.default_rng(seed)
    lo, hi = box.as_arrays()
    positions = rng.uniform(lo, hi, size=(n, 3))
    stddev = INIT_SCALE_FRACTION * box.diagonal()
    log_scales = np.full((n, 3), np.log(stddev))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, logit(INIT_OPACITY))
    colors = rng.uniform(*INIT_COLOR_RANGE, size=(n, 3))
    return GaussianModel(
        node_id=node_id,
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=opacity_logits,
        colors=colors,
    )


def save_grla(model: GaussianModel, path):
    """Flat little-endian binary: magic, version u32, count u32, then one
    contiguous float32 array per field in declared order."""
    n = len(model)
    with open(path, "wb") as f:
        f.write(GRLA_MAGIC)
        f.write(struct.pack("<II", GRLA_VERSION, n))
        for name in PARAM_FIELDS:
            arr = np.ascontiguousarray(getattr(model, name), dtype="<f4")
            f.write(arr.tobytes())


def load_grla(path, node_id: str | None = None) -> GaussianModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != GRLA_MAGIC:
            raise EngineError(f"{path}: bad magic {magic!r}")
        version, n = struct.unpack("<II", f.read(8))
        if version != GRLA_VERSION:
            raise EngineError(f"{path}: unsupported version {version}")
        fields = {}
        for name in PARAM_FIELDS:
            width = _FIELD_WIDTH[name]
            data = f.read(4 * width * n)
            arr = np.frombuffer(data, dtype="<f4").astype(np.float64)
            fields[name] = arr.reshape(n, width) if width > 1 else arr
    if node_id is None:
        import os

        node_id = os.path.splitext(os.path.basename(str(path)))[0]
    return GaussianModel(node_id=node_id, **fields)


# ---------------------------------------------------------------------------
# Density control
# ---------------------------------------------------------------------------

DENSIFY_GRAD_THRESHOLD = 2e-4
PRUNE_OPACITY = 0.005
SPLIT_SCALE_FRACTION = 0.01  # of the box diagonal; larger splats split
SPLIT_CHILD_SCALE = 0.8
CLONE_JITTER = 0.05


@dataclass
class DensifyStats:
    """Running mean of positional-gradient norms between densify events."""

    grad_norm_sum: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_norm_sum=np.zeros(n), count=0)

    def accumulate(self, position_grads: np.ndarray):
        self.grad_norm_sum += np.linalg.norm(position_grads, axis=1)
        self.count += 1

    def mean_norms(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self.grad_norm_sum)
        return self.grad_norm_sum / self.count


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Normalized scalar-first quaternions (N,4) -> rotation matrices (N,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = (q / norm).T
    return np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def densify_and_prune(
    model: GaussianModel,
    stats: DensifyStats,
    box: LayoutBox,
    rng: np.random.Generator,
    grad_threshold: float = DENSIFY_GRAD_THRESHOLD,
    prune_opacity: float = PRUNE_OPACITY,
    max_new: int | None = None,
):
    """Clone small high-gradient splats, split large ones, prune faint ones.

    Returns (model, keep_mask, n_new) where keep_mask covers the original
    splats (so optimizer state can be carried over) and n_new counts the
    appended children.

    Splitting replaces the parent with two children sampled inside the
    parent's own footprint at 0.8x scale; cloning appends a jittered copy.
    When max_new bounds growth, the highest-gradient candidates win. If
    everything would be pruned the single most opaque splat survives.
    """
    mean_norms = stats.mean_norms()
    opacities = model.opacities
    diag = box.diagonal()

    keep = opacities >= prune_opacity
    hot = mean_norms > grad_threshold
    if max_new is not None and max_new < int(np.sum(hot & keep)):
        ranked = np.argsort(-mean_norms, kind="stable")
        allowed = np.zeros(len(model), dtype=bool)
        budget = max(max_new, 0)
        for i in ranked:
            if budget == 0:
                break
            if hot[i] and keep[i]:
                allowed[i] = True
                budget -= 1
        hot = allowed
    max_scale = model.scales.max(axis=1)
    split = hot & (max_scale > SPLIT_SCALE_FRACTION * diag)
    clone = hot & ~split
    # Splitting consumes the parent.
    keep_after_split = keep & ~split

    new_fields = {name: [] for name in PARAM_FIELDS}

    def append(positions, log_scales, rotations, opacity_logits, colors):
        new_fields["positions"].append(positions)
        new_fields["log_scales"].append(log_scales)
        new_fields["rotations"].append(rotations)
        new_fields["opacity_logits"].append(opacity_logits)
        new_fields["colors"].append(colors)

    clone_idx = np.flatnonzero(clone & keep)
    for i in clone_idx:
        offset = rng.normal(0.0, CLONE_JITTER, size=3) * model.scales[i]
        append(
            model.positions[i] + offset,
            model.log_scales[i].copy(),
            model.rotations[i].copy(),
            model.opacity_logits[i],
            model.colors[i].copy(),
        )

    split_idx = np.flatnonzero(split & keep)
    for i in split_idx:
        rot = quat_to_rotmat(model.rotations[i][None])[0]
        for _ in range(2):
            local = rng.normal(0.0, 1.0, size=3) * model.scales[i]
            append(
                model.positions[i] + rot @ local,
                model.log_scales[i] + np.log(SPLIT_CHILD_SCALE),
                model.rotations[i].copy(),
                model.opacity_logits[i],
                model.colors[i].copy(),
            )

    n_new = len(new_fields["positions"])
    if not np.any(keep_after_split) and n_new == 0:
        # Degenerate model: keep the strongest survivor and report it.
        import warnings

        warnings.warn(
            f"model '{model.node_id}' would be fully pruned; "
            "keeping the most opaque splat",
            stacklevel=2,
        )
        keep_after_split = np.zeros(len(model), dtype=bool)
        keep_after_split[int(np.argmax(opacities))] = True

    merged = {}
    for name in PARAM_FIELDS:
        old = getattr(model, name)[keep_after_split]
        if n_new:
            stacked = np.stack(new_fields[name]) if old.ndim > 1 else np.asarray(new_fields[name])
            merged[name] = np.concatenate([old, stacked])
        else:
            merged[name] = old.copy()

    out = GaussianModel(node_id=model.node_id, **merged)
    return out, keep_after_split, n_new
