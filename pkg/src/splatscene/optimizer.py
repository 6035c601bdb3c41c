"""Per-node optimization loops.

Each loop owns its models: sample an orbit camera, render at the scheduled
resolution, ask the provider for guidance at the scheduled timestep, apply
the objective's pixel gradients through the renderer's backward pass, and
take an Adam step per parameter group. Super-nodes run a relation branch
over the union of both members plus an object branch per member, all
sharing one camera per iteration.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from splatscene.cameras import Camera, CameraConfig, sample_camera
from splatscene.errors import EngineError, ProjectionError, ProviderError
from splatscene.guidance import GuidanceProvider, GuidanceRequest
from splatscene.layout import LayoutBox, project_box, union_box
from splatscene.losses import LossWeights, node_objective, supernode_objective
from splatscene.rasterize import render, render_backward
from splatscene.splats import (
    DensifyStats,
    GaussianModel,
    PARAM_FIELDS,
    densify_and_prune,
    init_in_box,
    save_grla,
)


@dataclass(frozen=True)
class Schedule:
    """Iteration schedule: resolution staircase, decaying timesteps, the
    localization warmup, and the densification window."""

    total_iters: int = 3000
    resolutions: tuple = (128, 256, 512)
    resolution_boundaries: tuple = (1000, 2000)
    timestep_start: int = 980
    timestep_end: int = 20
    local_warmup: int = 600
    densify_from: int = 300
    densify_until: int = 2400
    densify_every: int = 100
    checkpoint_every: int = 500
    fixed_resolution: int | None = None

    def __post_init__(self):
        if self.timestep_end > self.timestep_start:
            raise EngineError("timestep schedule must be non-increasing")
        if len(self.resolution_boundaries) != len(self.resolutions) - 1:
            raise EngineError("need one boundary between consecutive resolutions")

    def resolution(self, i: int) -> int:
        if self.fixed_resolution is not None:
            return self.fixed_resolution
        for res, bound in zip(self.resolutions, self.resolution_boundaries):
            if i < bound:
                return res
        return self.resolutions[-1]

    def timestep(self, i: int) -> int:
        if self.total_iters <= 1:
            return self.timestep_start
        frac = i / (self.total_iters - 1)
        return int(round(self.timestep_start + (self.timestep_end - self.timestep_start) * frac))

    def local_active(self, i: int) -> bool:
        return i >= self.local_warmup

    def densify_due(self, i: int) -> bool:
        return (
            self.densify_from <= i <= self.densify_until
            and i % self.densify_every == 0
            and i > 0
        )

    def to_json_dict(self) -> dict:
        return {
            "total_iters": self.total_iters,
            "resolutions": list(self.resolutions),
            "resolution_boundaries": list(self.resolution_boundaries),
            "timestep_start": self.timestep_start,
            "timestep_end": self.timestep_end,
            "local_warmup": self.local_warmup,
            "densify_from": self.densify_from,
            "densify_until": self.densify_until,
            "densify_every": self.densify_every,
            "checkpoint_every": self.checkpoint_every,
            "fixed_resolution": self.fixed_resolution,
        }


@dataclass(frozen=True)
class OptimizeConfig:
    n_init: int = 256
    weights: LossWeights = field(default_factory=LossWeights)
    lr_position_scale: float = 1.6e-4   # multiplied by the box diagonal
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    camera: CameraConfig = field(default_factory=CameraConfig)
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    max_scale_fraction: float = 0.05    # log-scale clamp, keeps meshes inside boxes
    max_splats: int = 4000
    unmask_guidance: bool = False       # ablation: guidance gate forced to all-ones

    def learning_rates(self, box_diagonal: float) -> dict:
        return {
            "positions": self.lr_position_scale * box_diagonal,
            "log_scales": self.lr_log_scale,
            "rotations": self.lr_rotation,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_color,
        }

    def to_json_dict(self) -> dict:
        return {
            "n_init": self.n_init,
            "weights": {
                "guidance": self.weights.guidance,
                "layout": self.weights.layout,
                "localization": self.weights.localization,
            },
            "lr_position_scale": self.lr_position_scale,
            "lr_log_scale": self.lr_log_scale,
            "lr_rotation": self.lr_rotation,
            "lr_opacity": self.lr_opacity,
            "lr_color": self.lr_color,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "camera": {
                "fov_deg": self.camera.fov_deg,
                "distance_factor": self.camera.distance_factor,
                "elevation_deg": list(self.camera.elevation_deg),
            },
            "densify_grad_threshold": self.densify_grad_threshold,
            "prune_opacity": self.prune_opacity,
            "max_scale_fraction": self.max_scale_fraction,
            "max_splats": self.max_splats,
        }


class AdamState:
    """Per-parameter-group first and second moment estimates."""

    def __init__(self, model: GaussianModel, lrs: dict, beta1: float, beta2: float, eps: float):
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(getattr(model, name)) for name in PARAM_FIELDS}
        self.v = {name: np.zeros_like(getattr(model, name)) for name in PARAM_FIELDS}

    def step(self, model: GaussianModel):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name in PARAM_FIELDS:
            g = model.grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            param = getattr(model, name)
            param -= self.lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)

    def resize(self, keep_mask: np.ndarray, n_new: int):
        """Carry moments for surviving splats, zero-init appended ones."""
        for name in PARAM_FIELDS:
            for store in (self.m, self.v):
                old = store[name][keep_mask]
                pad_shape = (n_new,) + old.shape[1:]
                store[name] = np.concatenate([old, np.zeros(pad_shape)])


class RunLogger:
    """JSON-lines iteration log. Content is deterministic (no wall time)."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def log(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _post_step(model: GaussianModel, box: LayoutBox, max_scale_fraction: float):
    """Projection steps after Adam: colors to [0,1], scales below the cap."""
    np.clip(model.colors, 0.0, 1.0, out=model.colors)
    cap = np.log(max_scale_fraction * box.diagonal())
    np.clip(model.log_scales, None, cap, out=model.log_scales)


def _sample_view(rng, box, cam_config: CameraConfig, resolution: int) -> Camera:
    cfg = replace(cam_config, resolution=resolution)
    return sample_camera(rng, box, cfg)


def _project_with_resample(rng, box, cam_box, cam_config, resolution):
    """Sample cameras until the target box projects cleanly (typically the
    first try; resampling only triggers for extreme layouts)."""
    for _ in range(64):
        camera = _sample_view(rng, cam_box, cam_config, resolution)
        try:
            return camera, project_box(box, camera)
        except ProjectionError:
            continue
    raise EngineError("could not sample a camera with a valid box projection")


def _write_checkpoint(run_dir, tag: str, models):
    if run_dir is None:
        return
    os.makedirs(run_dir, exist_ok=True)
    for m in models:
        suffix = f"-{m.node_id}" if len(models) > 1 else ""
        save_grla(m, os.path.join(run_dir, f"{tag}{suffix}.grla"))


def optimize_single(
    node_id: str,
    prompt: str,
    box: LayoutBox,
    provider: GuidanceProvider,
    schedule: Schedule,
    config: OptimizeConfig,
    seed: int,
    run_dir=None,
    logger: RunLogger | None = None,
) -> GaussianModel:
    """Optimize one single-object node inside its box."""
    rng = np.random.default_rng(seed)
    model = init_in_box(box, config.n_init, seed=seed, node_id=node_id)
    opt = AdamState(
        model, config.learning_rates(box.diagonal()),
        config.adam_beta1, config.adam_beta2, config.adam_eps,
    )
    stats = DensifyStats.zeros(len(model))
    own_logger = logger is None
    logger = logger or RunLogger(os.path.join(run_dir, "log.jsonl") if run_dir else None)

    try:
        for i in range(schedule.total_iters):
            res = schedule.resolution(i)
            camera, mask = _project_with_resample(rng, box, box, config.camera, res)
            out = render(model, camera)
            request = GuidanceRequest(
                rgb=np.clip(out.rgb, 0.0, 1.0),
                prompt=prompt,
                camera=camera,
                timestep=schedule.timestep(i),
                tokens=(),
            )
            response = provider(request)
            gmask = np.ones_like(mask) if config.unmask_guidance else None
            breakdown, grads = node_objective(
                out, mask, response, weights=config.weights, guidance_mask=gmask
            )

            model.zero_grads()
            render_backward(out, d_rgb=grads.d_rgb, d_alpha=grads.d_alpha)
            stats.accumulate(model.grads["positions"])
            opt.step(model)
            _post_step(model, box, config.max_scale_fraction)

            logger.log({
                "iteration": i,
                "resolution": res,
                "timestep": schedule.timestep(i),
                "local_active": False,
                "n_splats": len(model),
                **breakdown.to_json_dict(),
            })

            if schedule.densify_due(i):
                model, keep, n_new = densify_and_prune(
                    model, stats, box, rng,
                    grad_threshold=config.densify_grad_threshold,
                    prune_opacity=config.prune_opacity,
                    max_new=max(config.max_splats - len(model), 0) // 2,
                )
                opt.resize(keep, n_new)
                stats = DensifyStats.zeros(len(model))

            if schedule.checkpoint_every and (i + 1) % schedule.checkpoint_every == 0:
                _write_checkpoint(run_dir, f"ckpt-{i + 1:06d}", [model])
    except ProviderError:
        _write_checkpoint(run_dir, "ckpt-aborted", [model])
        raise
    finally:
        if own_logger:
            logger.close()

    if run_dir is not None:
        _write_checkpoint(run_dir, "final", [model])
    return model


def optimize_super(
    super_id: str,
    relation_prompt: str,
    members,                       # two dicts: {node_id, prompt, token, box}
    provider: GuidanceProvider,
    schedule: Schedule,
    config: OptimizeConfig,
    seed: int,
    run_dir=None,
    logger: RunLogger | None = None,
):
    """Jointly optimize an interacting pair.

    Per iteration, one shared camera serves three branches: the relation
    branch renders the union of both models against the union box mask with
    the relation prompt; each object branch renders its model alone against
    its own box mask with its own prompt. Attention maps for the members'
    tokens are requested on the relation branch (they describe the union
    image) once the warmup has passed, and feed each member's localization
    term.
    """
    if len(members) != 2:
        raise EngineError("super-node optimization needs exactly two members")
    rng = np.random.default_rng(seed)
    boxes = [m["box"] for m in members]
    ubox = union_box(boxes[0], boxes[1])
    models = [
        init_in_box(m["box"], config.n_init, seed=seed + 1 + k, node_id=m["node_id"])
        for k, m in enumerate(members)
    ]
    opts = [
        AdamState(models[k], config.learning_rates(boxes[k].diagonal()),
                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        for k in range(2)
    ]
    stats = [DensifyStats.zeros(len(m)) for m in models]
    own_logger = logger is None
    logger = logger or RunLogger(os.path.join(run_dir, "log.jsonl") if run_dir else None)

    try:
        for i in range(schedule.total_iters):
            res = schedule.resolution(i)
            local_on = schedule.local_active(i) and config.weights.localization != 0.0
            camera, union_mask = _project_with_resample(rng, ubox, ubox, config.camera, res)
            member_masks = [project_box(b, camera) for b in boxes]

            union_out = render(models, camera)
            tokens = tuple(m["token"] for m in members) if local_on else ()
            union_resp = provider(GuidanceRequest(
                rgb=np.clip(union_out.rgb, 0.0, 1.0),
                prompt=relation_prompt,
                camera=camera,
                timestep=schedule.timestep(i),
                tokens=tokens,
            ))

            member_outs = [render(models[k], camera) for k in range(2)]
            member_resps = [
                provider(GuidanceRequest(
                    rgb=np.clip(member_outs[k].rgb, 0.0, 1.0),
                    prompt=members[k]["prompt"],
                    camera=camera,
                    timestep=schedule.timestep(i),
                    tokens=(),
                ))
                for k in range(2)
            ]

            attns = [None, None]
            if local_on:
                for k in range(2):
                    token = members[k]["token"]
                    if token not in union_resp.attention:
                        raise ProviderError(
                            f"provider returned no attention map for token "
                            f"'{token}' after the localization warmup"
                        )
                    attns[k] = union_resp.attention[token]

            breakdown, union_grads, member_grads = supernode_objective(
                union_out, union_mask, union_resp,
                member_outs, member_masks, member_resps, attns,
                weights=config.weights,
            )

            for m in models:
                m.zero_grads()
            render_backward(union_out, d_rgb=union_grads.d_rgb, d_alpha=union_grads.d_alpha)
            for k in range(2):
                render_backward(
                    member_outs[k], d_rgb=member_grads[k].d_rgb,
                    d_alpha=member_grads[k].d_alpha,
                )
            for k in range(2):
                stats[k].accumulate(models[k].grads["positions"])
                opts[k].step(models[k])
                _post_step(models[k], boxes[k], config.max_scale_fraction)

            record = {
                "iteration": i,
                "resolution": res,
                "timestep": schedule.timestep(i),
                "local_active": bool(local_on),
                "n_splats": [len(m) for m in models],
                **breakdown.to_json_dict(),
            }
            logger.log(record)

            if schedule.densify_due(i):
                for k in range(2):
                    models[k], keep, n_new = densify_and_prune(
                        models[k], stats[k], boxes[k], rng,
                        grad_threshold=config.densify_grad_threshold,
                        prune_opacity=config.prune_opacity,
                        max_new=max(config.max_splats - len(models[k]), 0) // 2,
                    )
                    opts[k].resize(keep, n_new)
                    stats[k] = DensifyStats.zeros(len(models[k]))

            if schedule.checkpoint_every and (i + 1) % schedule.checkpoint_every == 0:
                _write_checkpoint(run_dir, f"ckpt-{i + 1:06d}", models)
    except ProviderError:
        _write_checkpoint(run_dir, "ckpt-aborted", models)
        raise
    finally:
        if own_logger:
            logger.close()

    if run_dir is not None:
        _write_checkpoint(run_dir, "final", models)
    return models[0], models[1]
