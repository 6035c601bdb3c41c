"""Guidance providers: the contract, the procedural mock, the HTTP client.

A provider maps a rendered view plus prompt to a per-pixel gradient field
(the direction the image should move) and, when asked, per-token attention
maps. The mock oracle ray-casts a reference scene of colored primitives
and pulls the render toward it with an L2 residual; attention maps are the
primitives' silhouettes. That is enough structure to exercise every loss
and schedule offline.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

from splatscene.cameras import Camera
from splatscene.errors import ProtocolError, ProviderError
from splatscene import wire


@dataclass(frozen=True)
class GuidanceRequest:
    rgb: np.ndarray          # (H, W, 3) in [0, 1]
    prompt: str
    camera: Camera
    timestep: int
    tokens: tuple = ()

    def __post_init__(self):
        if not (1 <= int(self.timestep) <= 1000):
            raise ProviderError(f"timestep {self.timestep} outside [1, 1000]")
        rgb = np.asarray(self.rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ProviderError(f"request rgb must be (H, W, 3), got {rgb.shape}")
        if rgb.min() < -1e-9 or rgb.max() > 1 + 1e-9:
            raise ProviderError("request rgb must lie in [0, 1]")


@dataclass
class GuidanceResponse:
    grad: np.ndarray                  # (H, W, 3)
    attention: dict = field(default_factory=dict)  # token -> (H, W) in [0, 1]
    warnings: tuple = ()


class GuidanceProvider:
    """Deterministic request -> response function with a stable identity."""

    name = "provider"

    def config_hash(self) -> str:
        return "0"

    @property
    def identity(self) -> str:
        return f"{self.name}:{self.config_hash()}"

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Reference scenes and the mock oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    token: str
    kind: str                   # "ellipsoid" | "box"
    center: tuple
    size: tuple                 # radii for ellipsoids, full extents for boxes
    color: tuple

    def __post_init__(self):
        if self.kind not in ("ellipsoid", "box"):
            raise ProviderError(f"unknown primitive kind '{self.kind}'")


@dataclass(frozen=True)
class ReferenceScene:
    """Known prompts rendered procedurally: a list of colored primitives."""

    primitives: tuple

    @classmethod
    def from_json(cls, text: str) -> "ReferenceScene":
        items = json.loads(text)
        prims = []
        for it in items:
            size = it.get("radii") or it.get("extents")
            prims.append(
                Primitive(
                    token=str(it["token"]),
                    kind=str(it["kind"]),
                    center=tuple(float(c) for c in it["center"]),
                    size=tuple(float(c) for c in size),
                    color=tuple(float(c) for c in it["color"]),
                )
            )
        return cls(primitives=tuple(prims))

    @classmethod
    def from_file(cls, path) -> "ReferenceScene":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_json(self) -> str:
        items = []
        for p in self.primitives:
            key = "radii" if p.kind == "ellipsoid" else "extents"
            items.append(
                {"token": p.token, "kind": p.kind, "center": list(p.center),
                 key: list(p.size), "color": list(p.color)}
            )
        return json.dumps(items, indent=2)

    def tokens(self):
        return sorted({p.token for p in self.primitives})

    def matching(self, prompt: str):
        """Primitives whose token occurs in the prompt as a whole phrase."""
        low = prompt.lower()
        out = []
        for p in self.primitives:
            if re.search(rf"\b{re.escape(p.token.lower())}\b", low):
                out.append(p)
        return out

    def for_token(self, token: str):
        return [p for p in self.primitives if p.token == token]


def _pixel_rays(camera: Camera):
    """Unit ray directions through every pixel center, in world space."""
    h, w = camera.height, camera.width
    f = camera.focal_px
    xs = (np.arange(w) + 0.5 - 0.5 * w) / f
    ys = (np.arange(h) + 0.5 - 0.5 * h) / f
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    dirs = dirs_cam @ camera.basis()  # rows of basis are the camera axes
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def _intersect_ellipsoid(origin, dirs, center, radii):
    """Smallest positive ray parameter per pixel, inf when missed."""
    o = (origin - np.asarray(center)) / np.asarray(radii)
    d = dirs / np.asarray(radii)
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(o * d, axis=-1)
    c = float(np.dot(o, o)) - 1.0
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where(hit & (t > 0), t, np.inf)


def _intersect_box(origin, dirs, center, extents):
    half = 0.5 * np.asarray(extents)
    lo = np.asarray(center) - half
    hi = np.asarray(center) + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
    hit = (t_far >= t_near) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)
    return np.where(hit & (t > 0), t, np.inf)


def raycast_reference(primitives, camera: Camera):
    """Nearest-hit render of primitives on black plus per-primitive masks."""
    h, w = camera.height, camera.width
    origin = np.asarray(camera.eye, dtype=np.float64)
    dirs = _pixel_rays(camera)
    best_t = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    masks = []
    for p in primitives:
        if p.kind == "ellipsoid":
            t = _intersect_ellipsoid(origin, dirs, p.center, p.size)
        else:
            t = _intersect_box(origin, dirs, p.center, p.size)
        mask = np.isfinite(t)
        masks.append(mask)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        rgb[closer] = np.asarray(p.color)
    return rgb, masks


def token_silhouette(scene: ReferenceScene, token: str, camera: Camera) -> np.ndarray:
    """Union of the token's primitive hit masks, ignoring occlusion."""
    prims = scene.for_token(token)
    h, w = camera.height, camera.width
    out = np.zeros((h, w))
    if not prims:
        return out
    _, masks = raycast_reference(prims, camera)
    for m in masks:
        out = np.maximum(out, m.astype(np.float64))
    return out


class MockOracleProvider(GuidanceProvider):
    """L2 pull toward a procedural target render.

    grad is the gradient of 0.5 * ||rgb - target||^2 with respect to rgb,
    so a small step against it always reduces the distance. Attention maps
    are the binary silhouettes of each requested token's primitives.
    Prompts that match no primitive produce zero gradient plus a warning.
    """

    name = "mock"

    def __init__(self, reference: ReferenceScene, seed: int = 0):
        self.reference = reference
        self.seed = seed

    def config_hash(self) -> str:
        payload = self.reference.to_json().encode() + str(self.seed).encode()
        return hashlib.sha256(payload).hexdigest()[:12]

    def target_image(self, prompt: str, camera: Camera):
        prims = self.reference.matching(prompt)
        if not prims:
            return None
        rgb, _ = raycast_reference(prims, camera)
        return rgb

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        rgb = np.asarray(request.rgb, dtype=np.float64)
        target = self.target_image(request.prompt, request.camera)
        warnings = ()
        if target is None:
            grad = np.zeros_like(rgb)
            warnings = (f"unknown prompt: {request.prompt!r}",)
            attention = {}
        else:
            grad = rgb - target
            attention = {
                tok: token_silhouette(self.reference, tok, request.camera)
                for tok in request.tokens
            }
        return GuidanceResponse(grad=grad, attention=attention, warnings=warnings)


# ---------------------------------------------------------------------------
# Remote provider
# ---------------------------------------------------------------------------


class RemoteGuidanceProvider(GuidanceProvider):
    """HTTP client for a guidance bridge implementing the wire protocol."""

    name = "remote"

    def __init__(self, endpoint: str, seed: int = 0, timeout: float = 120.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.seed = seed
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def config_hash(self) -> str:
        return hashlib.sha256(f"{self.endpoint}:{self.seed}".encode()).hexdigest()[:12]

    def serialize_request(self, request: GuidanceRequest) -> bytes:
        body = wire.guidance_request_body(
            request.rgb, request.prompt, request.camera, request.timestep,
            request.tokens, seed=self.seed,
        )
        return wire.canonical_json(body)

    def __call__(self, request: GuidanceRequest) -> GuidanceResponse:
        url = self.endpoint + wire.GUIDANCE_PATH
        try:
            resp = self._session.post(
                url,
                data=self.serialize_request(request),
                headers={"Content-Type": "application/json"},
                timeout=self.timeout,
            )
        except Exception as e:  # transport layer
            raise ProviderError(f"guidance transport failure: {e}") from e
        if resp.status_code != 200:
            raise ProviderError(
                f"guidance endpoint returned {resp.status_code}: {resp.text[:200]}"
            )
        try:
            raw = resp.json()
        except ValueError as e:
            raise ProtocolError(f"guidance response is not JSON: {e}") from e
        grad, attention = wire.parse_guidance_response(raw)
        h, w = request.camera.height, request.camera.width
        if grad.shape != (h, w, 3):
            raise ProtocolError(f"grad shape {grad.shape} != {(h, w, 3)}")
        return GuidanceResponse(grad=grad, attention=attention)
