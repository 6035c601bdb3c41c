"""Wire protocol for guidance and refinement providers.

JSON bodies over HTTP. Tensors travel as little-endian row-major float32,
base64 encoded, with explicit shape. Serialization is canonical (sorted
keys, no whitespace) so request bodies are reproducible byte-for-byte.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from splatscene.cameras import Camera
from splatscene.errors import ProtocolError

PROTOCOL_VERSION = "1"
GUIDANCE_PATH = "/v1/guidance"
REFINE_PATH = "/v1/refine"


def encode_tensor(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {
        "shape": [int(s) for s in arr.shape],
        "dtype": "f32",
        "data": base64.b64encode(data).decode("ascii"),
    }


def decode_tensor(obj: dict) -> np.ndarray:
    if not isinstance(obj, dict) or obj.get("dtype") != "f32":
        raise ProtocolError(f"bad tensor encoding: {obj!r:.120}")
    shape = tuple(int(s) for s in obj["shape"])
    raw = base64.b64decode(obj["data"])
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expected:
        raise ProtocolError(
            f"tensor payload is {len(raw)} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def guidance_request_body(rgb, prompt, camera: Camera, timestep: int, tokens, seed=None) -> dict:
    body = {
        "version": PROTOCOL_VERSION,
        "prompt": str(prompt),
        "timestep": int(timestep),
        "camera": camera.to_json_dict(),
        "tokens": [str(t) for t in tokens],
        "rgb": encode_tensor(rgb),
    }
    if seed is not None:
        body["seed"] = int(seed)
    return body


def parse_guidance_response(raw: dict):
    """Validate and decode a guidance response. Returns (grad, attention)."""
    if raw.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version mismatch: got {raw.get('version')!r}, "
            f"supported {PROTOCOL_VERSION!r}"
        )
    grad = decode_tensor(raw["grad"])
    if grad.ndim != 3 or grad.shape[2] != 3:
        raise ProtocolError(f"grad must be (H, W, 3), got {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise ProtocolError("grad tensor contains non-finite values")
    attention = {}
    for token, enc in (raw.get("attention") or {}).items():
        amap = decode_tensor(enc)
        if amap.shape != grad.shape[:2]:
            raise ProtocolError(
                f"attention map for {token!r} has shape {amap.shape}, "
                f"expected {grad.shape[:2]}"
            )
        if not np.all(np.isfinite(amap)):
            raise ProtocolError(f"attention map for {token!r} is non-finite")
        peak = amap.max()
        if peak > 0 and abs(peak - 1.0) > 1e-3:
            raise ProtocolError(
                f"attention map for {token!r} is not max-normalized (max={peak})"
            )
        attention[str(token)] = amap
    return grad, attention


def refine_request_body(rgb, depth, prompt, strength: float, seed=None) -> dict:
    body = {
        "version": PROTOCOL_VERSION,
        "prompt": str(prompt),
        "strength": float(strength),
        "rgb": encode_tensor(rgb),
        "depth": encode_tensor(depth),
    }
    if seed is not None:
        body["seed"] = int(seed)
    return body


def parse_refine_response(raw: dict, expect_shape) -> np.ndarray:
    if raw.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(
            f"protocol version mismatch: got {raw.get('version')!r}, "
            f"supported {PROTOCOL_VERSION!r}"
        )
    rgb = decode_tensor(raw["rgb"])
    if rgb.shape != tuple(expect_shape):
        raise ProtocolError(f"refined rgb shape {rgb.shape} != {tuple(expect_shape)}")
    if not np.all(np.isfinite(rgb)):
        raise ProtocolError("refined rgb contains non-finite values")
    if rgb.min() < -1e-6 or rgb.max() > 1 + 1e-6:
        raise ProtocolError("refined rgb leaves [0, 1]")
    return np.clip(rgb, 0.0, 1.0)
