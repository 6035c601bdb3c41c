"""Compositional 3D scene generation from structured scene descriptions.

A scene is described by a graph of objects and relations plus per-object
layout boxes. Each node is turned into a Gaussian-splat model by gradient
descent against a pluggable guidance provider, meshed by marching cubes,
and assembled into a texture-harmonized scene.
"""

__version__ = "0.1.0"

from splatscene.errors import (
    EngineError,
    ProviderError,
    SceneParseError,
    SceneValidationError,
)

__all__ = [
    "EngineError",
    "ProviderError",
    "SceneParseError",
    "SceneValidationError",
    "__version__",
]
