"""Exception taxonomy shared across the engine.

The CLI maps these onto exit codes: validation failures exit 2, provider
failures exit 3, anything else exits 4.
"""


class EngineError(Exception):
    """Base class for all engine errors."""


class SceneParseError(EngineError):
    """Malformed scene document. Carries position info when available."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class SceneValidationError(EngineError):
    """Structurally valid input that violates a scene-graph invariant."""


class UnsupportedInteractionChainError(SceneValidationError):
    """Interaction component with three or more members (unsupported)."""

    def __init__(self, node_ids):
        super().__init__(
            "interaction chains of 3+ objects are not supported: "
            + ", ".join(sorted(node_ids))
        )
        self.node_ids = tuple(sorted(node_ids))


class LayoutError(EngineError):
    """Missing or unusable layout data (distinct from rule violations)."""


class LayoutValidationError(EngineError):
    """Layout rule violations. Carries the full report."""

    def __init__(self, report):
        super().__init__(f"layout validation failed: {report.summary()}")
        self.report = report


class ProjectionError(EngineError):
    """Box cannot be projected for this camera (behind/through near plane)."""


class ProviderError(EngineError):
    """Guidance or refiner provider failure."""


class UnparseableReplyError(ProviderError):
    """LLM reply could not be parsed. Keeps the raw reply for inspection."""

    def __init__(self, message, raw_reply):
        super().__init__(f"{message}; raw reply preserved on .raw_reply")
        self.raw_reply = raw_reply


class ProtocolError(ProviderError):
    """Wire-protocol violation (version mismatch, bad payload)."""


class RenderError(EngineError):
    """Renderer contract violation (e.g. backward without forward)."""


class MeshingError(EngineError):
    """Mesh extraction or texture baking failure."""


class AssemblyError(EngineError):
    """Scene assembly failure (mesh outside its layout box)."""


class EvalError(EngineError):
    """Evaluation harness failure (e.g. too many skipped views)."""
