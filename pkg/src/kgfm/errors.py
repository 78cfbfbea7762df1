"""
Exception hierarchy for kgfm.

Library code raises these; the CLI and the MCP tools turn them into
structured failure payloads (see ``failure_payload``).
"""

from typing import Any, Dict, Optional


class KGFMError(Exception):
    """Base class for every error raised by kgfm."""


class ShapeError(KGFMError):
    def __init__(self, op: str, *shapes: Any, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shape_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(KGFMError):
    """NaN or Inf produced by an op or a loss."""

    def __init__(self, op: str, where: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if where:
            msg += f" at {where}"
        super().__init__(msg)


class SchemaError(KGFMError):
    pass


class ConfigError(KGFMError):
    pass


class CheckpointError(KGFMError):
    pass


class DataError(KGFMError):
    pass


class StageError(KGFMError):
    def __init__(self, stage: str, cause: BaseException, checkpoint_dir: Optional[str] = None):
        self.stage = stage
        self.cause = cause
        self.checkpoint_dir = checkpoint_dir
        super().__init__(f"stage '{stage}' failed: {cause}")


def _stage_for_exception(exc: BaseException) -> str:
    if isinstance(exc, StageError):
        return exc.stage
    if isinstance(exc, (ShapeError, NonFiniteError)):
        return "numerics"
    if isinstance(exc, SchemaError):
        return "schema"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (DataError, OSError)):
        return "io"
    return exc.__class__.__name__


def failure_payload(exc: BaseException, **details: Any) -> Dict[str, Any]:
    msg = str(exc) or f"failed with {exc.__class__.__name__}"
    payload_details: Dict[str, Any] = {"stage": _stage_for_exception(exc), **details}
    if isinstance(exc, StageError) and exc.checkpoint_dir:
        payload_details["checkpoint_dir"] = exc.checkpoint_dir
    return {
        "error": msg,
        "status": "failed",
        "exception_type": f"{exc.__class__.__module__}.{exc.__class__.__name__}",
        "details": payload_details,
    }
