"""Feature exporter: videos + prompts -> EDUT tensors + manifest stubs."""

from .edut import encode_tensor, write_tensor_atomic
from .errors import ExportError, UsageError
from .export import ExportJob, ExportResult, export
from .frames import decode_frames, uniform_frame_indices

__all__ = [
    "ExportError",
    "ExportJob",
    "ExportResult",
    "UsageError",
    "decode_frames",
    "encode_tensor",
    "export",
    "uniform_frame_indices",
    "write_tensor_atomic",
]
