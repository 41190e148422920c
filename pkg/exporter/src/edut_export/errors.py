"""Error types for the export pipeline."""


class ExportError(Exception):
    """Decode, backbone, or output failure; no partial files are left behind."""


class UsageError(Exception):
    """Bad command-line arguments or job description."""
