"""Phase-field reconstruction of conductivity inclusions from boundary
measurements, with a sharp-interface shape-gradient comparator."""

__version__ = "0.1.0"

from .backend import backend_name  # noqa: F401
