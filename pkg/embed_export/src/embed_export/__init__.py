"""Offline export of contextual text embeddings to the binary archive format
consumed by the scanpath toolkit."""

from .errors import ExportError
from .exporter import ExportManifest, export

__all__ = ["ExportError", "ExportManifest", "export"]
