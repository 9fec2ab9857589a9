from .export import ExportError, ExportManifest, SUPPORTED_BACKBONES, export

__version__ = "0.1.0"
__all__ = ["ExportError", "ExportManifest", "SUPPORTED_BACKBONES", "export"]
