"""Feature-map exporter: pretrained backbone over an image folder tree,
emitting containers the primary package consumes."""

from .export import ExportManifest, ShapeMismatch, export, manifest_for

__version__ = "0.1.0"
