"""Cross-modal vehicle detection with dehazing and edge-cloud offloading."""

__version__ = "0.1.0"
