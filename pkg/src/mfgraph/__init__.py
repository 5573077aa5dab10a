"""Feature-graph malware detection: PE features, per-sample graphs, DGCNN."""

from .errors import CompatibilityError, DataError, MFGraphError, SchemaError

__version__ = "0.1.0"

__all__ = ["CompatibilityError", "DataError", "MFGraphError", "SchemaError", "__version__"]
