from .features import (
    ByteEntropyConfig,
    byte_entropy_histogram,
    byte_histogram,
    count_windows,
    extract_features,
    string_stats,
)
from .parser import ParsedPe, parse_pe, shannon_entropy

__all__ = [
    "ByteEntropyConfig",
    "ParsedPe",
    "byte_entropy_histogram",
    "byte_histogram",
    "count_windows",
    "extract_features",
    "parse_pe",
    "shannon_entropy",
    "string_stats",
]
