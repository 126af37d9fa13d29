"""kvcore-extractor: turn real transformer inference into KVCR streams."""

from .extract import ExtractionResult, ExtractionSpec, extract, validate
from .kvcr import (
    HEADER_SIZE,
    KIND_KEY,
    KIND_VALUE,
    Header,
    StreamWriter,
    pack_header,
    parse_header,
    read_stream,
    stream_filename,
)

__version__ = "0.1.0"

__all__ = [
    "ExtractionResult",
    "ExtractionSpec",
    "HEADER_SIZE",
    "Header",
    "KIND_KEY",
    "KIND_VALUE",
    "StreamWriter",
    "extract",
    "pack_header",
    "parse_header",
    "read_stream",
    "stream_filename",
    "validate",
]
