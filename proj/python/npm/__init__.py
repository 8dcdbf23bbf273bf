"""Satellite-to-radar nowcasting: frames, manifests, metrics and trained models."""

from ._core import (
    ConfigError,
    DomainError,
    Error,
    IoError,
    Manifest,
    ParseError,
    Record,
    ShapeError,
    Stage1,
    Stage2,
    WindowError,
    contingency,
    decode_frame,
    encode_frame,
    generate_dataset,
    load_checkpoint,
    positional_encode,
    rain_rate,
    read_frame,
    run_cli,
    write_frame,
)

__all__ = [
    "ConfigError",
    "DomainError",
    "Error",
    "IoError",
    "Manifest",
    "ParseError",
    "Record",
    "ShapeError",
    "Stage1",
    "Stage2",
    "WindowError",
    "contingency",
    "decode_frame",
    "encode_frame",
    "generate_dataset",
    "load_checkpoint",
    "positional_encode",
    "rain_rate",
    "read_frame",
    "run_cli",
    "write_frame",
]
