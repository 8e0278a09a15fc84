#!/usr/bin/env python3
"""
Artifact Writer
Reports, tables, images and figures for every toolkit command

All writes are atomic (temp file in the destination directory, then rename) and
byte-reproducible: JSON uses sorted keys, CSV a fixed float format, PNG a pinned
compression level and figures carry no timestamp metadata.
"""

import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import cv2
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CSV_FLOAT_FORMAT = "%.6f"
PNG_COMPRESSION = 3


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write bytes to path via a sibling temp file and os.replace"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):  # Enum members
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json_text(document: Any) -> str:
    """Canonical JSON text: sorted keys, 2-space indent, trailing newline"""
    return json.dumps(document, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def write_json(path: PathLike, document: Any) -> Path:
    return atomic_write_bytes(path, to_json_text(document).encode("utf-8"))


def write_csv(path: PathLike, rows: Union[pd.DataFrame, Sequence[Dict[str, Any]]],
              columns: Optional[List[str]] = None) -> Path:
    """Write a table with a fixed float format so reruns are byte-identical"""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows), columns=columns)
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_bytes(path, text.encode("utf-8"))


def encode_png(image: np.ndarray) -> bytes:
    """
    Encode an image in [0,1] as 8-bit PNG.

    Args:
        image: H×W (grayscale) or H×W×3 (RGB) float array

    Returns:
        PNG bytes
    """
    quantized = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if quantized.ndim == 3:
        quantized = cv2.cvtColor(quantized, cv2.COLOR_RGB2BGR)
    ok, buffer = cv2.imencode(".png", quantized, [cv2.IMWRITE_PNG_COMPRESSION, PNG_COMPRESSION])
    if not ok:
        raise IOError("PNG encoding failed")
    return buffer.tobytes()


def write_png(path: PathLike, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_png(image))


def read_png(path: PathLike) -> np.ndarray:
    """Read an 8-bit PNG back as float32 in [0,1] (RGB, or H×W for grayscale)"""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"Cannot read image: {path}")
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return raw.astype(np.float32) / 255.0


def save_figure(path: PathLike, figure) -> Path:
    """Save a matplotlib figure as PNG without the software/date metadata"""
    buffer = io.BytesIO()
    figure.savefig(buffer, format="png", dpi=100, metadata={"Software": None})
    return atomic_write_bytes(path, buffer.getvalue())


class ArtifactWriter:
    """
    Output directory for one command run.

    Tracks every file written so the command can finish with an
    `artifacts.json` index of its outputs.
    """

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []
        logger.info(f"Writing artifacts to {self.out_dir}")

    def _target(self, name: str) -> Path:
        target = self.out_dir / name
        self.written.append(name)
        return target

    def json(self, name: str, document: Any) -> Path:
        return write_json(self._target(name), document)

    def csv(self, name: str, rows, columns: Optional[List[str]] = None) -> Path:
        return write_csv(self._target(name), rows, columns)

    def png(self, name: str, image: np.ndarray) -> Path:
        return write_png(self._target(name), image)

    def figure(self, name: str, figure) -> Path:
        return save_figure(self._target(name), figure)

    def finish(self, command: str) -> Path:
        """Write the artifact index and return its path"""
        index = {"command": command, "artifacts": sorted(set(self.written))}
        path = write_json(self.out_dir / "artifacts.json", index)
        logger.info(f"{command}: wrote {len(index['artifacts'])} artifacts")
        return path
