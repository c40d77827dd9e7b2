"""
Utility functions
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Union

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "STOKES_OPTCTRL_OUTPUT_DIR"


def default_output_dir() -> str:
    """Output directory from the environment, falling back to ./results"""
    return os.getenv(OUTPUT_DIR_ENV, "results")


def ensure_directory(path: str):
    """Ensure directory exists"""
    Path(path).mkdir(parents=True, exist_ok=True)


def _atomic_write(path: str, data: Union[str, bytes]) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    ensure_directory(directory)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        if isinstance(data, bytes):
            with os.fdopen(fd, "wb") as f:
                f.write(data)
        else:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
                f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        cleanup_temp_file(tmp_path)
        raise
    return path


def atomic_write_text(path: str, text: str) -> str:
    """
    Write text to a temporary file next to path and rename it into place

    A failed write leaves no partial file behind.

    Args:
        path: Destination file
        text: File contents

    Returns:
        The destination path
    """
    return _atomic_write(path, text)


def atomic_write_bytes(path: str, data: bytes) -> str:
    """Binary counterpart of atomic_write_text"""
    return _atomic_write(path, bytes(data))


def cleanup_temp_file(path: str):
    """
    Remove a leftover temporary file

    Args:
        path: File to remove
    """
    if os.path.exists(path):
        try:
            os.unlink(path)
        except OSError as e:
            logger.warning("Error cleaning up temp file %s: %s", path, e)
