"""
Filesystem helpers shared by the services and the CLI.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Union

from exceptions import FileProcessingError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def cleanup_file(filepath: PathLike) -> bool:
    """
    Remove a file if it exists.

    Returns:
        bool: True if the file was removed or was already absent
    """
    try:
        Path(filepath).unlink(missing_ok=True)
        logger.debug(f"Removed {filepath}")
        return True
    except OSError as e:
        logger.error(f"Failed to remove {filepath}: {e}")
        return False


def is_writable_dir(path: PathLike) -> bool:
    """Check whether ``path`` exists (or can be created) and is writable."""
    path = Path(path)
    candidate = path
    while not candidate.exists():
        if candidate.parent == candidate:
            return False
        candidate = candidate.parent
    return candidate.is_dir() and os.access(candidate, os.W_OK)


def ensure_dir(path: PathLike) -> Path:
    """
    Create ``path`` (and parents) if needed.

    Raises:
        FileProcessingError: If the directory cannot be created
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create directory {path}: {e}")
        raise FileProcessingError(f"Cannot create directory {path}: {e}", filename=str(path))
    if not os.access(path, os.W_OK):
        raise FileProcessingError(f"Directory is not writable: {path}", filename=str(path))
    return path


def write_json(data: Any, path: PathLike) -> Path:
    """Write ``data`` as indented JSON."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=False)
            f.write("\n")
    except OSError as e:
        raise FileProcessingError(f"Cannot write {path}: {e}", filename=str(path))
    return path


def read_json(path: PathLike) -> Any:
    """
    Read a JSON file.

    Raises:
        FileProcessingError: If the file is missing or not valid JSON
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise FileProcessingError(f"File not found: {path}", filename=str(path))
    except (OSError, json.JSONDecodeError) as e:
        raise FileProcessingError(f"Failed to parse {path}: {e}", filename=str(path))
