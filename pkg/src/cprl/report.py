"""Run directories and report files.

A run directory ``<root>/<YYYYmmddTHHMMSS>-<config hash>`` holds one
``report.json`` plus the command's CSV tables. Files carry no timestamps, so
reruns of the same config and seed produce byte-identical contents.
"""

from __future__ import annotations

import csv
import json
import os
import time
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .metrics import fmt

LOCK_NAME = ".lock"


class OutputError(OSError):
    pass


class RunDir:
    """Context manager that creates and locks a run directory."""

    def __init__(self, root: str, config_hash: str, name: Optional[str] = None):
        stamp = time.strftime("%Y%m%dT%H%M%S")
        self.path = os.path.join(root, name or f"{stamp}-{config_hash}")
        self._lock = os.path.join(self.path, LOCK_NAME)

    def __enter__(self) -> "RunDir":
        try:
            os.makedirs(self.path, exist_ok=True)
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputError(f"{self.path} is locked by another run") from None
        except OSError as exc:
            raise OutputError(f"cannot write to {self.path}: {exc}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc) -> None:
        try:
            os.remove(self._lock)
        except FileNotFoundError:
            pass

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: str, header: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(row.get(h)) for h in header])


def write_matrix(path: str, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for line in np.asarray(grid):
            writer.writerow([repr(float(v)) for v in line])


def tag_rows(rows: List[dict], config_hash: str, **extra) -> List[dict]:
    return [{**row, **extra, "config_hash": config_hash} for row in rows]
