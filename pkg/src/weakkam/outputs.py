"""Deterministic output files.

Every file starts with the tool version and the configuration hash (JSON
files carry them as top-level keys).  Floats are written with repr() so a
file is a pure function of the computed values.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import __version__

TOOL = "weakkam"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class OutputWriter:
    def __init__(self, out_dir, config_hash: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.written: list[str] = []

    @property
    def header(self) -> list[str]:
        return [f"{TOOL} {__version__}", f"config_hash {self.config_hash}"]

    def path(self, name: str) -> Path:
        return self.dir / name

    def register(self, name: str) -> Path:
        if name not in self.written:
            self.written.append(name)
        return self.path(name)

    def text(self, name: str, lines: list[str], comments: list[str] | None = None) -> Path:
        with open(self.path(name), "w") as fh:
            for c in self.header + list(comments or []):
                fh.write(f"# {c}\n")
            for ln in lines:
                fh.write(ln + "\n")
        return self.register(name)

    def json(self, name: str, payload: dict) -> Path:
        doc = {"tool": TOOL, "version": __version__, "config_hash": self.config_hash}
        doc.update(_clean(payload))
        with open(self.path(name), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.register(name)

    def csv(self, name: str, columns: list[str], rows, comments: list[str] | None = None) -> Path:
        lines = [",".join(columns)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        return self.text(name, lines, comments)

    def columns(self, name: str, columns: list[str], data: np.ndarray, comments: list[str] | None = None) -> Path:
        """Whitespace-delimited plot data; the last comment line names the columns."""
        data = np.atleast_2d(np.asarray(data))
        lines = [" ".join(_fmt(v) for v in row) for row in data]
        return self.text(name, lines, list(comments or []) + [" ".join(columns)])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
