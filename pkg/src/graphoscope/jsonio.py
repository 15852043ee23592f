"""Canonical JSON: sorted keys, floats rounded to 9 significant digits,
byte-stable output for golden-file comparisons."""

from __future__ import annotations

import json
import math

import numpy as np


def _canonize(obj):
    if isinstance(obj, dict):
        return {str(k): _canonize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonize(v) for v in obj]
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"canonical JSON rejects non-finite float {x!r}")
        return float(f"{x:.9g}")
    if isinstance(obj, np.ndarray):
        return _canonize(obj.tolist())
    return obj


def dumps(obj):
    return json.dumps(_canonize(obj), sort_keys=True, separators=(",", ":"))


def dump(obj, path):
    with open(path, "wb") as fh:
        fh.write(dumps(obj).encode("utf-8") + b"\n")


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
