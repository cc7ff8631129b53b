"""Atomic JSON/CSV writers. Every artifact carries a provenance block."""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping, Optional

import pandas as pd

PROVENANCE_PREFIX = "# provenance: "
CSV_FLOAT_FORMAT = "%.6f"


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "item") and callable(value.item) and getattr(value, "ndim", None) == 0:
        return _jsonable(value.item())
    if hasattr(value, "tolist"):
        return _jsonable(value.tolist())
    return value


def dumps_canonical(payload: Any) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_text_atomic(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_json_atomic(
    path: Path,
    payload: Any,
    *,
    provenance: Optional[Mapping[str, Any]] = None,
    indent: Optional[int] = 2,
) -> Path:
    document = dict(payload) if provenance is not None else payload
    if provenance is not None:
        document["provenance"] = dict(provenance)
    text = json.dumps(_jsonable(document), sort_keys=True, indent=indent, ensure_ascii=False)
    return write_text_atomic(path, text + "\n")


def render_csv(frame: pd.DataFrame, *, provenance: Optional[Mapping[str, Any]] = None) -> str:
    body = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    if provenance is None:
        return body
    return f"{PROVENANCE_PREFIX}{dumps_canonical(provenance)}\n{body}"


def write_csv_atomic(path: Path, frame: pd.DataFrame, *, provenance: Optional[Mapping[str, Any]] = None) -> Path:
    return write_text_atomic(path, render_csv(frame, provenance=provenance))


def read_csv(path: Path) -> pd.DataFrame:
    """Read a CSV written by ``write_csv_atomic``, skipping the provenance line."""
    return pd.read_csv(path, skiprows=_provenance_rows(Path(path)))


def read_provenance(path: Path) -> Optional[dict]:
    with Path(path).open("r", encoding="utf-8") as handle:
        first = handle.readline()
    if first.startswith(PROVENANCE_PREFIX):
        return json.loads(first[len(PROVENANCE_PREFIX) :])
    return None


def _provenance_rows(path: Path) -> int:
    return 1 if read_provenance(path) is not None else 0
