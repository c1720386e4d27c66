"""CSV and JSON artifacts that carry the resolved config and a content hash.

CSV files start with ``#`` comment lines (kind, sha256, config) followed by
a header row; JSON files hold ``artifact``, ``config``, ``result`` and
``sha256`` fields.  The hash covers the config text and the data, so two
runs of the same experiment produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import sys

import numpy as np

from .config import ExperimentConfig, parse_config


def fmt(value) -> str:
    """Render one CSV cell; floats use 17 significant digits."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "nan" if math.isnan(v) else f"{v:.17g}"
    return str(value)


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def _params_text(params) -> str:
    if not params:
        return ""
    return json.dumps(_jsonable(params), sort_keys=True)


def render_csv(kind: str, header, rows, cfg: ExperimentConfig, params=None) -> str:
    """CSV with a comment preamble; ``params`` records per-invocation inputs."""
    body = io.StringIO()
    body.write(",".join(header) + "\n")
    for row in rows:
        body.write(",".join(fmt(v) for v in row) + "\n")
    data = body.getvalue()
    cfg_text = cfg.text()
    extra = _params_text(params)
    lines = [f"# artifact: {kind}", f"# sha256: {_digest(kind, extra, cfg_text, data)}"]
    if extra:
        lines.append(f"# params: {extra}")
    lines.append("# config:")
    lines += [f"#   {line}" if line else "#" for line in cfg_text.splitlines()]
    return "\n".join(lines) + "\n" + data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def render_json(kind: str, result, cfg: ExperimentConfig, params=None) -> str:
    result = _jsonable(result)
    config = cfg.to_dict()
    body = {"config": config, "result": result}
    if params:
        body["params"] = _jsonable(params)
    payload = json.dumps(body, sort_keys=True)
    doc = dict(body, artifact=kind, sha256=_digest(kind, payload))
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def write_text(path, text: str) -> None:
    """Write UTF-8 with LF endings; ``-`` means standard output."""
    if path in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_csv(path):
    """Return ``(header, rows, config_or_None)`` for a CSV artifact or plain CSV."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    data = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not data:
        raise ValueError(f"{path}: no header row")
    header = [h.strip() for h in data[0].split(",")]
    rows = []
    for i, line in enumerate(data[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != len(header):
            raise ValueError(f"{path}: data row {i} has {len(cells)} cells, expected {len(header)}")
        rows.append(dict(zip(header, cells)))
    cfg = None
    if "# config:" in comments:
        start = comments.index("# config:") + 1
        text = "\n".join(ln[4:] if ln.startswith("#   ") else "" for ln in comments[start:])
        cfg = parse_config(text)
    return header, rows, cfg
