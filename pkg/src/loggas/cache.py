"""Tiny JSON disk cache with atomic writes."""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path


def _slug(key):
    text = json.dumps(key, sort_keys=True, default=str)
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    head = re.sub(r"[^A-Za-z0-9_.-]+", "-", "_".join(str(k) for k in key))[:60]
    return f"{head}-{digest}"


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class JsonCache:
    """One file per entry: ``<dir>/<kind>/<slug>.json``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, kind, key):
        return self.root / kind / f"{_slug(key)}.json"

    def get(self, kind, key):
        p = self.path(kind, key)
        if not p.exists():
            return None
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if doc.get("key") != json.loads(json.dumps(list(key), default=str)):
            return None
        return doc.get("value")

    def put(self, kind, key, value):
        doc = {"kind": kind, "key": list(key), "value": value}
        atomic_write_text(self.path(kind, key), json.dumps(doc, default=str))

    def inspect(self):
        """List entries; unreadable ones are flagged instead of raising."""
        rows = []
        if not self.root.exists():
            return rows
        for p in sorted(self.root.glob("*/*.json")):
            row = {"kind": p.parent.name, "file": p.name, "ok": True}
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
                row["key"] = doc["key"]
                value = doc["value"]
                if isinstance(value, dict) and "residual" in value:
                    row["residual"] = value["residual"]
            except (OSError, ValueError, KeyError, TypeError) as exc:
                row["ok"] = False
                row["error"] = type(exc).__name__
            rows.append(row)
        return rows
