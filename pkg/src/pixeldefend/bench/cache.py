"""Content-addressed artifact cache.

Each artifact is keyed by a hash of its own configuration and the keys of
the artifacts it was built from, so a changed upstream invalidates
everything downstream. Set ``PTK_CACHE_DIR`` to choose the location.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Callable, Optional

logger = logging.getLogger(__name__)

ENV_VAR = "PTK_CACHE_DIR"


def default_cache_dir() -> Optional[Path]:
    value = os.environ.get(ENV_VAR)
    return Path(value) if value else None


def content_key(kind: str, payload) -> str:
    blob = json.dumps({"kind": kind, "payload": payload}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


class ArtifactCache:
    """Build-or-load by key. With ``root=None`` every artifact is rebuilt."""

    def __init__(self, root=None, kinds: Optional[set] = None):
        self.root = Path(root) if root is not None else None
        self.kinds = kinds  # None caches every kind
        self.hits = 0
        self.misses = 0
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def path(self, kind: str, key: str) -> Optional[Path]:
        if self.root is None or (self.kinds is not None and kind not in self.kinds):
            return None
        return self.root / kind / f"{key[:32]}.ptk"

    def fetch(self, kind: str, key: str, build: Callable, save: Callable, load: Callable):
        path = self.path(kind, key)
        if path is not None and path.is_file():
            self.hits += 1
            logger.info("cache hit %s/%s", kind, key[:12])
            return load(path)
        self.misses += 1
        obj = build()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{os.getpid()}")
            save(tmp, obj)
            os.replace(tmp, path)
        return obj
