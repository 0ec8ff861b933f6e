"""Content-addressed image store: bytes live under ``<sha256>.png``."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path


class ImageStore:
    def __init__(self, root: str | os.PathLike[str]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, ref: str) -> Path:
        return self.root / f"{ref}.png"

    def put(self, data: bytes) -> str:
        ref = hashlib.sha256(data).hexdigest()
        target = self.path_for(ref)
        if not target.exists():
            tmp = target.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)
        return ref

    def get(self, ref: str) -> bytes | None:
        path = self.path_for(ref)
        if not path.exists():
            return None
        return path.read_bytes()

    def has(self, ref: str) -> bool:
        return self.path_for(ref).exists()
