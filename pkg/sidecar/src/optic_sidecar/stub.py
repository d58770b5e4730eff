"""Fixture store for stub mode.

Requests select a fixture either by name (X-Stub-Fixture header) or by the
sha256 of their canonical JSON body; a default.json, when present, catches
everything else. Responses are served as the exact file bytes so identical
fixtures yield byte-identical bodies.
"""

from __future__ import annotations

import hashlib
import json
import re
from importlib import resources
from pathlib import Path
from typing import Optional

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def packaged_fixtures_dir() -> Path:
    return Path(str(resources.files("optic_sidecar").joinpath("fixtures")))


def request_hash(body: dict) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class FixtureStore:
    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory else packaged_fixtures_dir()

    def lookup(self, name: Optional[str], body: dict) -> Optional[bytes]:
        """Fixture bytes for a request, or None when nothing matches."""
        if name is not None:
            if not _NAME_RE.match(name):
                return None
            return self._read(f"{name}.json")
        by_hash = self._read(f"{request_hash(body)}.json")
        if by_hash is not None:
            return by_hash
        return self._read("default.json")

    def _read(self, filename: str) -> Optional[bytes]:
        path = self.directory / filename
        if not path.is_file():
            return None
        return path.read_bytes()
