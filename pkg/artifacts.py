"""
swarm-markers - Artifact helpers
Atomic file writes, content hashes and the run manifest.
"""

import hashlib
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field

TOOL_VERSION = "1.0.0"


def atomic_write(path: Union[str, Path], data: Union[str, bytes]) -> Path:
    """
    Write-temp-then-rename so readers never observe a partial file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except Exception:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -------------------------------------------------
# Run Manifest
# -------------------------------------------------

class WindowTiming(BaseModel):
    """Marker computation cost for one window plan (seconds)."""
    mean_window_seconds: float = Field(..., description="mean time per window (mu_t)")
    total_seconds: float = Field(..., description="mean cumulative time per run (T)")


class RunManifest(BaseModel):
    tool_version: str = TOOL_VERSION
    command: str
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    inputs: Dict[str, str] = Field(default_factory=dict, description="input path -> sha256")
    seeds: List[int] = Field(default_factory=list)
    window_plans: List[str] = Field(default_factory=list)
    outputs: Dict[str, str] = Field(default_factory=dict, description="output path -> sha256")
    timings: Dict[str, WindowTiming] = Field(default_factory=dict)
    parent: Optional[str] = Field(None, description="sha256 of the upstream manifest")
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def record_output(self, path: Union[str, Path], root: Optional[Path] = None) -> None:
        self.outputs[_key(path, root)] = sha256_file(path)

    def record_input(self, path: Union[str, Path], root: Optional[Path] = None) -> None:
        self.inputs[_key(path, root)] = sha256_file(path)

    def digest(self) -> str:
        # wall-clock fields are left out so identical runs chain to identical hashes
        payload = self.model_dump(exclude={"created_at", "timings"})
        return sha256_text(json.dumps(payload, sort_keys=True))

    def write(self, path: Union[str, Path]) -> Path:
        return atomic_write(path, self.model_dump_json(indent=2))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def verify_inputs(self, root: Optional[Path] = None) -> List[str]:
        """Return the inputs whose current hash no longer matches."""
        stale = []
        for name, digest in self.inputs.items():
            path = Path(root) / name if root is not None else Path(name)
            if not path.exists() or sha256_file(path) != digest:
                stale.append(name)
        return stale


def _key(path: Union[str, Path], root: Optional[Path]) -> str:
    # paths under root are stored relative so manifests move with the output directory
    return str(Path(path).relative_to(root)) if root is not None else str(path)


def manifest_path_for(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")
