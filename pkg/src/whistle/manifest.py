"""Run manifests: what a command was run with and what it produced."""

from __future__ import annotations

import json
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import Config, config_hash


def build_id() -> str:
    """``git describe``-style id of the source tree, or the package version outside git."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version

    try:
        return "v" + version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunManifest:
    command: list
    config: dict
    config_hash: str
    seeds: list
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"
    metrics: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    build: str = field(default_factory=build_id)

    @classmethod
    def start(cls, command: list, cfg: Config, seeds: list) -> "RunManifest":
        return cls(list(command), cfg.to_dict(), config_hash(cfg), [int(s) for s in seeds])

    def verify(self) -> bool:
        return config_hash(self.config) == self.config_hash


def list_outputs(out_dir: Path, exclude: tuple = ("manifest.json",)) -> list:
    """Every file below ``out_dir``, relative and sorted."""
    out_dir = Path(out_dir)
    return sorted(
        p.relative_to(out_dir).as_posix()
        for p in out_dir.rglob("*")
        if p.is_file() and p.name not in exclude and not p.name.endswith(".tmp")
    )


def write_manifest(manifest: RunManifest, out_dir: str | Path, status: str = "ok") -> Path:
    """Finalize and write ``manifest.json`` atomically."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise OSError(f"output directory {out_dir} does not exist")
    manifest.finished = _now()
    manifest.status = status
    manifest.outputs = list_outputs(out_dir)
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(asdict(manifest), sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text()))


__all__ = ["RunManifest", "build_id", "list_outputs", "read_manifest", "write_manifest"]
