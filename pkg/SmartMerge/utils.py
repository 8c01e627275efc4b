import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional, Union

from . import __version__

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SMARTMERGE_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"


def check_path(path: Union[str, Path]) -> Path:
    """Return ``path`` as a Path, raising if it does not exist."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"path: {path} does not exist, please provide correct path")
    return path


def resolve_output_dir(out: Union[str, Path], environ: Optional[Dict[str, str]] = None) -> Path:
    """Output directory, re-rooted under ``$SMARTMERGE_OUTPUT_ROOT`` when ``out`` is relative."""
    environ = os.environ if environ is None else environ
    out = Path(out)
    root = environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: int
    output_dir: str
    version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    exit_code: Optional[int] = None

    def finish(self, exit_code: int = 0) -> "RunManifest":
        self.finished_at = _now()
        self.exit_code = exit_code
        return self

    def write(self, directory: Union[str, Path, None] = None) -> Path:
        """Write ``manifest.json`` into ``directory`` (default: the run's output directory)."""
        directory = Path(directory if directory is not None else self.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2))
        log.debug("wrote manifest %s", path)
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        path = check_path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls(**json.loads(check_path(path).read_text()))
