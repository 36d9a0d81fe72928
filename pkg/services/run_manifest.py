"""Run manifests: what a CLI command read, wrote and was configured with"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from app import __version__
from models import record_run
from services.errors import TgrError
from services.file_processor import file_crc32

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def _crc_hex(path) -> str:
    return f"{file_crc32(path):08x}"


def _jsonable(value):
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    return str(value)


@dataclass
class RunManifest:
    command: str
    arguments: dict
    config_files: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started_at: str = ""
    duration_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        return cls(**data)


def manifest_path_for(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + MANIFEST_SUFFIX)


class ManifestRecorder:
    """Collects artifact checksums while a command runs, then writes the manifest"""

    def __init__(self, command: str, arguments: dict):
        self.manifest = RunManifest(command=command, arguments=_jsonable(dict(arguments)))
        self.manifest.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self._t0 = time.perf_counter()

    def config(self, path):
        if path is not None:
            self.manifest.config_files[str(path)] = _crc_hex(path)

    def input(self, path):
        self.manifest.inputs[str(path)] = _crc_hex(path)

    def output(self, path):
        self.manifest.outputs[str(path)] = _crc_hex(path)

    def seed(self, name: str, value: int):
        self.manifest.seeds[name] = int(value)

    def finish(self, out) -> RunManifest:
        """Write ``<out>.manifest.json`` and record the run when a registry is configured"""
        self.manifest.duration_seconds = round(time.perf_counter() - self._t0, 3)
        path = manifest_path_for(out)
        path.write_text(json.dumps(self.manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Wrote manifest {path}")

        record_run(self.manifest)
        return self.manifest


def record_failure(argv, code: str):
    """Record a command that ended in ``tgr-error[<code>]``; no manifest file is written"""
    argv = [str(a) for a in argv]
    command = next((a for a in argv if not a.startswith("-")), "tgr")
    manifest = RunManifest(command=command[:32], arguments={"argv": argv})
    manifest.started_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
    try:
        return record_run(manifest, exit_status=code)
    except TgrError as e:
        logger.debug(f"Failed run not recorded: {e}")
        return None


def read_manifest(path) -> RunManifest:
    return RunManifest.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
