"""Append-only record of every pipeline stage run in an output directory."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Iterator, List

from stegpurify._util import StageError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
STATUSES = ("ok", "skipped", "failed", "blocked")


def code_version() -> str:
    """Installed package version, or 'unknown' when running from a checkout."""
    try:
        return version("dml-stegpurify")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class StageEntry:  # pylint: disable=too-many-instance-attributes
    """One line of the manifest."""

    stage: str
    config_hash: str
    status: str = "ok"
    seconds: float = 0.0
    artifacts: List[str] = field(default_factory=list)
    device: str = "cpu"
    message: str = ""
    code_version: str = field(default_factory=code_version)
    timestamp: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds")
    )

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise StageError(f"Unknown stage status {self.status!r}")


class RunManifest:
    """manifest.json in an output directory; entries are only ever appended."""

    def __init__(self, output_dir: Path):
        self.path = Path(output_dir) / MANIFEST_FILE
        self._entries: List[StageEntry] = []
        if self.path.exists():
            try:
                raw = json.loads(self.path.read_text(encoding="utf-8"))
                self._entries = [StageEntry(**item) for item in raw]
            except (json.JSONDecodeError, TypeError) as exc:
                raise StageError(f"Corrupt run manifest {self.path}: {exc}") from exc

    def __iter__(self) -> Iterator[StageEntry]:
        return iter(list(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def append(self, entry: StageEntry) -> StageEntry:
        """Add an entry and rewrite the file with all previous entries unchanged."""
        self._entries.append(entry)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(
            json.dumps([asdict(e) for e in self._entries], indent=2), encoding="utf-8"
        )
        tmp.replace(self.path)
        logger.debug("Manifest: %s %s", entry.stage, entry.status)
        return entry

    def latest(self, stage: str) -> StageEntry | None:
        """Most recent successful entry of a stage."""
        for entry in reversed(self._entries):
            if entry.stage == stage and entry.status == "ok":
                return entry
        return None

    def is_current(self, stage: str, config_hash: str) -> bool:
        """True when the last good run used the same hash and its artifacts still exist."""
        entry = self.latest(stage)
        if entry is None or entry.config_hash != config_hash:
            return False
        return all(Path(a).exists() for a in entry.artifacts)


class StageTimer:
    """Context manager measuring wall-clock seconds of a stage."""

    def __init__(self) -> None:
        self.start = 0.0
        self.seconds = 0.0

    def __enter__(self) -> "StageTimer":
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self.start
