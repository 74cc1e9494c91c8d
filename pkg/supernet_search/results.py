# supernet_search/results.py
"""
Run artifacts.

    results.jsonl      one ResultRecord per line, append-only
    trajectory.jsonl   one architecture-parameter snapshot per line, append-only
    manifest.json      resolved config, default-valued keys, seed, space, code hash

Readers accept a truncated final line so any prefix of a file stays readable.
"""
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

from supernet_search.errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
TRAJECTORY_FILE = "trajectory.jsonl"
MANIFEST_FILE = "manifest.json"
WALL_CLOCK_FIELDS = ("wall_seconds",)

PathLike = Union[str, Path]


@dataclass
class ResultRecord:
    run_id: str
    method: str
    space: str
    architecture: str
    seed: int
    val_metric: float
    test_metric: Optional[float]
    epoch: int
    wall_seconds: float
    param_count: Optional[int]
    supernet_mode: str

    def __post_init__(self):
        for key in ("val_metric", "test_metric"):
            value = getattr(self, key)
            if value is not None and not math.isfinite(value):
                raise ValidationError(
                    f"{key} must be finite, got {value} (run {self.run_id}, epoch {self.epoch})"
                )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, row: Mapping[str, Any]) -> "ResultRecord":
        names = [f.name for f in dataclasses.fields(cls)]
        if set(row) != set(names):
            raise FormatError(f"Result row keys {sorted(row)} differ from {names}")
        return cls(**{name: row[name] for name in names})


def append_jsonl(path: PathLike, rows: Iterable[Mapping[str, Any]]) -> int:
    """Append rows as single-line JSON objects; each line is flushed to disk before returning."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            count += 1
        fh.flush()
        os.fsync(fh.fileno())
    return count


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    """
    Raises:
        FormatError: a line other than the last one is not valid JSON
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    rows = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            if number == len(lines):
                logger.warning("Ignoring truncated last line %d of %s", number, path)
                break
            raise FormatError(f"{path}:{number}: invalid record: {e}") from e
    return rows


def append_records(path: PathLike, records: Iterable[ResultRecord]) -> int:
    return append_jsonl(path, (r.to_dict() for r in records))


def read_records(path: PathLike) -> List[ResultRecord]:
    return [ResultRecord.from_dict(row) for row in read_jsonl(path)]


def stable_hash(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def code_hash() -> str:
    """sha256 over the package sources, in file-name order."""
    digest = hashlib.sha256()
    package = Path(__file__).resolve().parent
    for source in sorted(package.glob("*.py")):
        digest.update(source.name.encode("utf-8"))
        digest.update(source.read_bytes())
    return digest.hexdigest()


def write_manifest(
    out_dir: PathLike,
    config: Mapping[str, Any],
    seed: int,
    space: str,
    defaults: Optional[List[str]] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    manifest = {
        "space": space,
        "seed": seed,
        "config": config,
        "config_hash": stable_hash(config),
        "defaults": sorted(defaults or []),
        "code_hash": code_hash(),
    }
    manifest.update(extra or {})
    path = Path(out_dir) / MANIFEST_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    logger.info("Wrote manifest %s", path)
    return path


def read_manifest(out_dir: PathLike) -> Optional[Dict[str, Any]]:
    path = Path(out_dir) / MANIFEST_FILE
    if not path.exists():
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"Unreadable manifest {path}: {e}") from e


def run_id_for(method: str, space: str, seed: int, config: Mapping[str, Any]) -> str:
    """Deterministic run id so identical reruns write identical files."""
    return f"{method}-{space}-s{seed}-{stable_hash(config)[:8]}"
