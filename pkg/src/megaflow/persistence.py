"""Split persistence: schema-validated metadata, in-memory FIFO queue, artifact tree.

Operational metadata and result artifacts deliberately live in different
stores. The metadata store behaves like a document database with per-key
optimistic versioning; the task queue is a plain in-memory FIFO; artifacts
go to an on-disk tree with atomic, write-once objects. All three are safe
for concurrent use from many threads.
"""

from __future__ import annotations

import json
import os
import threading
from collections import deque
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import jsonschema


class SchemaViolation(Exception):
    pass


class VersionConflict(Exception):
    def __init__(self, key: str, expected: int, actual: int):
        super().__init__(f"version conflict on {key!r}: expected {expected}, found {actual}")
        self.expected = expected
        self.actual = actual


class DuplicateEnqueue(Exception):
    pass


class KeyExists(Exception):
    pass


class KeyNotFound(Exception):
    pass


# Document schemas enforced on every metadata write. Kept intentionally
# structural: field presence and JSON types, not business rules.
TASK_RECORD_SCHEMA = {
    "type": "object",
    "required": ["task_id", "task", "mode", "owner", "status", "attempt",
                 "enqueue_seq", "phase_timestamps"],
    "properties": {
        "task_id": {"type": "string", "minLength": 1},
        "task": {"type": "object"},
        "mode": {"enum": ["ephemeral", "persistent"]},
        "owner": {"type": "string"},
        "workload": {"type": "string"},
        "status": {"enum": ["queued", "scheduled", "provisioning", "executing",
                            "completed", "failed", "cancelled"]},
        "attempt": {"type": "integer", "minimum": 0},
        "enqueue_seq": {"type": "integer", "minimum": 0},
        "phase_timestamps": {"type": "object",
                             "additionalProperties": {"type": "integer"}},
        "result_ref": {"type": ["string", "null"]},
    },
}

INSTANCE_SCHEMA = {
    "type": "object",
    "required": ["instance_id", "profile", "state", "mode", "active_tasks", "created_at"],
    "properties": {
        "instance_id": {"type": "string", "minLength": 1},
        "profile": {"type": "object"},
        "state": {"enum": ["requested", "provisioning", "running", "draining",
                           "terminated", "failed"]},
        "mode": {"enum": ["ephemeral", "persistent"]},
        "active_tasks": {"type": "array", "items": {"type": "string"}},
        "created_at": {"type": "integer"},
        "terminated_at": {"type": ["integer", "null"]},
    },
}


class MetadataStore:
    """Versioned document store with schema validation and per-key compare-and-set.

    Writes append to a JSON-lines journal when a path is given, so a
    restarted process can recover the latest committed state with ``load``.
    """

    def __init__(self, journal_path: str | os.PathLike | None = None):
        self._lock = threading.Lock()
        self._docs: dict[str, tuple[int, dict]] = {}
        self._schemas: dict[str, jsonschema.protocols.Validator] = {}
        self._journal_path = Path(journal_path) if journal_path else None
        self._journal = None
        if self._journal_path is not None:
            self._journal_path.parent.mkdir(parents=True, exist_ok=True)
            self._journal = open(self._journal_path, "a", encoding="utf-8")
        self.register_schema("task", TASK_RECORD_SCHEMA)
        self.register_schema("instance", INSTANCE_SCHEMA)

    def register_schema(self, prefix: str, schema: dict) -> None:
        """Validate keys of the form ``<prefix>/...`` against ``schema``."""
        self._schemas[prefix] = jsonschema.Draft202012Validator(schema)

    def _schema_for(self, key: str):
        prefix = key.split("/", 1)[0]
        return self._schemas.get(prefix)

    def put_record(self, key: str, doc: Mapping[str, Any],
                   expected_version: Optional[int] = None) -> int:
        validator = self._schema_for(key)
        doc = dict(doc)
        if validator is not None:
            error = next(validator.iter_errors(doc), None)
            if error is not None:
                raise SchemaViolation(f"{key}: {error.message}")
        with self._lock:
            current = self._docs.get(key, (0, None))[0]
            if expected_version is not None and expected_version != current:
                raise VersionConflict(key, expected_version, current)
            version = current + 1
            self._docs[key] = (version, doc)
            if self._journal is not None:
                self._journal.write(json.dumps({"key": key, "version": version, "doc": doc},
                                               sort_keys=True) + "\n")
                self._journal.flush()
        return version

    def get_record(self, key: str) -> tuple[int, dict]:
        with self._lock:
            if key not in self._docs:
                raise KeyNotFound(key)
            version, doc = self._docs[key]
            return version, dict(doc)

    def get(self, key: str, default=None):
        try:
            return self.get_record(key)[1]
        except KeyNotFound:
            return default

    def keys(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(k for k in self._docs if k.startswith(prefix))

    def load(self) -> int:
        """Replay the journal into memory; returns the number of entries applied."""
        if self._journal_path is None or not self._journal_path.exists():
            return 0
        applied = 0
        with self._lock:
            with open(self._journal_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._docs[entry["key"]] = (entry["version"], entry["doc"])
                    applied += 1
        return applied

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None


class TaskQueue:
    """Strict FIFO by enqueue sequence; each queued id is delivered exactly once."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: deque[tuple[int, str]] = deque()
        self._queued: set[str] = set()
        self._next_seq = 0

    def enqueue(self, task_id: str) -> int:
        with self._lock:
            if task_id in self._queued:
                raise DuplicateEnqueue(task_id)
            seq = self._next_seq
            self._next_seq += 1
            self._entries.append((seq, task_id))
            self._queued.add(task_id)
            return seq

    def dequeue(self) -> Optional[str]:
        with self._lock:
            if not self._entries:
                return None
            _, task_id = self._entries.popleft()
            self._queued.discard(task_id)
            return task_id

    def peek(self) -> Optional[str]:
        with self._lock:
            return self._entries[0][1] if self._entries else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def snapshot(self) -> list[str]:
        with self._lock:
            return [task_id for _, task_id in self._entries]


class ArtifactStore:
    """Write-once blob store backed by a directory tree.

    Objects are keyed ``runs/<run_id>/tasks/<task_id>/<artifact_name>``.
    Writes go to a temp file in the destination directory and are renamed
    into place, so a crash mid-put never leaves a partially visible object.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path_for(self, key: str) -> Path:
        path = (self.root / key).resolve()
        if not str(path).startswith(str(self.root.resolve())):
            raise ValueError(f"artifact key escapes store root: {key!r}")
        return path

    def put_artifact(self, key: str, data: bytes) -> str:
        path = self._path_for(key)
        with self._lock:
            if path.exists():
                raise KeyExists(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            self._finalize(tmp, path)
        return key

    def _finalize(self, tmp: Path, path: Path) -> None:
        # Separated out so fault-injection tests can fail the commit step.
        os.replace(tmp, path)

    def get_artifact(self, key: str) -> bytes:
        path = self._path_for(key)
        if not path.exists():
            raise KeyNotFound(key)
        return path.read_bytes()

    def exists(self, key: str) -> bool:
        return self._path_for(key).exists()

    def list_keys(self, prefix: str = "") -> Iterable[str]:
        base = self.root
        for path in sorted(base.rglob("*")):
            if path.is_file() and not path.name.endswith(".tmp"):
                key = str(path.relative_to(base))
                if key.startswith(prefix):
                    yield key


def artifact_key(run_id: str, task_id: str, name: str) -> str:
    return f"runs/{run_id}/tasks/{task_id}/{name}"
