"""JSONL plumbing shared by the stores and the CLI: line-oriented readers,
writers, and a flush-on-write append-only log."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import IO, Iterable, Iterator


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def iter_jsonl_lines(stream: IO[str]) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield (line_number, record, parse_error) triples, 1-indexed."""
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            yield lineno, None, str(exc)
            continue
        if not isinstance(record, dict):
            yield lineno, None, "record is not a JSON object"
            continue
        yield lineno, record, None


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
            count += 1
    return count


class AppendLog:
    """Append-only JSONL record log. Writes are serialized and flushed so a
    killed process loses at most the record being written."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh: IO[str] | None = None

    def replay(self) -> list[dict]:
        if not self.path.exists():
            return []
        return list(read_jsonl(self.path))

    def append(self, record: dict) -> None:
        self.append_many([record])

    def append_many(self, records: Iterable[dict]) -> None:
        with self._lock:
            if self._fh is None:
                self._fh = open(self.path, "a", encoding="utf-8")
            for record in records:
                self._fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
                self._fh.write("\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None
