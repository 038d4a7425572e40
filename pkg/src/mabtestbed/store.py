"""Append-only JSON-lines event log plus an atomically replaced snapshot."""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Iterator

EVENTS_FILE = "events.jsonl"
SNAPSHOT_FILE = "snapshot.json"


class EventStore:
    """Durable event sequence.

    ``append`` returns only after the line is flushed and fsynced.  A torn
    final line (crash mid-write) is dropped on load; corruption anywhere
    else is an error.
    """

    def __init__(self, data_dir: str | Path, fsync: bool = True):
        self.dir = Path(data_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.events_path = self.dir / EVENTS_FILE
        self.snapshot_path = self.dir / SNAPSHOT_FILE
        self.fsync = fsync
        self._lock = threading.Lock()
        self.seq = self._repair()
        self._fh = open(self.events_path, "a", encoding="utf-8")

    def _repair(self) -> int:
        if not self.events_path.exists():
            return 0
        with open(self.events_path, "rb") as fh:
            data = fh.read()
        good = data.rfind(b"\n") + 1
        if good < len(data):
            with open(self.events_path, "r+b") as fh:
                fh.truncate(good)
        seq = 0
        for line in data[:good].splitlines():
            if line.strip():
                seq = json.loads(line)["seq"]
        return seq

    def append(self, event: dict) -> int:
        with self._lock:
            self.seq += 1
            line = json.dumps({"seq": self.seq, **event}, separators=(",", ":"))
            self._fh.write(line + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            return self.seq

    def events(self, after: int = 0) -> Iterator[dict]:
        if not self.events_path.exists():
            return
        with open(self.events_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    event = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise RuntimeError(f"{self.events_path}:{lineno}: corrupt event: {exc}") from None
                if event["seq"] > after:
                    yield event

    def write_snapshot(self, state: dict, seq: int) -> None:
        tmp = self.snapshot_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"seq": seq, "state": state}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.snapshot_path)

    def read_snapshot(self) -> tuple[dict | None, int]:
        if not self.snapshot_path.exists():
            return None, 0
        with open(self.snapshot_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return doc["state"], int(doc["seq"])

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()
