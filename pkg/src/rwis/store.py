"""File-backed append-only record log with a compact offset index.

``records.jsonl`` holds one JSON object per line; ``records.idx`` holds the
byte offset of every record as little-endian uint64. Records are never
rewritten. On open the index is checked against the log and rebuilt from
the log if it is missing or short; a torn trailing line (a crash in the
middle of an append) is ignored and the next append starts on a fresh line.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Iterator

from .errors import FormatError, IndexOutOfBounds

log = logging.getLogger(__name__)

_OFFSET = struct.Struct("<Q")


class RecordStore:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.log_path = self.directory / "records.jsonl"
        self.index_path = self.directory / "records.idx"
        self._lock = threading.Lock()
        self.log_path.touch(exist_ok=True)
        self._offsets = self._load_index()
        self._needs_newline = self._torn_tail()

    def _scan_log(self) -> list[int]:
        offsets, pos = [], 0
        with self.log_path.open("rb") as fh:
            for line in fh:
                if line.endswith(b"\n"):
                    try:
                        json.loads(line)
                        offsets.append(pos)
                    except ValueError:
                        log.warning("skipping unreadable record at byte %d", pos)
                pos += len(line)
        return offsets

    def _load_index(self) -> list[int]:
        offsets: list[int] = []
        if self.index_path.exists():
            raw = self.index_path.read_bytes()
            usable = len(raw) - len(raw) % _OFFSET.size
            offsets = [v for (v,) in _OFFSET.iter_unpack(raw[:usable])]
        scanned = self._scan_log()
        if offsets != scanned:
            if offsets:
                log.warning("record index disagrees with the log; rebuilding it")
            with self.index_path.open("wb") as fh:
                fh.write(b"".join(_OFFSET.pack(o) for o in scanned))
                fh.flush()
                os.fsync(fh.fileno())
        return scanned

    def _torn_tail(self) -> bool:
        size = self.log_path.stat().st_size
        if size == 0:
            return False
        with self.log_path.open("rb") as fh:
            fh.seek(size - 1)
            return fh.read(1) != b"\n"

    def __len__(self) -> int:
        return len(self._offsets)

    def append(self, record: dict) -> int:
        """Persist one record; returns its sequence number."""
        line = json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False).encode() + b"\n"
        with self._lock:
            with self.log_path.open("ab") as fh:
                if self._needs_newline:
                    fh.write(b"\n")
                    self._needs_newline = False
                offset = fh.tell()
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            with self.index_path.open("ab") as fh:
                fh.write(_OFFSET.pack(offset))
            self._offsets.append(offset)
            return len(self._offsets) - 1

    def read(self, seq: int) -> dict:
        with self._lock:
            if not 0 <= seq < len(self._offsets):
                raise IndexOutOfBounds(f"record {seq} does not exist")
            offset = self._offsets[seq]
        with self.log_path.open("rb") as fh:
            fh.seek(offset)
            line = fh.readline()
        try:
            return json.loads(line)
        except ValueError as exc:
            raise FormatError(f"record {seq} is unreadable") from exc

    def records(self, start: int = 0) -> Iterator[dict]:
        """Records in append order from ``start`` (a snapshot of the current length)."""
        with self._lock:
            offsets = list(self._offsets[start:])
        with self.log_path.open("rb") as fh:
            for off in offsets:
                fh.seek(off)
                yield json.loads(fh.readline())
