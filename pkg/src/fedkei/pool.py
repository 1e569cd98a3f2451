"""Server-side knowledge pool of task-specific modules.

Entries are keyed by (client_id, task_time, part) and kept in canonical
order (task_time asc, client_id asc, part asc); the within-part enumeration
order defines the column index j used by every assignment matrix and every
intra-cluster weight row for the life of a run.

Persistence layout: one binary vector file per entry (paramspace format)
plus ``manifest.csv`` with one record per entry
(client_id, task_time, part, file, dim, crc32).
"""

import csv
import zlib
from bisect import insort
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConflictError, EmptyPoolError, InputError
from .paramspace import as_vector, vector_from_bytes, vector_to_bytes

PARTS = ("adapter", "head")


@dataclass(frozen=True)
class PoolEntry:
    client_id: int
    task_time: int
    part: str
    module: np.ndarray

    def __post_init__(self):
        if self.part not in PARTS:
            raise InputError(f"unknown part {self.part!r}")
        if self.client_id < 0:
            raise InputError("client_id must be >= 0")
        if self.task_time < 1:
            raise InputError("task_time must be >= 1")
        object.__setattr__(self, "module", as_vector(self.module))

    @property
    def key(self):
        return (self.task_time, self.client_id, self.part)


class KnowledgePool:
    """Ordered store of all past task-specific modules."""

    def __init__(self):
        self._entries: list[PoolEntry] = []
        self._keys: list[tuple] = []

    def __len__(self):
        return len(self._entries)

    def insert(self, entry: PoolEntry) -> None:
        if entry.key in set(self._keys):
            raise ConflictError(f"duplicate pool key {entry.key}")
        dim = self.part_dim(entry.part)
        if dim is not None and dim != entry.module.size:
            raise InputError(
                f"part {entry.part!r} dim {entry.module.size} != pool dim {dim}")
        insort(self._keys, entry.key)
        pos = self._keys.index(entry.key)
        self._entries.insert(pos, entry)

    def part_dim(self, part: str):
        for e in self._entries:
            if e.part == part:
                return e.module.size
        return None

    def count(self, part: str) -> int:
        return sum(1 for e in self._entries if e.part == part)

    def entries(self, part: str, t: int) -> list[PoolEntry]:
        """Entries of one part with task_time < t, in canonical order."""
        return [e for e in self._entries
                if e.part == part and e.task_time < t]

    def snapshot(self, part: str, t: int) -> np.ndarray:
        """Column matrix (dim, M) of all ``part`` modules before time t."""
        if t < 1:
            raise InputError("t must be >= 1")
        sel = self.entries(part, t)
        if not sel:
            raise EmptyPoolError(f"no {part} modules before t={t}")
        return np.stack([e.module for e in sel], axis=1)

    def client_ids(self, part: str, t: int) -> list[int]:
        return [e.client_id for e in self.entries(part, t)]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        records = []
        for e in self._entries:
            fname = f"t{e.task_time:03d}_c{e.client_id:03d}_{e.part}.vec"
            raw = vector_to_bytes(e.module)
            (directory / fname).write_bytes(raw)
            records.append((e.client_id, e.task_time, e.part, fname,
                            e.module.size, zlib.crc32(raw)))
        with open(directory / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["client_id", "task_time", "part", "file",
                             "dim", "crc32"])
            writer.writerows(records)

    @classmethod
    def load(cls, directory) -> "KnowledgePool":
        directory = Path(directory)
        pool = cls()
        with open(directory / "manifest.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                raw = (directory / row["file"]).read_bytes()
                if zlib.crc32(raw) != int(row["crc32"]):
                    raise InputError(f"checksum mismatch for {row['file']}")
                module = vector_from_bytes(raw)
                if module.size != int(row["dim"]):
                    raise InputError(f"dim mismatch for {row['file']}")
                pool.insert(PoolEntry(int(row["client_id"]),
                                      int(row["task_time"]),
                                      row["part"], module))
        return pool
