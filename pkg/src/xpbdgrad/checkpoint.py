"""Per-step storage of forward records, in memory with optional disk spill."""

from __future__ import annotations

import os
import pickle
import shutil
import tempfile

FORMAT_VERSION = 1


class CheckpointStore:
    """Holds every ForwardRecord of a trajectory, addressable by step index.

    With ``memory_budget`` set, records beyond that many steps are pickled
    to ``spill_dir`` (a private temp dir by default) and loaded on demand.
    Nothing is ever evicted.
    """

    def __init__(self, memory_budget: int | None = None, spill_dir: str | None = None):
        self.memory_budget = memory_budget
        self._spill_dir = spill_dir
        self._owns_dir = False
        self._mem: dict = {}
        self._disk: dict = {}

    def _dir(self) -> str:
        if self._spill_dir is None:
            self._spill_dir = tempfile.mkdtemp(prefix="xpbdgrad-ckpt-")
            self._owns_dir = True
        os.makedirs(self._spill_dir, exist_ok=True)
        return self._spill_dir

    def put(self, n: int, record) -> None:
        if self.memory_budget is None or len(self._mem) < self.memory_budget:
            self._mem[n] = record
            return
        path = os.path.join(self._dir(), f"step_{n:06d}.pkl")
        with open(path, "wb") as fh:
            pickle.dump((FORMAT_VERSION, record), fh, protocol=pickle.HIGHEST_PROTOCOL)
        self._disk[n] = path

    def get(self, n: int):
        if n in self._mem:
            return self._mem[n]
        if n in self._disk:
            with open(self._disk[n], "rb") as fh:
                version, record = pickle.load(fh)
            if version != FORMAT_VERSION:
                raise ValueError(f"checkpoint format {version} is not readable by this version")
            return record
        raise KeyError(f"no record stored for step {n}")

    def __contains__(self, n: int) -> bool:
        return n in self._mem or n in self._disk

    def __len__(self) -> int:
        return len(self._mem) + len(self._disk)

    def clear(self) -> None:
        for p in self._disk.values():
            if os.path.exists(p):
                os.remove(p)
        self._mem.clear()
        self._disk.clear()

    def close(self) -> None:
        self.clear()
        if self._owns_dir and self._spill_dir and os.path.isdir(self._spill_dir):
            shutil.rmtree(self._spill_dir, ignore_errors=True)

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass
