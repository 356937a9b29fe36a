"""Fragmentation and throughput benchmarks.

The fragmentation workload is a seeded imitation of an ext4-like allocator
(files laid out next-fit inside block groups, directories spread across
groups, a metadata block per group, occasional in-place metadata updates).
There is no journal, so an empty volume allocates nothing.
"""

from __future__ import annotations

import os
import random
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import crypto, engine
from .blockdev import BlockImage
from .crypto import FAST_COST, KdfCost
from .header import DeviceInstance, close_device, init_device, instantiate
from .layout import BLOCK_SIZE, SLICE_LOGICAL

MIB = 1 << 20
GROUP_BLOCKS = 2048          # scaled-down block group: 8 slices
THROUGHPUT_MODES = ("seqwrite", "seqread", "randwrite", "randread")
DEFAULT_CHECKPOINTS = tuple(round(0.05 * i, 2) for i in range(20))


def space_efficiency(written_blocks: int, allocated_slices: int) -> float:
    """Data written divided by slice-allocated space; 0 when nothing is allocated."""
    if allocated_slices == 0:
        return 0.0
    return written_blocks * BLOCK_SIZE / (allocated_slices * SLICE_LOGICAL * BLOCK_SIZE)


@dataclass
class _Group:
    start: int
    end: int
    cursor: int
    meta_written: bool = False


@dataclass
class FsSimulator:
    """Seeded file-extent allocator writing through a volume of ``capacity`` blocks."""

    capacity: int
    rng: random.Random
    write: Callable[[int], None]
    groups: list[_Group] = field(init=False)
    written: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.groups = [
            _Group(s, min(s + GROUP_BLOCKS, self.capacity), s + 1)
            for s in range(0, self.capacity, GROUP_BLOCKS)
        ]
        self._dir_group = 0
        self._files_left = 0

    def _put(self, block: int) -> None:
        self.write(block)
        self.written.add(block)

    def _touch_group(self, g: _Group) -> None:
        if not g.meta_written:
            self._put(g.start)  # bitmap / inode table block
            g.meta_written = True

    def _new_directory(self) -> None:
        free = [i for i, g in enumerate(self.groups) if g.cursor < g.end]
        self._dir_group = self.rng.choice(free)
        self._files_left = self.rng.randint(5, 30)
        g = self.groups[self._dir_group]
        self._touch_group(g)
        self._put(g.cursor)  # directory entry block
        g.cursor += 1

    def _file_blocks(self) -> int:
        return max(1, min(GROUP_BLOCKS // 2, int(self.rng.lognormvariate(2.5, 1.5))))

    def add_file(self) -> None:
        if self._files_left <= 0 or self.groups[self._dir_group].cursor >= self.groups[self._dir_group].end:
            self._new_directory()
        self._files_left -= 1
        need = self._file_blocks()
        gi = self._dir_group
        for _ in range(len(self.groups)):
            g = self.groups[gi]
            if g.cursor < g.end:
                self._touch_group(g)
                while need and g.cursor < g.end:
                    self._put(g.cursor)
                    g.cursor += 1
                    need -= 1
            if not need:
                break
            gi = (gi + 1) % len(self.groups)
        # in-place metadata update of the directory's group
        if self.rng.random() < 0.2:
            self.write(self.groups[self._dir_group].start)

    @property
    def full(self) -> bool:
        return all(g.cursor >= g.end for g in self.groups)


@dataclass
class SequentialFill:
    """Fills the volume front to back, one block at a time."""

    capacity: int
    write: Callable[[int], None]
    written: set[int] = field(default_factory=set)

    def add_file(self) -> None:
        block = len(self.written)
        self.write(block)
        self.written.add(block)

    @property
    def full(self) -> bool:
        return len(self.written) >= self.capacity


@dataclass
class FragResult:
    points: list[tuple[float, float]]   # (occupancy ratio, space efficiency)
    allocated_slices: int
    written_blocks: int

    def efficiency_at(self, occupancy: float) -> float:
        return min(self.points, key=lambda p: abs(p[0] - occupancy))[1]

    def to_text(self) -> str:
        rows = ["occupancy  efficiency"]
        rows += [f"{occ:9.2f}  {eff:10.4f}" for occ, eff in self.points]
        return "\n".join(rows)


def run_fragmentation(instance: DeviceInstance, volume: int, seed: int = 0,
                      checkpoints=DEFAULT_CHECKPOINTS, workload: str = "mixed") -> FragResult:
    """Fill ``volume`` and sample space efficiency at each occupancy checkpoint.

    ``workload`` is ``"mixed"`` (file-extent simulation) or ``"sequential"``.
    """
    payload = bytes(range(256)) * (BLOCK_SIZE // 256)
    capacity = instance.geometry.volume_blocks

    def write(b: int) -> None:
        engine.sflc_write(instance, volume, b, payload)

    if workload == "mixed":
        sim = FsSimulator(capacity, random.Random(seed), write)
    elif workload == "sequential":
        sim = SequentialFill(capacity, write)
    else:
        raise ValueError(f"unknown workload {workload!r}")
    points = []
    for target in sorted(checkpoints):
        while len(sim.written) < target * capacity and not sim.full:
            sim.add_file()
        allocated = len(engine.mapped_slices(instance, volume))
        occ = len(sim.written) / capacity
        points.append((round(occ, 4), space_efficiency(len(sim.written), allocated)))
    return FragResult(points, len(engine.mapped_slices(instance, volume)), len(sim.written))


def _fresh_device(path: Path, size_mib: int, cost: KdfCost, rng: random.Random | None) -> tuple[bytes, bytes]:
    with open(path, "wb") as f:
        f.truncate(size_mib * MIB)
    passwords = (b"bench-decoy", b"bench-hidden")
    init_device(path, passwords, skip_randfill=True, rng=rng, cost=cost)
    return passwords


def fragmentation_benchmark(size_mib: int = 64, seed: int = 0, cost: KdfCost = FAST_COST,
                            checkpoints=DEFAULT_CHECKPOINTS, workdir=None,
                            workload: str = "mixed") -> FragResult:
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = Path(tmp) / "frag.img"
        _, hidden = _fresh_device(path, size_mib, cost, random.Random(seed))
        inst = instantiate(path, hidden, cost=cost, rng=random.Random(seed + 1))
        try:
            return run_fragmentation(inst, 1, seed, checkpoints, workload)
        finally:
            close_device(inst)


class PlainCtrImage:
    """Single-key AES-CTR image, IV = block number; no indirection, no stored IVs."""

    def __init__(self, path: str | os.PathLike, key: bytes):
        self.image = BlockImage(path)
        self.key = key

    def _iv(self, block: int) -> bytes:
        return block.to_bytes(16, "little")

    def write(self, block: int, data: bytes) -> None:
        self.image.write_block(block, crypto.encrypt_block(self.key, self._iv(block), data))

    def read(self, block: int) -> bytes:
        return crypto.decrypt_block(self.key, self._iv(block), self.image.read_block(block))

    def close(self) -> None:
        self.image.close()


@dataclass
class ThroughputResult:
    mode: str
    target: str          # "sflc" or "baseline"
    bytes_moved: int
    seconds: float

    @property
    def mb_per_s(self) -> float:
        return self.bytes_moved / 1e6 / self.seconds if self.seconds > 0 else float("inf")


def _pattern(mode: str, n: int, rng: random.Random) -> list[int]:
    blocks = list(range(n))
    if mode.startswith("rand"):
        rng.shuffle(blocks)
    return blocks


def throughput_benchmark(mode: str, size_mib: int = 16, seed: int = 0, cost: KdfCost = FAST_COST,
                         baseline: bool = False, workdir=None) -> ThroughputResult:
    """Time ``size_mib`` of 4 KiB I/O in the given pattern through the engine or the baseline."""
    if mode not in THROUGHPUT_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = size_mib * MIB // BLOCK_SIZE
    rng = random.Random(seed)
    payload = random.Random(seed).randbytes(BLOCK_SIZE)
    order = _pattern(mode, n, rng)
    reading = mode.endswith("read")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        path = Path(tmp) / "bench.img"
        if baseline:
            with open(path, "wb") as f:
                f.truncate(n * BLOCK_SIZE)
            dev = PlainCtrImage(path, rng.randbytes(32))
            try:
                if reading:
                    for b in range(n):
                        dev.write(b, payload)
                t0 = time.perf_counter()
                if reading:
                    for b in order:
                        dev.read(b)
                else:
                    for b in order:
                        dev.write(b, payload)
                elapsed = time.perf_counter() - t0
            finally:
                dev.close()
            return ThroughputResult(mode, "baseline", n * BLOCK_SIZE, elapsed)

        # room for the data plus header and IV overhead
        device_mib = size_mib + size_mib // 64 + 2
        _, hidden = _fresh_device(path, device_mib, cost, random.Random(seed))
        inst = instantiate(path, hidden, cost=cost)
        try:
            if reading:
                for b in range(n):
                    engine.sflc_write(inst, 1, b, payload)
                engine.flush(inst)
            t0 = time.perf_counter()
            if reading:
                for b in order:
                    engine.sflc_read(inst, 1, b)
            else:
                for b in order:
                    engine.sflc_write(inst, 1, b, payload)
                engine.flush(inst)
            elapsed = time.perf_counter() - t0
        finally:
            close_device(inst)
        return ThroughputResult(mode, "sflc", n * BLOCK_SIZE, elapsed)


def compare_with_baseline(mode: str, size_mib: int = 16, seed: int = 0, cost: KdfCost = FAST_COST,
                          repeats: int = 3, workdir=None) -> tuple[float, ThroughputResult, ThroughputResult]:
    """Best-of-``repeats`` engine/baseline throughput ratio for one access pattern."""
    best_s = best_b = None
    for r in range(repeats):
        s = throughput_benchmark(mode, size_mib, seed + r, cost, baseline=False, workdir=workdir)
        b = throughput_benchmark(mode, size_mib, seed + r, cost, baseline=True, workdir=workdir)
        best_s = s if best_s is None or s.mb_per_s > best_s.mb_per_s else best_s
        best_b = b if best_b is None or b.mb_per_s > best_b.mb_per_s else best_b
    return best_s.mb_per_s / best_b.mb_per_s, best_s, best_b
