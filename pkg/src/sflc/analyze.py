"""Adversary-side analysis: snapshot diffs, random refresh, and the single-snapshot PD harness."""

from __future__ import annotations

import json
import os
import random
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import crypto, engine, randomness
from .alloc import SliceAllocator
from .blockdev import BlockImage
from .crypto import FAST_COST, KdfCost
from .errors import ConstraintViolation, SizeMismatch
from .header import (
    DeviceInstance,
    abort_device,
    close_device,
    format_device,
    instantiate,
    read_volume_chain,
)
from .layout import (
    BLOCK_SIZE,
    DMB_CELL_LEN,
    DMB_PADDING_OFFSET,
    IV_LEN,
    MAX_VOLUMES,
    SLICE_LOGICAL,
    SLICE_PHYSICAL,
    UNMAPPED,
    Geometry,
    compute_geometry,
    dmb_cell_offset,
    slice_block_address,
)

# ---------------------------------------------------------------------------
# snapshot diffs


@dataclass(frozen=True)
class SliceDiff:
    psi: int
    bitmask: int  # bit m set iff block m of the physical slice differs

    @property
    def changed(self) -> int:
        return self.bitmask.bit_count()

    def blocks(self) -> list[int]:
        return [m for m in range(SLICE_PHYSICAL) if self.bitmask >> m & 1]


@dataclass
class SnapshotDiff:
    slices: list[SliceDiff]
    header_blocks: list[int]       # changed blocks in [0, header_blocks)
    dmb_cells: list[int]           # DMB cells whose 64 bytes differ
    tail_blocks: list[int]

    def nonzero(self) -> list[SliceDiff]:
        return [d for d in self.slices if d.bitmask]

    def to_text(self) -> str:
        lines = [
            f"header: {len(self.header_blocks)} changed blocks, DMB cells changed: {self.dmb_cells or 'none'}",
            f"tail: {len(self.tail_blocks)} changed blocks",
        ]
        nz = self.nonzero()
        lines.append(f"slices: {len(nz)} of {len(self.slices)} changed")
        for d in nz:
            lines.append(f"  psi {d.psi:6d}  {d.changed:3d}/{SLICE_PHYSICAL}  {d.bitmask:065x}")
        return "\n".join(lines)


def _as_bytes_array(src) -> np.ndarray:
    if isinstance(src, (bytes, bytearray, memoryview)):
        return np.frombuffer(src, dtype=np.uint8)
    if isinstance(src, np.ndarray):
        return src.view(np.uint8).ravel()
    if os.path.getsize(src) == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.memmap(src, dtype=np.uint8, mode="r")


def changed_blocks(a: np.ndarray, b: np.ndarray, chunk_blocks: int = 4096) -> np.ndarray:
    n = len(a) // BLOCK_SIZE
    out = np.zeros(n, dtype=bool)
    for lo in range(0, n, chunk_blocks):
        hi = min(n, lo + chunk_blocks)
        ca = a[lo * BLOCK_SIZE:hi * BLOCK_SIZE].reshape(-1, BLOCK_SIZE)
        cb = b[lo * BLOCK_SIZE:hi * BLOCK_SIZE].reshape(-1, BLOCK_SIZE)
        out[lo:hi] = (ca != cb).any(axis=1)
    return out


def snapshot_diff(image_a, image_b, geometry: Geometry | None = None) -> SnapshotDiff:
    """Per-slice bitmask of blocks that differ between two snapshots (paths or bytes)."""
    a, b = _as_bytes_array(image_a), _as_bytes_array(image_b)
    if len(a) != len(b) or len(a) % BLOCK_SIZE:
        raise SizeMismatch(f"snapshots of {len(a)} and {len(b)} bytes are not comparable")
    geometry = geometry or compute_geometry(len(a) // BLOCK_SIZE)
    if geometry.total_blocks * BLOCK_SIZE != len(a):
        raise SizeMismatch("geometry does not match the snapshot size")
    changed = changed_blocks(a, b)

    slices = []
    start = geometry.data_start_block
    for psi in range(geometry.num_slices):
        row = changed[start + psi * SLICE_PHYSICAL:start + (psi + 1) * SLICE_PHYSICAL]
        bits = int.from_bytes(np.packbits(row, bitorder="little").tobytes(), "little")
        slices.append(SliceDiff(psi, bits))

    cells = [
        i for i in range(MAX_VOLUMES)
        if not np.array_equal(a[dmb_cell_offset(i):dmb_cell_offset(i) + DMB_CELL_LEN],
                              b[dmb_cell_offset(i):dmb_cell_offset(i) + DMB_CELL_LEN])
    ]
    header = np.flatnonzero(changed[:geometry.header_blocks]).tolist()
    tail = (np.flatnonzero(changed[geometry.data_end_block:]) + geometry.data_end_block).tolist()
    return SnapshotDiff(slices, header, cells, tail)


# ---------------------------------------------------------------------------
# trivial random refresh


@dataclass(frozen=True)
class RefreshPolicy:
    p: float  # per-block re-randomisation probability in free slices
    q: float  # per-block re-encryption probability in data slices

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")


def _coin(rng: random.Random, prob: float) -> bool:
    return prob >= 1.0 or (prob > 0.0 and rng.random() < prob)


def random_refresh(instance: DeviceInstance, policy: RefreshPolicy, rng: random.Random | None = None) -> dict[str, int]:
    """Re-randomise free-slice blocks with probability p, re-encrypt data blocks with probability q.

    Logical contents of the open volumes do not change. Returns counts of
    touched blocks.
    """
    instance.ensure_open()
    rng = rng or instance.rng
    geo, image, cache = instance.geometry, instance.image, instance.iv_cache
    randomized = reencrypted = 0
    if policy.p > 0:
        for psi in range(geo.num_slices):
            if instance.bfld[psi]:
                continue
            start = geo.slice_start(psi)
            for m in range(SLICE_PHYSICAL):
                if _coin(rng, policy.p):
                    image.write_block(start + m, crypto.random_fill(BLOCK_SIZE, rng))
                    randomized += 1
    if policy.q > 0:
        for vol in instance.volumes.values():
            for psi in vol.pos_map:
                if psi == UNMAPPED:
                    continue
                iv_block = geo.slice_start(psi)
                for off in range(SLICE_LOGICAL):
                    if not _coin(rng, policy.q):
                        continue
                    addr = slice_block_address(geo, psi, off)
                    plain = crypto.decrypt_block(vol.vek, cache.load_iv(iv_block, off), image.read_block(addr))
                    iv = crypto.random_fill(IV_LEN, rng)
                    cache.store_iv(iv_block, off, iv)
                    image.write_block(addr, crypto.encrypt_block(vol.vek, iv, plain))
                    reencrypted += 1
    return {"randomized": randomized, "reencrypted": reencrypted}


# ---------------------------------------------------------------------------
# access patterns and constraints


class Access(NamedTuple):
    op: str          # "read" or "write"
    volume: int
    block: int
    data: bytes | None = None


PdTrace = Sequence[Access | None]   # None is the empty access


@dataclass(frozen=True)
class Violation:
    constraint: str
    volume: int
    block: int | None
    detail: str = ""

    def __str__(self) -> str:
        where = f"volume {self.volume}" + (f" block {self.block}" if self.block is not None else "")
        return f"{self.constraint}: {where} {self.detail}".rstrip()


def _replay_writes(trace: PdTrace) -> dict[tuple[int, int], bytes]:
    last: dict[tuple[int, int], bytes] = {}
    for acc in trace:
        if acc is not None and acc.op == "write":
            last[(acc.volume, acc.block)] = bytes(acc.data)
    return last


def check_pd_constraints(trace_0: PdTrace, trace_1: PdTrace, ell: int) -> list[Violation]:
    """Legality of a trace pair: equal final decoy contents and equal decoy write sets.

    Volumes are 0-based: decoys are ``0 .. ell-2``, the hidden volume is ``ell-1``.
    An empty list means the pair is legal.
    """
    if not 1 <= ell <= MAX_VOLUMES:
        raise ValueError("ell out of range")
    hidden = ell - 1
    out: list[Violation] = []
    for name, trace, limit in (("trace_0", trace_0, ell), ("trace_1", trace_1, hidden)):
        for acc in trace:
            if acc is None:
                continue
            if acc.op not in ("read", "write"):
                out.append(Violation("malformed", acc.volume, acc.block, f"{name}: unknown op {acc.op!r}"))
            elif not 0 <= acc.volume < limit:
                out.append(Violation("volume-range", acc.volume, acc.block, f"{name} addresses a volume it cannot see"))
            elif acc.op == "write" and (acc.data is None or len(acc.data) != BLOCK_SIZE):
                out.append(Violation("malformed", acc.volume, acc.block, f"{name}: write needs {BLOCK_SIZE} bytes"))
    if out:
        return out

    last0 = {k: v for k, v in _replay_writes(trace_0).items() if k[0] < hidden}
    last1 = _replay_writes(trace_1)
    for key in sorted(last0.keys() ^ last1.keys()):
        who = "trace_0" if key in last0 else "trace_1"
        out.append(Violation("written-set", key[0], key[1], f"written only by {who}"))
    for key in sorted(last0.keys() & last1.keys()):
        if last0[key] != last1[key]:
            out.append(Violation("contents", key[0], key[1], "final decoy contents differ"))
    return out


# ---------------------------------------------------------------------------
# single-snapshot structural PD harness


@dataclass
class CheckRecord:
    name: str
    statistic: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class PdReport:
    checks: list[CheckRecord] = field(default_factory=list)
    trials: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckRecord:
        return next(c for c in self.checks if c.name == name)

    def to_text(self) -> str:
        lines = [f"pd structural test: {self.trials} trials"]
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            lines.append(f"{mark} {c.name}: statistic={c.statistic:.6g} threshold={c.threshold:.6g} {c.detail}".rstrip())
        return "\n".join(lines)

    def write_records(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for c in self.checks:
                f.write(json.dumps(asdict(c)) + "\n")


def run_trace(instance: DeviceInstance, trace: PdTrace) -> None:
    for acc in trace:
        if acc is None:
            continue
        if acc.op == "write":
            engine.sflc_write(instance, acc.volume, acc.block, acc.data)
        else:
            engine.sflc_read(instance, acc.volume, acc.block)


def unexplained_histogram(image: BlockImage, geometry: Geometry, revealed: int,
                          decoy_psis: Iterable[int]) -> np.ndarray:
    """Byte histogram of every region the revealed volumes ``0 .. revealed-1`` do not account for."""
    hist = np.zeros(256, dtype=np.int64)
    dmb = image.read_block(0)
    # unrevealed cells and the padding after the last cell are contiguous
    first = dmb_cell_offset(revealed) if revealed < MAX_VOLUMES else DMB_PADDING_OFFSET
    hist += randomness.byte_histogram(dmb[first:])
    if revealed < MAX_VOLUMES:
        start = geometry.volume_header_start(revealed)
        hist += randomness.byte_histogram(image.read_blocks(start, geometry.header_blocks - start))
    explained = set(decoy_psis)
    for psi in range(geometry.num_slices):
        if psi not in explained:
            hist += randomness.byte_histogram(image.read_blocks(geometry.slice_start(psi), SLICE_PHYSICAL))
    tail = geometry.total_blocks - geometry.data_end_block
    if tail:
        hist += randomness.byte_histogram(image.read_blocks(geometry.data_end_block, tail))
    return hist


@dataclass
class _Snapshot:
    decoy_maps: dict[int, dict[int, int]]
    contents: dict[tuple[int, int], bytes]
    hist: np.ndarray
    regions: list


def _adversary_view(path: Path, geometry: Geometry, decoy_passwords: list[bytes],
                    written: Iterable[tuple[int, int]], cost: KdfCost) -> _Snapshot:
    revealed = len(decoy_passwords)
    maps: dict[int, dict[int, int]] = {}
    contents: dict[tuple[int, int], bytes] = {}
    with BlockImage(path, writable=False) as image:
        if revealed:
            headers = read_volume_chain(image, decoy_passwords[-1], cost)
            assert [h.index for h in headers] == list(range(revealed))
            for h in headers:
                maps[h.index] = {lsi: psi for lsi, psi in enumerate(h.pos_map) if psi != UNMAPPED}
            inst = instantiate(path, decoy_passwords[-1], cost=cost, lock=False)
            try:
                for vol, block in written:
                    contents[(vol, block)] = engine.sflc_read(inst, vol, block)
            finally:
                abort_device(inst)
        psis = [psi for m in maps.values() for psi in m.values()]
        hist = unexplained_histogram(image, geometry, revealed, psis)
    return _Snapshot(maps, contents, hist, geometry.regions())


def pd_structural_test(total_blocks: int, ell: int, trace_0: PdTrace, trace_1: PdTrace, trials: int,
                       rng: random.Random | None = None, *, alpha: float = 0.001, cost: KdfCost = FAST_COST,
                       allocator_factory=SliceAllocator, workdir: str | os.PathLike | None = None) -> PdReport:
    """Build D_0 (ell volumes, trace_0) and D_1 (ell-1 volumes, trace_1) ``trials`` times and compare
    what an adversary holding the decoy passwords can see.

    Checks: (a) decoy contents, (b) region boundaries, (c) randomness of the
    unexplained regions with Bonferroni correction, (d) decoy PSI occupancy
    distributions (two-sample chi-square).
    """
    violations = check_pd_constraints(trace_0, trace_1, ell)
    if violations:
        raise ConstraintViolation(violations)
    rng = rng or crypto.system_rng
    geometry = compute_geometry(total_blocks)
    expected = _replay_writes(trace_1)
    written = sorted(expected)
    decoy_count = ell - 1

    content_mismatch = 0
    map_mismatch = 0
    region_mismatch = 0
    p_values: list[float] = []
    occupancy = np.zeros((2, geometry.num_slices), dtype=np.int64)

    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for t in range(trials):
            decoys = [f"decoy-{t}-{i}".encode() for i in range(decoy_count)]
            hidden = crypto.random_fill(24, rng).hex().encode()
            snaps = []
            for b, (pws, trace, opener) in enumerate((
                (decoys + [hidden], trace_0, hidden),
                (decoys, trace_1, decoys[-1] if decoys else None),
            )):
                path = Path(tmp) / f"d{b}.img"
                with BlockImage.create(path, total_blocks) as image:
                    format_device(image, pws, rng=rng, cost=cost)
                if opener is not None:
                    inst = instantiate(path, opener, cost=cost, rng=rng, allocator_factory=allocator_factory)
                    run_trace(inst, trace)
                    close_device(inst)
                snaps.append(_adversary_view(path, geometry, decoys, written, cost))
            s0, s1 = snaps
            if s0.contents != s1.contents or s0.contents != expected:
                content_mismatch += 1
            if {v: set(m) for v, m in s0.decoy_maps.items()} != {v: set(m) for v, m in s1.decoy_maps.items()}:
                map_mismatch += 1
            if s0.regions != s1.regions or os.path.getsize(Path(tmp) / "d0.img") != os.path.getsize(Path(tmp) / "d1.img"):
                region_mismatch += 1
            for b, s in enumerate(snaps):
                p_values.extend(r.p_value for r in (randomness.monobit_from_histogram(s.hist),
                                                    randomness.byte_chi2_from_histogram(s.hist)))
                for m in s.decoy_maps.values():
                    for psi in m.values():
                        occupancy[b, psi] += 1

    report = PdReport(trials=trials)
    report.checks.append(CheckRecord(
        "a_decoy_contents", content_mismatch + map_mismatch, 0, content_mismatch + map_mismatch == 0,
        f"content mismatches={content_mismatch} mapped-LSI mismatches={map_mismatch}"))
    report.checks.append(CheckRecord(
        "b_region_boundaries", region_mismatch, 0, region_mismatch == 0))
    bonferroni = alpha / max(len(p_values), 1)
    min_p = min(p_values) if p_values else 1.0
    report.checks.append(CheckRecord(
        "c_unexplained_randomness", min_p, bonferroni, min_p > bonferroni,
        f"min p-value over {len(p_values)} tests"))
    cols = occupancy.sum(axis=0) > 0
    if occupancy.sum() == 0 or cols.sum() < 2:
        p_occ = 1.0
        stat = 0.0
    else:
        stat, p_occ, _, _ = stats.chi2_contingency(occupancy[:, cols])
    report.checks.append(CheckRecord(
        "d_decoy_occupancy", float(p_occ), alpha, bool(p_occ > alpha),
        f"chi2={float(stat):.4g} over {int(cols.sum())} PSIs, samples={occupancy.sum(axis=1).tolist()}"))
    return report
