"""Device master block, volume headers and the device lifecycle.

Block 0 (DMB)::

    version(1) || kdf_salt(32) || 15 x cell(iv16 || wrapped_vmk32 || tag16) || random

A cell of an absent volume is random bytes and fails to unwrap under every
key. Volume header ``i`` starts with its VMB (``iv16 || CTR_VMK(VEK || prev_VMK
|| num_slices u64le || random)``), followed by the encrypted position map:
``pm_iv_blocks`` of packed IVs, then ``pm_payload_blocks`` each encrypted
under ``VEK`` with its own IV. Map entries are u32 little-endian PSIs with
``0xFFFFFFFF`` meaning unmapped.
"""

from __future__ import annotations

import logging
import os
import random
import struct
import sys
from array import array
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .alloc import SliceAllocator
from .blockdev import BlockImage, ImageLock
from .crypto import DEFAULT_COST, KdfCost
from .errors import (
    AuthFailure,
    Corrupt,
    DuplicatePassword,
    EmptyPassword,
    InstanceClosed,
    NoMatch,
    SamePassword,
    VolumeNotOpen,
)
from .ivcache import DEFAULT_CAPACITY, IvCache
from .layout import (
    BLOCK_SIZE,
    DMB_CELL_LEN,
    DMB_PADDING_OFFSET,
    FORMAT_VERSION,
    IV_LEN,
    KEY_LEN,
    MAX_VOLUMES,
    SALT_LEN,
    UNMAPPED,
    VMB_PAYLOAD_LEN,
    Geometry,
    compute_geometry,
    dmb_cell_offset,
)

log = logging.getLogger(__name__)

_RANDFILL_CHUNK = 1 << 20


@dataclass(frozen=True)
class DmbCell:
    iv: bytes
    wrapped_vmk: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.iv + self.wrapped_vmk + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DmbCell":
        if len(raw) != DMB_CELL_LEN:
            raise ValueError("DMB cell must be 64 bytes")
        return cls(raw[:IV_LEN], raw[IV_LEN:IV_LEN + KEY_LEN], raw[IV_LEN + KEY_LEN:])


@dataclass(frozen=True)
class Dmb:
    version: int
    kdf_salt: bytes
    cells: tuple[DmbCell, ...]
    padding: bytes

    def to_bytes(self) -> bytes:
        out = bytes([self.version]) + self.kdf_salt + b"".join(c.to_bytes() for c in self.cells) + self.padding
        assert len(out) == BLOCK_SIZE
        return out

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dmb":
        if len(raw) != BLOCK_SIZE:
            raise ValueError("DMB must be one block")
        cells = tuple(
            DmbCell.from_bytes(raw[dmb_cell_offset(i):dmb_cell_offset(i) + DMB_CELL_LEN])
            for i in range(MAX_VOLUMES)
        )
        return cls(raw[0], raw[1:1 + SALT_LEN], cells, raw[DMB_PADDING_OFFSET:])


@dataclass
class VolumeHeader:
    """Decrypted view of one volume header."""

    index: int
    vek: bytearray
    prev_vmk: bytearray
    num_slices: int
    pos_map: array


# ---------------------------------------------------------------------------
# serialization

def _u32_le_bytes(arr: array) -> bytes:
    if sys.byteorder == "little":
        return arr.tobytes()
    swapped = array("I", arr)
    swapped.byteswap()
    return swapped.tobytes()


def _u32_le_array(raw: bytes) -> array:
    arr = array("I")
    arr.frombytes(raw)
    if sys.byteorder != "little":
        arr.byteswap()
    return arr


def empty_position_map(geometry: Geometry) -> array:
    return array("I", [UNMAPPED]) * geometry.max_slices_bound


def encode_vmb(vmk: bytes, vek: bytes, prev_vmk: bytes, num_slices: int, rng: random.Random | None = None) -> bytes:
    plain = bytes(vek) + bytes(prev_vmk) + struct.pack("<Q", num_slices)
    plain += crypto.random_fill(VMB_PAYLOAD_LEN - len(plain), rng)
    iv = crypto.random_fill(IV_LEN, rng)
    return iv + crypto.ctr_xcrypt(vmk, iv, plain)


def decode_vmb(vmk: bytes, block: bytes) -> tuple[bytearray, bytearray, int]:
    plain = crypto.ctr_xcrypt(vmk, block[:IV_LEN], block[IV_LEN:])
    vek = bytearray(plain[:KEY_LEN])
    prev_vmk = bytearray(plain[KEY_LEN:2 * KEY_LEN])
    (num_slices,) = struct.unpack_from("<Q", plain, 2 * KEY_LEN)
    return vek, prev_vmk, num_slices


def encode_position_map(geometry: Geometry, vek: bytes, pos_map: array, rng: random.Random | None = None) -> bytes:
    """Serialize and encrypt a position map with fresh IVs (IV blocks first)."""
    if len(pos_map) != geometry.max_slices_bound:
        raise ValueError("position map has the wrong length")
    n_payload = geometry.pm_payload_blocks
    plain = _u32_le_bytes(pos_map)
    plain += b"\xff" * (n_payload * BLOCK_SIZE - len(plain))
    ivs = crypto.random_fill(n_payload * IV_LEN, rng)
    iv_region = ivs + crypto.random_fill(geometry.pm_iv_blocks * BLOCK_SIZE - len(ivs), rng)
    payload = b"".join(
        crypto.encrypt_block(vek, ivs[j * IV_LEN:(j + 1) * IV_LEN], plain[j * BLOCK_SIZE:(j + 1) * BLOCK_SIZE])
        for j in range(n_payload)
    )
    return iv_region + payload


def decode_position_map(geometry: Geometry, vek: bytes, raw: bytes) -> array:
    n_payload = geometry.pm_payload_blocks
    iv_len = geometry.pm_iv_blocks * BLOCK_SIZE
    plain = b"".join(
        crypto.decrypt_block(
            vek,
            raw[j * IV_LEN:(j + 1) * IV_LEN],
            raw[iv_len + j * BLOCK_SIZE:iv_len + (j + 1) * BLOCK_SIZE],
        )
        for j in range(n_payload)
    )
    return _u32_le_array(plain[:geometry.max_slices_bound * 4])


def validate_position_map(geometry: Geometry, pos_map: array) -> None:
    seen: set[int] = set()
    for lsi, psi in enumerate(pos_map):
        if psi == UNMAPPED:
            continue
        if lsi >= geometry.num_slices or psi >= geometry.num_slices:
            raise Corrupt(f"position map entry {lsi} -> {psi} out of range")
        if psi in seen:
            raise Corrupt(f"PSI {psi} mapped twice")
        seen.add(psi)


def store_position_map(image: BlockImage, geometry: Geometry, index: int, vek: bytes, pos_map: array,
                       rng: random.Random | None = None) -> None:
    image.write_blocks(geometry.pm_iv_start(index), encode_position_map(geometry, vek, pos_map, rng))


def load_position_map(image: BlockImage, geometry: Geometry, index: int, vek: bytes) -> array:
    raw = image.read_blocks(geometry.pm_iv_start(index), geometry.pm_iv_blocks + geometry.pm_payload_blocks)
    return decode_position_map(geometry, vek, raw)


def read_dmb(image: BlockImage) -> Dmb:
    dmb = Dmb.from_bytes(image.read_block(0))
    if dmb.version != FORMAT_VERSION:
        raise Corrupt(f"unsupported format version {dmb.version:#04x}")
    return dmb


# ---------------------------------------------------------------------------
# password handling

def _check_passwords(passwords: Sequence[bytes | str], allow_none: bool = False) -> list[bytes]:
    pws = [p.encode("utf-8") if isinstance(p, str) else bytes(p) for p in passwords]
    if not allow_none and not pws:
        raise ValueError("at least one volume is required")
    if len(pws) > MAX_VOLUMES:
        raise ValueError(f"at most {MAX_VOLUMES} volumes are supported")
    if any(not p for p in pws):
        raise EmptyPassword("password must not be empty")
    if len(set(pws)) != len(pws):
        raise DuplicatePassword("volume passwords must be pairwise distinct")
    return pws


def find_cell(dmb: Dmb, kek: bytes) -> tuple[int, bytearray]:
    """Probe cells from the highest index down; returns ``(index, vmk)``."""
    for i in reversed(range(MAX_VOLUMES)):
        cell = dmb.cells[i]
        try:
            return i, bytearray(crypto.unwrap_key(kek, cell.iv, cell.wrapped_vmk, cell.tag))
        except AuthFailure:
            continue
    raise NoMatch("password does not unlock any volume")


def _as_image(image: BlockImage | str | os.PathLike, writable: bool) -> tuple[BlockImage, bool]:
    if isinstance(image, BlockImage):
        return image, False
    return BlockImage(image, writable=writable), True


# ---------------------------------------------------------------------------
# init

def format_device(image: BlockImage, passwords: Sequence[bytes], *, skip_randfill: bool = False,
                  rng: random.Random | None = None, cost: KdfCost = DEFAULT_COST) -> Geometry:
    """Write a fresh header for ``len(passwords)`` volumes (may be zero)."""
    geometry = compute_geometry(image.num_blocks)
    if not skip_randfill:
        for start in range(0, image.num_blocks, _RANDFILL_CHUNK // BLOCK_SIZE):
            count = min(_RANDFILL_CHUNK // BLOCK_SIZE, image.num_blocks - start)
            image.write_blocks(start, crypto.random_fill(count * BLOCK_SIZE, rng))

    ell = len(passwords)
    salt = crypto.random_fill(SALT_LEN, rng)
    vmks = [crypto.random_fill(KEY_LEN, rng) for _ in range(ell)]
    cells = []
    for i in range(MAX_VOLUMES):
        if i < ell:
            kek = crypto.kdf_derive(passwords[i], salt, cost)
            cells.append(DmbCell(*crypto.wrap_key(kek, vmks[i], rng)))
        else:
            cells.append(DmbCell.from_bytes(crypto.random_fill(DMB_CELL_LEN, rng)))
    dmb = Dmb(FORMAT_VERSION, salt, tuple(cells), crypto.random_fill(BLOCK_SIZE - DMB_PADDING_OFFSET, rng))

    parts = [dmb.to_bytes()]
    empty = empty_position_map(geometry)
    for i in range(MAX_VOLUMES):
        if i < ell:
            vek = crypto.random_fill(KEY_LEN, rng)
            prev = vmks[i - 1] if i > 0 else crypto.random_fill(KEY_LEN, rng)
            parts.append(encode_vmb(vmks[i], vek, prev, geometry.num_slices, rng))
            parts.append(encode_position_map(geometry, vek, empty, rng))
        else:
            parts.append(crypto.random_fill(geometry.volume_header_blocks * BLOCK_SIZE, rng))
    header = b"".join(parts)
    assert len(header) == geometry.header_bytes
    image.write_blocks(0, header)
    return geometry


def init_device(image: BlockImage | str | os.PathLike, passwords: Sequence[bytes | str], *,
                skip_randfill: bool = False, rng: random.Random | None = None,
                cost: KdfCost = DEFAULT_COST) -> Geometry:
    """Format ``image`` with one volume per password (1 to 15)."""
    pws = _check_passwords(passwords)
    img, owned = _as_image(image, writable=True)
    try:
        compute_geometry(img.num_blocks)
        return format_device(img, pws, skip_randfill=skip_randfill, rng=rng, cost=cost)
    finally:
        if owned:
            img.close()


# ---------------------------------------------------------------------------
# unlocking

def read_volume_chain(image: BlockImage, password: bytes | str, cost: KdfCost = DEFAULT_COST) -> list[VolumeHeader]:
    """Decrypt the header of the volume owning ``password`` and all volumes below it.

    Read-only. Returns headers ordered by index, volume 0 first.
    """
    geometry = compute_geometry(image.num_blocks)
    dmb = read_dmb(image)
    kek = crypto.kdf_derive(password, dmb.kdf_salt, cost)
    top, vmk = find_cell(dmb, kek)
    headers = []
    for i in range(top, -1, -1):
        vek, prev_vmk, num_slices = decode_vmb(vmk, image.read_block(geometry.vmb_block(i)))
        if num_slices != geometry.num_slices:
            raise Corrupt(f"volume {i}: header says {num_slices} slices, device has {geometry.num_slices}")
        pos_map = load_position_map(image, geometry, i, vek)
        validate_position_map(geometry, pos_map)
        headers.append(VolumeHeader(i, vek, prev_vmk, num_slices, pos_map))
        crypto.zeroize(vmk)
        vmk = prev_vmk
    headers.reverse()
    return headers


@dataclass
class Volume:
    """Open volume state held by a DeviceInstance."""

    index: int
    vek: bytearray
    pos_map: array
    dirty: bool = False
    # lsi -> 256 flags, 1 = block content discardable (trimmed, or never
    # written since the slice was allocated this session)
    discard: dict[int, bytearray] = field(default_factory=dict)


class DeviceInstance:
    """In-RAM state of an unlocked device. One logical operation at a time."""

    def __init__(self, path: Path, image: BlockImage, geometry: Geometry, volumes: list[Volume],
                 allocator: SliceAllocator, iv_cache: IvCache, rng: random.Random,
                 lock: ImageLock | None):
        self.path = path
        self.image = image
        self.geometry = geometry
        self.volumes = {v.index: v for v in volumes}
        self.allocator = allocator
        self.iv_cache = iv_cache
        self.rng = rng
        self.lock = lock
        self.closed = False

    @property
    def open_indices(self) -> list[int]:
        return sorted(self.volumes)

    @property
    def bfld(self) -> bytearray:
        return self.allocator.bfld

    def volume(self, index: int) -> Volume:
        if self.closed:
            raise InstanceClosed("device instance is closed")
        try:
            return self.volumes[index]
        except KeyError:
            raise VolumeNotOpen(f"volume {index} is not open") from None

    def ensure_open(self) -> None:
        if self.closed:
            raise InstanceClosed("device instance is closed")


AllocatorFactory = Callable[..., SliceAllocator]


def instantiate(path: str | os.PathLike, password: bytes | str, *, cost: KdfCost = DEFAULT_COST,
                rng: random.Random | None = None, iv_cache_capacity: int = DEFAULT_CAPACITY,
                allocator_factory: AllocatorFactory = SliceAllocator, lock: bool = True) -> DeviceInstance:
    """Unlock the volume owning ``password`` and every volume below it."""
    rng = rng or crypto.system_rng
    path = Path(path)
    image_lock = ImageLock(path).acquire() if lock else None
    image = None
    try:
        image = BlockImage(path)
        geometry = compute_geometry(image.num_blocks)
        headers = read_volume_chain(image, password, cost)
        occupied: set[int] = set()
        volumes = []
        for h in headers:
            for psi in h.pos_map:
                if psi == UNMAPPED:
                    continue
                if psi in occupied:
                    raise Corrupt(f"PSI {psi} claimed by more than one volume")
                occupied.add(psi)
            crypto.zeroize(h.prev_vmk)
            volumes.append(Volume(h.index, h.vek, h.pos_map))
        allocator = allocator_factory(geometry.num_slices, occupied, rng)
        inst = DeviceInstance(path, image, geometry, volumes, allocator,
                              IvCache(image, iv_cache_capacity), rng, image_lock)
        log.debug("opened volumes %s on %s", inst.open_indices, path)
        return inst
    except BaseException:
        if image is not None:
            image.close()
        if image_lock is not None:
            image_lock.release()
        raise


def persist_position_maps(instance: DeviceInstance, only_dirty: bool = True) -> int:
    """Re-encrypt and write position maps with fresh IVs; returns how many were written."""
    instance.ensure_open()
    written = 0
    for vol in instance.volumes.values():
        if only_dirty and not vol.dirty:
            continue
        store_position_map(instance.image, instance.geometry, vol.index, vol.vek, vol.pos_map, instance.rng)
        vol.dirty = False
        written += 1
    return written


def _teardown(instance: DeviceInstance) -> None:
    for vol in instance.volumes.values():
        crypto.zeroize(vol.vek)
    instance.volumes.clear()
    instance.iv_cache.clear()
    instance.closed = True
    instance.image.close()
    if instance.lock is not None:
        instance.lock.release()


def close_device(instance: DeviceInstance) -> None:
    """Flush IVs, persist every open position map with fresh IVs, forget keys."""
    instance.ensure_open()
    try:
        instance.iv_cache.flush()
        persist_position_maps(instance, only_dirty=False)
        instance.image.sync()
    finally:
        _teardown(instance)


def abort_device(instance: DeviceInstance) -> None:
    """Drop an instance without writing anything back."""
    instance.ensure_open()
    _teardown(instance)


# ---------------------------------------------------------------------------
# password tools

def testpwd(path: str | os.PathLike, password: bytes | str, cost: KdfCost = DEFAULT_COST) -> int:
    """Index of the volume ``password`` unlocks. Never writes to the image."""
    with BlockImage(path, writable=False) as image:
        dmb = read_dmb(image)
        kek = crypto.kdf_derive(password, dmb.kdf_salt, cost)
        index, vmk = find_cell(dmb, kek)
        crypto.zeroize(vmk)
        return index


def changepwd(path: str | os.PathLike, old_password: bytes | str, new_password: bytes | str,
              cost: KdfCost = DEFAULT_COST, rng: random.Random | None = None) -> int:
    """Re-wrap one volume's VMK under a new password. Only that 64-byte cell changes."""
    if not new_password:
        raise EmptyPassword("password must not be empty")
    image_lock = ImageLock(path).acquire()
    try:
        with BlockImage(path) as image:
            dmb = read_dmb(image)
            index, vmk = find_cell(dmb, crypto.kdf_derive(old_password, dmb.kdf_salt, cost))
            new_kek = crypto.kdf_derive(new_password, dmb.kdf_salt, cost)
            for j in range(MAX_VOLUMES):
                if j == index:
                    continue
                cell = dmb.cells[j]
                try:
                    crypto.unwrap_key(new_kek, cell.iv, cell.wrapped_vmk, cell.tag)
                except AuthFailure:
                    continue
                raise SamePassword(f"new password already unlocks volume {j}")
            cell = DmbCell(*crypto.wrap_key(new_kek, vmk, rng))
            crypto.zeroize(vmk)
            image.write_bytes(dmb_cell_offset(index), cell.to_bytes())
            image.sync()
            return index
    finally:
        image_lock.release()


def wipe_header(path: str | os.PathLike, password: bytes | str, cost: KdfCost = DEFAULT_COST,
                rng: random.Random | None = None) -> int:
    """Destroy a volume by re-randomizing its DMB cell (equivalent to forgetting the password)."""
    image_lock = ImageLock(path).acquire()
    try:
        with BlockImage(path) as image:
            dmb = read_dmb(image)
            index, vmk = find_cell(dmb, crypto.kdf_derive(password, dmb.kdf_salt, cost))
            crypto.zeroize(vmk)
            image.write_bytes(dmb_cell_offset(index), crypto.random_fill(DMB_CELL_LEN, rng))
            return index
    finally:
        image_lock.release()


__all__ = [
    "DeviceInstance",
    "Dmb",
    "DmbCell",
    "Volume",
    "VolumeHeader",
    "abort_device",
    "changepwd",
    "close_device",
    "init_device",
    "instantiate",
    "persist_position_maps",
    "read_volume_chain",
    "testpwd",
    "wipe_header",
]
