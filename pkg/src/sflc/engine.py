"""Logical block I/O through the slice indirection layer.

A logical block ``B`` of a volume lives in logical slice ``B // 256`` at
offset ``B % 256``; the volume's position map sends the logical slice to a
physical one. Reads of unmapped slices return zeros and never touch the
image. Writes allocate slices lazily, draw a fresh IV per write and keep IV
blocks in the write-back cache; data blocks go to the image immediately.

Blocks that were trimmed, or never written since their slice was allocated
in this session, read as zeros. That knowledge is session-local: after a
reopen, never-written blocks of an allocated slice decrypt to noise.
"""

from __future__ import annotations

from typing import NamedTuple

from . import crypto
from .errors import NotMapped, RangeError
from .header import DeviceInstance, Volume, persist_position_maps
from .layout import BLOCK_SIZE, IV_LEN, SLICE_LOGICAL, UNMAPPED, slice_block_address

ZERO_BLOCK = bytes(BLOCK_SIZE)


class LogicalAddress(NamedTuple):
    volume: int
    block: int


def _locate(instance: DeviceInstance, volume: int, block: int) -> tuple[Volume, int, int]:
    vol = instance.volume(volume)
    if not 0 <= block < instance.geometry.volume_blocks:
        raise RangeError(f"block {block} outside volume of {instance.geometry.volume_blocks} blocks")
    return vol, block // SLICE_LOGICAL, block % SLICE_LOGICAL


def _discardable(vol: Volume, lsi: int, offset: int) -> bool:
    flags = vol.discard.get(lsi)
    return flags is not None and flags[offset] == 1


def sflc_read(instance: DeviceInstance, volume: int, block: int) -> bytes:
    vol, lsi, offset = _locate(instance, volume, block)
    psi = vol.pos_map[lsi]
    if psi == UNMAPPED or _discardable(vol, lsi, offset):
        return ZERO_BLOCK
    geo = instance.geometry
    iv = instance.iv_cache.load_iv(geo.slice_start(psi), offset)
    data = instance.image.read_block(slice_block_address(geo, psi, offset))
    return crypto.decrypt_block(vol.vek, iv, data)


def sflc_write(instance: DeviceInstance, volume: int, block: int, data: bytes) -> None:
    if len(data) != BLOCK_SIZE:
        raise ValueError(f"block must be {BLOCK_SIZE} bytes")
    vol, lsi, offset = _locate(instance, volume, block)
    psi = vol.pos_map[lsi]
    if psi == UNMAPPED:
        psi = new_slice(instance, volume, lsi)
    geo = instance.geometry
    iv = crypto.random_fill(IV_LEN, instance.rng)
    instance.iv_cache.store_iv(geo.slice_start(psi), offset, iv)
    instance.image.write_block(slice_block_address(geo, psi, offset), crypto.encrypt_block(vol.vek, iv, data))
    flags = vol.discard.get(lsi)
    if flags is not None:
        flags[offset] = 0
        if not any(flags):
            del vol.discard[lsi]


def new_slice(instance: DeviceInstance, volume: int, lsi: int) -> int:
    """Map logical slice ``lsi`` of ``volume`` to a uniformly random free physical slice."""
    vol = instance.volume(volume)
    if vol.pos_map[lsi] != UNMAPPED:
        raise RangeError(f"LSI {lsi} of volume {volume} is already mapped")
    psi = instance.allocator.allocate(volume)
    vol.pos_map[lsi] = psi
    vol.dirty = True
    vol.discard[lsi] = bytearray(b"\x01" * SLICE_LOGICAL)
    return psi


def reclaim_slice(instance: DeviceInstance, volume: int, lsi: int) -> None:
    """Unmap ``lsi`` and return its physical slice to the free pool."""
    vol = instance.volume(volume)
    psi = vol.pos_map[lsi]
    if psi == UNMAPPED:
        raise NotMapped(f"LSI {lsi} of volume {volume} is not mapped")
    instance.allocator.release(psi)
    vol.pos_map[lsi] = UNMAPPED
    vol.dirty = True
    vol.discard.pop(lsi, None)
    instance.iv_cache.discard(instance.geometry.slice_start(psi))


def trim(instance: DeviceInstance, volume: int, block: int) -> bool:
    """Mark a block as no longer holding data. Returns True if its slice was reclaimed."""
    vol, lsi, offset = _locate(instance, volume, block)
    if vol.pos_map[lsi] == UNMAPPED:
        return False
    flags = vol.discard.setdefault(lsi, bytearray(SLICE_LOGICAL))
    flags[offset] = 1
    if all(flags):
        reclaim_slice(instance, volume, lsi)
        return True
    return False


def flush(instance: DeviceInstance) -> None:
    """Write back dirty IV blocks and dirty position maps without closing."""
    instance.ensure_open()
    instance.iv_cache.flush()
    persist_position_maps(instance, only_dirty=True)


def occupied_count(instance: DeviceInstance) -> int:
    return instance.allocator.num_slices - instance.allocator.free_count


def mapped_slices(instance: DeviceInstance, volume: int) -> dict[int, int]:
    vol = instance.volume(volume)
    return {lsi: psi for lsi, psi in enumerate(vol.pos_map) if psi != UNMAPPED}
