"""On-disk format v1: fixed parameters and geometry derived from the device size.

Image layout, in blocks of 4096 bytes::

    [DMB][volume header 0] ... [volume header 14][slice 0] ... [slice n-1][tail]

A volume header is one VMB block, then ``pm_iv_blocks`` blocks of packed IVs,
then ``pm_payload_blocks`` blocks of encrypted position map. A physical slice
is one IV block followed by 256 data blocks. Slice indices (LSI/PSI) are
0-based everywhere. Tail blocks are random fill and never touched after init.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DeviceTooSmall, RangeError

FORMAT_VERSION = 1

BLOCK_SIZE = 4096
SLICE_LOGICAL = 256          # S_L, data blocks per slice
SLICE_IV_BLOCKS = 1          # Delta_S
SLICE_PHYSICAL = SLICE_LOGICAL + SLICE_IV_BLOCKS  # S_P
MAX_VOLUMES = 15
IV_LEN = 16
KEY_LEN = 32
TAG_LEN = 16
SALT_LEN = 32
PSI_ENTRY_LEN = 4

UNMAPPED = 0xFFFFFFFF        # position-map sentinel for "no slice"

# DMB byte layout
DMB_VERSION_OFFSET = 0
DMB_SALT_OFFSET = 1
DMB_CELLS_OFFSET = DMB_SALT_OFFSET + SALT_LEN
DMB_CELL_LEN = IV_LEN + KEY_LEN + TAG_LEN
DMB_PADDING_OFFSET = DMB_CELLS_OFFSET + MAX_VOLUMES * DMB_CELL_LEN

# VMB byte layout: IV || CTR ciphertext of (VEK || prev VMK || num_slices u64le || padding)
VMB_PAYLOAD_LEN = BLOCK_SIZE - IV_LEN
VMB_NUM_SLICES_OFFSET = 2 * KEY_LEN
VMB_PADDING_OFFSET = VMB_NUM_SLICES_OFFSET + 8

assert SLICE_IV_BLOCKS * BLOCK_SIZE >= SLICE_LOGICAL * IV_LEN
assert DMB_PADDING_OFFSET <= BLOCK_SIZE


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class Geometry:
    total_blocks: int
    max_slices_bound: int
    pm_payload_blocks: int
    pm_iv_blocks: int
    volume_header_blocks: int
    header_blocks: int
    num_slices: int

    @property
    def data_start_block(self) -> int:
        return self.header_blocks

    @property
    def data_end_block(self) -> int:
        """First block past the last physical slice (start of the tail)."""
        return self.header_blocks + self.num_slices * SLICE_PHYSICAL

    @property
    def volume_blocks(self) -> int:
        """Maximal (overcommitted) logical size of any volume, in blocks."""
        return self.num_slices * SLICE_LOGICAL

    @property
    def header_bytes(self) -> int:
        return self.header_blocks * BLOCK_SIZE

    @property
    def usable_bytes(self) -> int:
        return self.num_slices * SLICE_LOGICAL * BLOCK_SIZE

    def volume_header_start(self, index: int) -> int:
        if not 0 <= index < MAX_VOLUMES:
            raise RangeError(f"volume index {index} out of range")
        return 1 + index * self.volume_header_blocks

    def vmb_block(self, index: int) -> int:
        return self.volume_header_start(index)

    def pm_iv_start(self, index: int) -> int:
        return self.volume_header_start(index) + 1

    def pm_payload_start(self, index: int) -> int:
        return self.volume_header_start(index) + 1 + self.pm_iv_blocks

    def slice_start(self, psi: int) -> int:
        """Block index of the IV block of physical slice ``psi``."""
        if not 0 <= psi < self.num_slices:
            raise RangeError(f"PSI {psi} out of range [0, {self.num_slices})")
        return self.header_blocks + psi * SLICE_PHYSICAL

    def regions(self) -> list[tuple[str, int, int]]:
        """Half-open block ranges ``(name, start, end)`` tiling the whole image."""
        out = [("dmb", 0, 1)]
        for i in range(MAX_VOLUMES):
            start = self.volume_header_start(i)
            out.append((f"header{i}", start, start + self.volume_header_blocks))
        out.append(("slices", self.header_blocks, self.data_end_block))
        out.append(("tail", self.data_end_block, self.total_blocks))
        return out


def compute_geometry(total_blocks: int) -> Geometry:
    """Derive every layout constant from the device size in blocks."""
    if total_blocks < 0:
        raise DeviceTooSmall(f"negative device size {total_blocks}")
    max_slices_bound = total_blocks // SLICE_PHYSICAL
    if max_slices_bound >= UNMAPPED:
        raise RangeError("device too large for 32-bit PSIs")
    pm_payload = _ceil_div(max_slices_bound * PSI_ENTRY_LEN, BLOCK_SIZE)
    pm_iv = _ceil_div(pm_payload * IV_LEN, BLOCK_SIZE)
    per_volume = 1 + pm_iv + pm_payload
    header_blocks = 1 + MAX_VOLUMES * per_volume
    num_slices = max(total_blocks - header_blocks, 0) // SLICE_PHYSICAL
    if num_slices < 1:
        raise DeviceTooSmall(
            f"{total_blocks} blocks leave no room for a slice after a "
            f"{header_blocks}-block header"
        )
    return Geometry(
        total_blocks=total_blocks,
        max_slices_bound=max_slices_bound,
        pm_payload_blocks=pm_payload,
        pm_iv_blocks=pm_iv,
        volume_header_blocks=per_volume,
        header_blocks=header_blocks,
        num_slices=num_slices,
    )


def slice_block_address(geometry: Geometry, psi: int, offset_in_slice: int) -> int:
    """Absolute block index of data block ``offset_in_slice`` of slice ``psi``."""
    if not 0 <= offset_in_slice < SLICE_LOGICAL:
        raise RangeError(f"offset {offset_in_slice} out of range [0, {SLICE_LOGICAL})")
    return geometry.slice_start(psi) + SLICE_IV_BLOCKS + offset_in_slice


def dmb_cell_offset(index: int) -> int:
    """Byte offset of DMB cell ``index`` inside block 0."""
    if not 0 <= index < MAX_VOLUMES:
        raise RangeError(f"cell index {index} out of range")
    return DMB_CELLS_OFFSET + index * DMB_CELL_LEN
