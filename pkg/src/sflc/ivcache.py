"""Write-back LRU cache of slice IV blocks."""

from __future__ import annotations

from collections import OrderedDict

from .blockdev import BlockImage
from .layout import IV_LEN

DEFAULT_CAPACITY = 1024


class IvCache:
    """Caches whole IV blocks keyed by their physical block index.

    Not write-through: updated IV blocks reach the image only on eviction
    or :meth:`flush`.
    """

    def __init__(self, image: BlockImage, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.image = image
        self.capacity = capacity
        self._blocks: OrderedDict[int, bytearray] = OrderedDict()
        self._dirty: set[int] = set()
        self.hits = 0
        self.misses = 0
        self.writebacks = 0

    def __len__(self) -> int:
        return len(self._blocks)

    def __contains__(self, block: int) -> bool:
        return block in self._blocks

    def is_dirty(self, block: int) -> bool:
        return block in self._dirty

    def _entry(self, block: int) -> bytearray:
        buf = self._blocks.get(block)
        if buf is not None:
            self.hits += 1
            self._blocks.move_to_end(block)
            return buf
        self.misses += 1
        buf = bytearray(self.image.read_block(block))
        self._blocks[block] = buf
        while len(self._blocks) > self.capacity:
            self._evict()
        return buf

    def _evict(self) -> None:
        block, buf = next(iter(self._blocks.items()))
        if block in self._dirty:
            self.image.write_block(block, bytes(buf))
            self._dirty.discard(block)
            self.writebacks += 1
        del self._blocks[block]

    def load_iv(self, block: int, slot: int) -> bytes:
        buf = self._entry(block)
        return bytes(buf[slot * IV_LEN:(slot + 1) * IV_LEN])

    def store_iv(self, block: int, slot: int, iv: bytes) -> None:
        if len(iv) != IV_LEN:
            raise ValueError("bad IV length")
        buf = self._entry(block)
        buf[slot * IV_LEN:(slot + 1) * IV_LEN] = iv
        self._dirty.add(block)

    def flush(self) -> int:
        """Write back every dirty block; returns how many were written."""
        written = 0
        for block in sorted(self._dirty):
            self.image.write_block(block, bytes(self._blocks[block]))
            written += 1
        self.writebacks += written
        self._dirty.clear()
        return written

    def discard(self, block: int) -> None:
        """Drop a block without writing it back (its slice was released)."""
        self._blocks.pop(block, None)
        self._dirty.discard(block)

    def clear(self) -> None:
        for buf in self._blocks.values():
            buf[:] = bytes(len(buf))
        self._blocks.clear()
        self._dirty.clear()
