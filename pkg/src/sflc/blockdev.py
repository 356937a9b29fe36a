"""File-backed block device and the advisory image lock."""

from __future__ import annotations

import fcntl
import os
from pathlib import Path

from .errors import LockHeld, RangeError, SizeMismatch
from .layout import BLOCK_SIZE


class BlockImage:
    """Fixed-size image file addressed in 4096-byte blocks."""

    def __init__(self, path: str | os.PathLike, writable: bool = True):
        self.path = Path(path)
        self.writable = writable
        self._fd = os.open(self.path, os.O_RDWR if writable else os.O_RDONLY)
        size = os.fstat(self._fd).st_size
        if size % BLOCK_SIZE:
            os.close(self._fd)
            raise SizeMismatch(f"{self.path}: size {size} is not a multiple of {BLOCK_SIZE}")
        self.num_blocks = size // BLOCK_SIZE

    @classmethod
    def create(cls, path: str | os.PathLike, num_blocks: int) -> "BlockImage":
        with open(path, "wb") as f:
            f.truncate(num_blocks * BLOCK_SIZE)
        return cls(path)

    def _check(self, index: int, count: int = 1) -> None:
        if index < 0 or count < 0 or index + count > self.num_blocks:
            raise RangeError(f"blocks [{index}, {index + count}) outside image of {self.num_blocks}")

    def read_block(self, index: int) -> bytes:
        return self.read_blocks(index, 1)

    def read_blocks(self, index: int, count: int) -> bytes:
        self._check(index, count)
        data = os.pread(self._fd, count * BLOCK_SIZE, index * BLOCK_SIZE)
        if len(data) != count * BLOCK_SIZE:
            raise OSError(f"short read at block {index}")
        return data

    def write_block(self, index: int, data: bytes) -> None:
        if len(data) != BLOCK_SIZE:
            raise ValueError(f"block must be {BLOCK_SIZE} bytes")
        self.write_blocks(index, data)

    def write_blocks(self, index: int, data: bytes) -> None:
        if len(data) % BLOCK_SIZE:
            raise ValueError("data is not a whole number of blocks")
        self._check(index, len(data) // BLOCK_SIZE)
        if os.pwrite(self._fd, data, index * BLOCK_SIZE) != len(data):
            raise OSError(f"short write at block {index}")

    def read_bytes(self, offset: int, length: int) -> bytes:
        return os.pread(self._fd, length, offset)

    def write_bytes(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.num_blocks * BLOCK_SIZE:
            raise RangeError("byte range outside image")
        os.pwrite(self._fd, data, offset)

    def sync(self) -> None:
        os.fsync(self._fd)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    @property
    def closed(self) -> bool:
        return self._fd < 0

    def __enter__(self) -> "BlockImage":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def lock_path(image_path: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(image_path)}.lock")


class ImageLock:
    """Exclusive ``flock`` on ``<image>.lock``; one open instance per image."""

    def __init__(self, image_path: str | os.PathLike):
        self.path = lock_path(image_path)
        self._fd = -1

    def acquire(self) -> "ImageLock":
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise LockHeld(f"{self.path} is held by another instance") from None
        self._fd = fd
        return self

    def release(self, remove: bool = True) -> None:
        if self._fd < 0:
            return
        if remove:
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass
        fcntl.flock(self._fd, fcntl.LOCK_UN)
        os.close(self._fd)
        self._fd = -1

    @property
    def held(self) -> bool:
        return self._fd >= 0
