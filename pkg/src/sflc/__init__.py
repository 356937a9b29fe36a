"""File-backed plausibly deniable multi-volume storage."""

from .crypto import DEFAULT_COST, FAST_COST, KdfCost
from .engine import flush, sflc_read, sflc_write, trim
from .errors import SflcError
from .header import (
    DeviceInstance,
    changepwd,
    close_device,
    init_device,
    instantiate,
    testpwd,
    wipe_header,
)
from .layout import BLOCK_SIZE, Geometry, compute_geometry, slice_block_address

__all__ = [
    "BLOCK_SIZE",
    "DEFAULT_COST",
    "FAST_COST",
    "DeviceInstance",
    "Geometry",
    "KdfCost",
    "SflcError",
    "changepwd",
    "close_device",
    "compute_geometry",
    "flush",
    "init_device",
    "instantiate",
    "sflc_read",
    "sflc_write",
    "slice_block_address",
    "testpwd",
    "trim",
    "wipe_header",
]
