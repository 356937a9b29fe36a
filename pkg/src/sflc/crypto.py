"""Key derivation, AEAD key wrapping and per-block AES-256-CTR.

Keys are 32 bytes, IVs 16 bytes. The AES-GCM nonce of a wrapped key is the
first 12 bytes of its stored 16-byte IV field; the last 4 bytes are random
padding so every IV field in the format has the same width.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.argon2 import Argon2id

from .errors import AuthFailure, EmptyPassword, RngFailure
from .layout import BLOCK_SIZE, IV_LEN, KEY_LEN, SALT_LEN, TAG_LEN

GCM_NONCE_LEN = 12


@dataclass(frozen=True)
class KdfCost:
    memory: int       # KiB
    iterations: int
    parallelism: int


DEFAULT_COST = KdfCost(memory=65536, iterations=3, parallelism=1)
FAST_COST = KdfCost(memory=8, iterations=1, parallelism=1)


class SystemRng(random.SystemRandom):
    """CSPRNG with the ``random.Random`` interface; bytes come from os.urandom."""

    def randbytes(self, n: int) -> bytes:
        try:
            return os.urandom(n)
        except (OSError, NotImplementedError) as exc:
            raise RngFailure(str(exc)) from exc


system_rng = SystemRng()


def random_fill(length: int, rng: random.Random | None = None) -> bytes:
    if length < 0:
        raise ValueError("negative length")
    if length == 0:
        return b""
    return (rng or system_rng).randbytes(length)


def kdf_derive(password: bytes | str, salt: bytes, cost: KdfCost = DEFAULT_COST) -> bytes:
    if isinstance(password, str):
        password = password.encode("utf-8")
    if not password:
        raise EmptyPassword("password must not be empty")
    if len(salt) != SALT_LEN:
        raise ValueError(f"salt must be {SALT_LEN} bytes")
    kdf = Argon2id(
        salt=bytes(salt),
        length=KEY_LEN,
        iterations=cost.iterations,
        lanes=cost.parallelism,
        memory_cost=cost.memory,
    )
    return kdf.derive(password)


def wrap_key(kek: bytes, payload: bytes, rng: random.Random | None = None) -> tuple[bytes, bytes, bytes]:
    """AES-256-GCM encrypt a 32-byte key. Returns ``(iv, ciphertext, tag)``."""
    if len(payload) != KEY_LEN:
        raise ValueError(f"payload must be {KEY_LEN} bytes")
    iv = random_fill(IV_LEN, rng)
    sealed = AESGCM(bytes(kek)).encrypt(iv[:GCM_NONCE_LEN], bytes(payload), None)
    return iv, sealed[:KEY_LEN], sealed[KEY_LEN:]


def unwrap_key(kek: bytes, iv: bytes, ct: bytes, tag: bytes) -> bytes:
    if len(ct) != KEY_LEN or len(tag) != TAG_LEN:
        raise AuthFailure("malformed cell")
    try:
        return AESGCM(bytes(kek)).decrypt(bytes(iv[:GCM_NONCE_LEN]), bytes(ct) + bytes(tag), None)
    except InvalidTag:
        raise AuthFailure("cell does not open under this key") from None


def ctr_xcrypt(key: bytes, iv: bytes, data: bytes) -> bytes:
    """AES-256-CTR with ``iv`` as the initial 128-bit counter block."""
    if len(iv) != IV_LEN:
        raise ValueError(f"IV must be {IV_LEN} bytes")
    ctx = Cipher(algorithms.AES(bytes(key)), modes.CTR(bytes(iv))).encryptor()
    return ctx.update(data) + ctx.finalize()


def encrypt_block(key: bytes, iv: bytes, plaintext: bytes) -> bytes:
    if len(plaintext) != BLOCK_SIZE:
        raise ValueError(f"block must be {BLOCK_SIZE} bytes")
    return ctr_xcrypt(key, iv, plaintext)


def decrypt_block(key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) != BLOCK_SIZE:
        raise ValueError(f"block must be {BLOCK_SIZE} bytes")
    return ctr_xcrypt(key, iv, ciphertext)


def zeroize(buf: bytearray | None) -> None:
    """Overwrite a mutable key buffer in place (best effort)."""
    if buf is not None:
        buf[:] = bytes(len(buf))
