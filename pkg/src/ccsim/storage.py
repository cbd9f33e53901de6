"""Read-only verity images and encrypted, per-sector authenticated scratch devices.

Verity tree layout
------------------
Data is split into 4096-byte blocks (the last one zero-padded).  Every block
gets a 32-byte SHA-256 digest ``H(salt || block)``; that list is level 0.
Digests of a level are packed 128 per 4096-byte hash block (zero-padded), and
level k+1 holds ``H(salt || hash_block)`` for every hash block of level k.
Levels are added until one fits in a single hash block; the root hash is
``H(salt || top_hash_block)``.

Each level is stored as its raw hash blocks, so every stored tree byte
(padding included) feeds into the root.

Sidecar (``.vrt``) layout, all integers little-endian::

    magic        8   b"CCVRT\\x00\\x01\\x00"
    block_size   u32
    block_count  u64
    salt         32
    level_count  u32
    hash_blocks  u32 * level_count   (hash blocks per level, leaf level first)
    root_hash    32
    tree         4096 * sum(hash_blocks)
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

BLOCK_SIZE = 4096
DIGEST_SIZE = 32
FANOUT = BLOCK_SIZE // DIGEST_SIZE  # 128
SALT_SIZE = 32
TAG_SIZE = 16
VRT_MAGIC = b"CCVRT\x00\x01\x00"


class IntegrityError(Exception):
    """Stored data does not authenticate."""


class StorageFormatError(ValueError):
    pass


def _h(salt: bytes, data) -> bytes:
    h = hashlib.sha256(salt)
    h.update(data)
    return h.digest()


def _pack(digests: list[bytes]) -> bytes:
    """Pack digests into zero-padded hash blocks."""
    raw = b"".join(digests)
    pad = -len(raw) % BLOCK_SIZE
    return raw + b"\x00" * pad


@dataclass
class VerityImage:
    data: bytes
    salt: bytes
    tree: list[bytes]  # per level, raw hash blocks, leaf level first
    root_hash: bytes
    block_size: int = BLOCK_SIZE

    @property
    def block_count(self) -> int:
        return len(self.data) // self.block_size

    def level_digests(self, level: int, count: int | None = None) -> list[bytes]:
        raw = self.tree[level]
        n = len(raw) // DIGEST_SIZE if count is None else count
        return [bytes(raw[i * DIGEST_SIZE:(i + 1) * DIGEST_SIZE]) for i in range(n)]

    def block(self, index: int) -> bytes:
        return bytes(self.data[index * BLOCK_SIZE:(index + 1) * BLOCK_SIZE])


def build_tree(data: bytes, salt: bytes = bytes(SALT_SIZE)) -> VerityImage:
    if not data:
        raise StorageFormatError("image data must not be empty")
    if len(salt) != SALT_SIZE:
        raise StorageFormatError(f"salt must be {SALT_SIZE} bytes")
    data = bytes(data) + b"\x00" * (-len(data) % BLOCK_SIZE)
    digests = [_h(salt, data[i:i + BLOCK_SIZE]) for i in range(0, len(data), BLOCK_SIZE)]
    tree = []
    while True:
        packed = _pack(digests)
        tree.append(packed)
        if len(packed) == BLOCK_SIZE:
            break
        digests = [_h(salt, packed[i:i + BLOCK_SIZE]) for i in range(0, len(packed), BLOCK_SIZE)]
    return VerityImage(data=data, salt=bytes(salt), tree=tree, root_hash=_h(salt, tree[-1]))


def verified_read(image: VerityImage, block_index: int, trusted_root: bytes) -> bytes:
    """Return data block ``block_index`` if its path to ``trusted_root`` checks out."""
    if not 0 <= block_index < image.block_count:
        raise IndexError(f"block {block_index} out of range (0..{image.block_count - 1})")
    if len(image.tree) == 0:
        raise IntegrityError("empty hash tree")
    block = image.block(block_index)
    computed = _h(image.salt, block)
    idx = block_index
    for level, raw in enumerate(image.tree):
        off = idx * DIGEST_SIZE
        if bytes(raw[off:off + DIGEST_SIZE]) != computed:
            raise IntegrityError(f"digest mismatch at level {level}, entry {idx}")
        hb = idx // FANOUT
        computed = _h(image.salt, raw[hb * BLOCK_SIZE:(hb + 1) * BLOCK_SIZE])
        idx = hb
    if idx != 0 or len(image.tree[-1]) != BLOCK_SIZE:
        raise IntegrityError("malformed top level")
    if computed != trusted_root:
        raise IntegrityError("root hash mismatch")
    return block


def verify_tree_root(image: VerityImage, trusted_root: bytes) -> None:
    """Cheap activation check: the top hash block hashes to the trusted root."""
    if not image.tree or len(image.tree[-1]) != BLOCK_SIZE:
        raise IntegrityError("malformed top level")
    if _h(image.salt, image.tree[-1]) != trusted_root:
        raise IntegrityError("root hash mismatch")


# -- sidecar files ------------------------------------------------------------


def encode_sidecar(image: VerityImage) -> bytes:
    head = VRT_MAGIC + struct.pack("<IQ", image.block_size, image.block_count) + image.salt
    head += struct.pack("<I", len(image.tree))
    head += b"".join(struct.pack("<I", len(level) // BLOCK_SIZE) for level in image.tree)
    return head + image.root_hash + b"".join(bytes(level) for level in image.tree)


def decode_sidecar(raw: bytes, data: bytes) -> VerityImage:
    """Rebuild a VerityImage from a sidecar and its (padded) data file contents."""
    try:
        if raw[:8] != VRT_MAGIC:
            raise StorageFormatError("bad sidecar magic")
        block_size, block_count = struct.unpack_from("<IQ", raw, 8)
        if block_size != BLOCK_SIZE:
            raise StorageFormatError(f"unsupported block size {block_size}")
        off = 20
        salt = raw[off:off + SALT_SIZE]
        off += SALT_SIZE
        (levels,) = struct.unpack_from("<I", raw, off)
        off += 4
        counts = struct.unpack_from(f"<{levels}I", raw, off)
        off += 4 * levels
        root = raw[off:off + DIGEST_SIZE]
        off += DIGEST_SIZE
        tree = []
        for n in counts:
            tree.append(raw[off:off + n * BLOCK_SIZE])
            off += n * BLOCK_SIZE
    except struct.error as exc:
        raise StorageFormatError(f"truncated sidecar: {exc}") from None
    if off != len(raw) or any(len(t) != n * BLOCK_SIZE for t, n in zip(tree, counts)):
        raise StorageFormatError("sidecar length does not match its header")
    data = bytes(data) + b"\x00" * (-len(data) % BLOCK_SIZE)
    if len(data) // BLOCK_SIZE != block_count:
        raise StorageFormatError("data length does not match sidecar block count")
    return VerityImage(data=data, salt=salt, tree=tree, root_hash=root)


def write_sidecar(image: VerityImage, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_sidecar(image))


# -- scratch --------------------------------------------------------------------


def _nonce(index: int) -> bytes:
    return struct.pack("<Q", index) + b"\x00" * 4


class ScratchDevice:
    """Sector store holding only ciphertext; the key lives in the guest's memory."""

    def __init__(self, key: bytes, sector_count: int):
        if sector_count <= 0:
            raise StorageFormatError("sector_count must be positive")
        if len(key) != 32:
            raise StorageFormatError("scratch key must be 32 bytes")
        self._aead = AESGCM(key)
        self.sector_count = sector_count
        self.sectors: dict[int, bytes] = {}

    def _check(self, index: int) -> None:
        if not 0 <= index < self.sector_count:
            raise IndexError(f"sector {index} out of range")

    def write(self, index: int, plaintext: bytes) -> None:
        self._check(index)
        if len(plaintext) != BLOCK_SIZE:
            raise ValueError(f"sector payload must be {BLOCK_SIZE} bytes")
        aad = struct.pack("<Q", index)
        self.sectors[index] = self._aead.encrypt(_nonce(index), bytes(plaintext), aad)

    def read(self, index: int) -> bytes:
        self._check(index)
        try:
            return self._aead.decrypt(_nonce(index), self.sectors[index], struct.pack("<Q", index))
        except (InvalidTag, KeyError):
            raise IntegrityError(f"sector {index} failed authentication") from None


def scratch_format(sector_count: int, key: bytes | None = None) -> tuple[ScratchDevice, bytes]:
    """Create a scratch device of zero sectors under a fresh ephemeral key."""
    if sector_count <= 0:
        raise StorageFormatError("sector_count must be positive")
    key = os.urandom(32) if key is None else key
    dev = ScratchDevice(key, sector_count)
    zero = bytes(BLOCK_SIZE)
    for i in range(sector_count):
        dev.write(i, zero)
    return dev, key


def scratch_write(dev: ScratchDevice, index: int, plaintext: bytes) -> None:
    dev.write(index, plaintext)


def scratch_read(dev: ScratchDevice, index: int) -> bytes:
    return dev.read(index)
