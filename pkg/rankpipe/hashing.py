from typing import Union

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: Union[bytes, str]) -> int:
    """
    64-bit FNV-1a digest of the given bytes (strings are UTF-8 encoded).
    """
    if isinstance(data, str):
        data = data.encode("utf-8")

    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def mix64(h: int) -> int:
    # murmur3 finalizer, spreads low-entropy FNV digests over all 64 bits
    h ^= h >> 33
    h = (h * 0xFF51AFD7ED558CCD) & MASK64
    h ^= h >> 33
    h = (h * 0xC4CEB9FE1A85EC53) & MASK64
    h ^= h >> 33
    return h


def stable_hash(value: Union[bytes, str]) -> int:
    return mix64(fnv1a_64(value))


def unit_interval(value: Union[bytes, str]) -> float:
    """
    Maps a value deterministically into [0, 1) using the top 53 bits of its stable hash.
    """
    return (stable_hash(value) >> 11) / float(1 << 53)
