"""
The sparse parameter cube: a read-only key-value store mapping 64-bit feature signatures
to embeddings plus feedback statistics.

On-disk layout of a cube directory (little-endian)::

    manifest.json           generation, embedding_dim, shard_count, blocks, indexes
    shard_<k>/index.bin     repeated [signature: u64][block_id: u32][offset: u64], sorted
    block_<id>.bin          concatenated values [embedding_dim x f32][show: f32][click: f32]
    DONE                    empty sentinel, written last

Signatures are assigned to shard ``signature % shard_count``. All keys are held in memory;
values live in blocks placed either in memory or on disk.
"""
import json
import logging
import os
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, NewType, Optional, Tuple, Union

import numpy as np

from . import config
from .errors import RankpipeError
from .hashing import fnv1a_64

LOG = logging.getLogger(__name__)

FeatureSignature = NewType("FeatureSignature", int)

MANIFEST_FILE = "manifest.json"
INDEX_FILE = "index.bin"
DONE_FILE = "DONE"

MEMORY = "memory"
DISK = "disk"

INDEX_DTYPE = np.dtype([("signature", "<u8"), ("block", "<u4"), ("offset", "<u8")])


class DimensionMismatch(RankpipeError):
    def __init__(self, expected: int, actual: int) -> None:
        self.expected = expected
        self.actual = actual
        super().__init__(f"expected dimension {expected}, got {actual}")


class EmptyInput(RankpipeError):
    def __init__(self) -> None:
        super().__init__("cannot build a cube without key-value pairs")


class CorruptBlock(RankpipeError):
    def __init__(self, block_id: int, reason: str) -> None:
        self.block_id = block_id
        super().__init__(f"block {block_id} is corrupt: {reason}")


class StaleGeneration(RankpipeError):
    def __init__(self, current: int, offered: int) -> None:
        self.current = current
        self.offered = offered
        super().__init__(f"refusing generation {offered}, already serving {current}")


class VerificationFailed(RankpipeError):
    def __init__(self, directory: str, reason: str) -> None:
        self.directory = directory
        super().__init__(f"cube at {directory} failed verification: {reason}")


def sign(raw_feature: Union[bytes, str]) -> FeatureSignature:
    """
    Computes the feature signature of a raw feature: the 64-bit FNV-1a digest of its bytes.
    """
    return FeatureSignature(fnv1a_64(raw_feature))


@dataclass
class SparseParameter:
    embedding: np.ndarray
    show: float = 0.0
    click: float = 0.0

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype="<f4")
        if self.embedding.ndim != 1:
            raise ValueError("embedding must be a vector")
        if self.show < 0 or self.click < 0:
            raise ValueError("feedback statistics must be nonnegative")

    @property
    def dim(self) -> int:
        return int(self.embedding.shape[0])

    def to_bytes(self) -> bytes:
        return self.embedding.tobytes() + np.array([self.show, self.click], dtype="<f4").tobytes()

    @classmethod
    def from_array(cls, values: np.ndarray) -> "SparseParameter":
        return cls(values[:-2].copy(), float(values[-2]), float(values[-1]))

    @classmethod
    def from_bytes(cls, data: bytes, embedding_dim: int) -> "SparseParameter":
        if len(data) != value_size(embedding_dim):
            raise ValueError(f"expected {value_size(embedding_dim)} bytes, got {len(data)}")
        return cls.from_array(np.frombuffer(data, dtype="<f4"))

    def __eq__(self, other):
        if not isinstance(other, SparseParameter):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def value_size(embedding_dim: int) -> int:
    return (embedding_dim + 2) * 4


@dataclass(frozen=True)
class BlockInfo:
    block_id: int
    shard: int
    placement: str
    byte_length: int
    checksum: int

    @property
    def filename(self) -> str:
        return f"block_{self.block_id}.bin"


@dataclass(frozen=True)
class IndexInfo:
    shard: int
    byte_length: int
    checksum: int


@dataclass
class CubeManifest:
    generation: int
    embedding_dim: int
    shard_count: int
    blocks: List[BlockInfo] = field(default_factory=list)
    indexes: List[IndexInfo] = field(default_factory=list)

    def index_info(self, shard: int) -> Optional[IndexInfo]:
        return next((i for i in self.indexes if i.shard == shard), None)

    def to_dict(self) -> Dict:
        return {
            "generation": self.generation,
            "embedding_dim": self.embedding_dim,
            "shard_count": self.shard_count,
            "blocks": [
                {
                    "block_id": b.block_id,
                    "shard": b.shard,
                    "placement": b.placement,
                    "byte_length": b.byte_length,
                    "checksum": b.checksum,
                }
                for b in self.blocks
            ],
            "indexes": [
                {"shard": i.shard, "byte_length": i.byte_length, "checksum": i.checksum}
                for i in self.indexes
            ],
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> "CubeManifest":
        return cls(
            generation=int(doc["generation"]),
            embedding_dim=int(doc["embedding_dim"]),
            shard_count=int(doc["shard_count"]),
            blocks=[BlockInfo(**b) for b in doc.get("blocks", [])],
            indexes=[IndexInfo(**i) for i in doc.get("indexes", [])],
        )

    @classmethod
    def read(cls, directory: str) -> "CubeManifest":
        with open(os.path.join(directory, MANIFEST_FILE), "r", encoding="utf-8") as fd:
            return cls.from_dict(json.load(fd))

    def write(self, directory: str) -> None:
        with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8") as fd:
            json.dump(self.to_dict(), fd, indent=2)


PlacementPolicy = Callable[[int, int], str]


def all_memory(shard: int, block_number: int) -> str:
    return MEMORY


def all_disk(shard: int, block_number: int) -> str:
    return DISK


def memory_first(n: int) -> PlacementPolicy:
    """
    Places the first n blocks of every shard in memory and the rest on disk.
    """

    def _policy(shard: int, block_number: int) -> str:
        return MEMORY if block_number < n else DISK

    return _policy


def _checksum_file(path: str) -> int:
    checksum = 0
    with open(path, "rb") as fd:
        while True:
            chunk = fd.read(1 << 20)
            if not chunk:
                break
            checksum = zlib.crc32(chunk, checksum)
    return checksum


def mark_done(directory: str) -> None:
    with open(os.path.join(directory, DONE_FILE), "wb"):
        pass


def is_done(directory: str) -> bool:
    return os.path.isfile(os.path.join(directory, DONE_FILE))


def build(
    key_value_pairs: Iterable[Tuple[Union[bytes, str], SparseParameter]],
    directory: str,
    placement_policy: PlacementPolicy = all_memory,
    block_size_bytes: int = config.BLOCK_SIZE_BYTES,
    shard_count: int = 1,
    generation: Optional[int] = None,
    write_done: bool = True,
) -> CubeManifest:
    """
    Writes a cube directory from a stream of (raw feature, value) pairs. Duplicate raw
    features keep their last value.

    :param key_value_pairs: raw features with their sparse parameters
    :param directory: target directory, created if missing
    :param placement_policy: decides memory/disk placement per (shard, block number)
    :param block_size_bytes: maximum byte length of one block file
    :param shard_count: number of shards
    :param generation: generation timestamp (defaults to the current unix time)
    :param write_done: write the DONE sentinel (disable when more files are added later)
    :raises DimensionMismatch: if embeddings differ in length
    :raises EmptyInput: if the stream is empty
    """
    values: Dict[int, SparseParameter] = {}
    dim = None
    for raw, param in key_value_pairs:
        if dim is None:
            dim = param.dim
        elif param.dim != dim:
            raise DimensionMismatch(dim, param.dim)
        values[sign(raw)] = param

    if not values:
        raise EmptyInput()
    if shard_count < 1:
        raise ValueError("shard_count must be positive")

    size = value_size(dim)
    if block_size_bytes <= size:
        raise ValueError(f"block size {block_size_bytes} must exceed value size {size}")
    per_block = block_size_bytes // size

    os.makedirs(directory, exist_ok=True)
    manifest = CubeManifest(
        generation=int(time.time()) if generation is None else int(generation),
        embedding_dim=dim,
        shard_count=shard_count,
    )

    signatures = np.fromiter(values.keys(), dtype="<u8", count=len(values))
    signatures.sort()
    shards = signatures % np.uint64(shard_count)

    block_id = 0
    for shard in range(shard_count):
        keys = signatures[shards == np.uint64(shard)]
        index = np.zeros(len(keys), dtype=INDEX_DTYPE)
        index["signature"] = keys

        for number, start in enumerate(range(0, len(keys), per_block)):
            chunk = keys[start : start + per_block]
            data = np.empty((len(chunk), dim + 2), dtype="<f4")
            for row, sig in enumerate(chunk):
                param = values[int(sig)]
                data[row, :dim] = param.embedding
                data[row, dim] = param.show
                data[row, dim + 1] = param.click

            path = os.path.join(directory, f"block_{block_id}.bin")
            payload = data.tobytes()
            with open(path, "wb") as fd:
                fd.write(payload)

            index["block"][start : start + len(chunk)] = block_id
            index["offset"][start : start + len(chunk)] = np.arange(len(chunk), dtype="<u8") * size
            manifest.blocks.append(
                BlockInfo(
                    block_id=block_id,
                    shard=shard,
                    placement=placement_policy(shard, number),
                    byte_length=len(payload),
                    checksum=zlib.crc32(payload),
                )
            )
            block_id += 1

        shard_dir = os.path.join(directory, f"shard_{shard}")
        os.makedirs(shard_dir, exist_ok=True)
        encoded = index.tobytes()
        with open(os.path.join(shard_dir, INDEX_FILE), "wb") as fd:
            fd.write(encoded)
        manifest.indexes.append(IndexInfo(shard, len(encoded), zlib.crc32(encoded)))

    manifest.write(directory)
    if write_done:
        mark_done(directory)

    LOG.info(
        "built cube generation %d at %s: %d keys, %d shards, %d blocks",
        manifest.generation,
        directory,
        len(values),
        shard_count,
        len(manifest.blocks),
    )
    return manifest


class _Block:
    def __init__(self, info: BlockInfo, directory: str, embedding_dim: int) -> None:
        self.info = info
        self.path = os.path.join(directory, info.filename)
        self.value_size = value_size(embedding_dim)
        self.data: Optional[np.ndarray] = None
        self.fd: Optional[int] = None

        if info.placement == MEMORY:
            with open(self.path, "rb") as fd:
                raw = fd.read()
            self.data = np.frombuffer(raw, dtype="<f4").reshape(-1, embedding_dim + 2)
        else:
            self.fd = os.open(self.path, os.O_RDONLY)

    def read(self, offset: int) -> np.ndarray:
        if self.data is not None:
            row, rem = divmod(offset, self.value_size)
            if rem or row >= len(self.data):
                raise CorruptBlock(self.info.block_id, f"offset {offset} out of range")
            return self.data[row]

        raw = os.pread(self.fd, self.value_size, offset)
        if len(raw) != self.value_size:
            raise CorruptBlock(self.info.block_id, f"short read at offset {offset}")
        return np.frombuffer(raw, dtype="<f4")

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
        self.data = None


class CubeSnapshot:
    """
    One loaded, immutable cube generation. Lookups are safe from any number of threads.
    """

    def __init__(self, directory: str, manifest: CubeManifest, verify: bool = True) -> None:
        self.directory = directory
        self.manifest = manifest
        self._blocks: Dict[int, _Block] = {}
        self._signatures: List[np.ndarray] = []
        self._block_ids: List[np.ndarray] = []
        self._offsets: List[np.ndarray] = []

        try:
            for info in manifest.blocks:
                path = os.path.join(directory, info.filename)
                if os.path.getsize(path) != info.byte_length:
                    raise CorruptBlock(info.block_id, "byte length does not match manifest")
                if verify and _checksum_file(path) != info.checksum:
                    raise CorruptBlock(info.block_id, "checksum mismatch")
                self._blocks[info.block_id] = _Block(info, directory, manifest.embedding_dim)

            for shard in range(manifest.shard_count):
                index = self._load_index(shard, verify)
                self._signatures.append(np.ascontiguousarray(index["signature"]))
                self._block_ids.append(np.ascontiguousarray(index["block"]))
                self._offsets.append(np.ascontiguousarray(index["offset"]))
        except Exception:
            self.close()
            raise

    def _load_index(self, shard: int, verify: bool) -> np.ndarray:
        """
        Reads the index of a shard and checks it against the manifest: its length and CRC32
        (when verifying), sort order, and that every entry points inside a block of the
        same shard.
        """
        directory, manifest = self.directory, self.manifest
        path = os.path.join(directory, f"shard_{shard}", INDEX_FILE)
        with open(path, "rb") as fd:
            raw = fd.read()

        info = manifest.index_info(shard)
        if verify:
            if info is None:
                raise VerificationFailed(directory, f"manifest lists no index for shard {shard}")
            if len(raw) != info.byte_length or zlib.crc32(raw) != info.checksum:
                raise VerificationFailed(directory, f"index of shard {shard} fails its checksum")
        if len(raw) % INDEX_DTYPE.itemsize:
            raise VerificationFailed(directory, f"index of shard {shard} is truncated")

        index = np.frombuffer(raw, dtype=INDEX_DTYPE)
        if len(index) > 1 and np.any(index["signature"][1:] <= index["signature"][:-1]):
            raise VerificationFailed(directory, f"index of shard {shard} is not sorted")

        blocks = {b.block_id: b for b in manifest.blocks if b.shard == shard}
        ids = np.unique(index["block"])
        unknown = [int(b) for b in ids if int(b) not in blocks]
        if unknown:
            raise VerificationFailed(
                directory, f"index of shard {shard} references unknown blocks {unknown[:5]}"
            )
        if len(index):
            size = np.uint64(value_size(manifest.embedding_dim))
            lengths = np.array([blocks[int(b)].byte_length for b in ids], dtype="<u8")
            limit = lengths[np.searchsorted(ids, index["block"])]
            offsets = index["offset"]
            if np.any(offsets % size != 0) or np.any(offsets + size > limit):
                raise VerificationFailed(
                    directory, f"index of shard {shard} points outside its blocks"
                )
        return index

    @classmethod
    def load(cls, directory: str, verify: bool = True) -> "CubeSnapshot":
        try:
            manifest = CubeManifest.read(directory)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise VerificationFailed(directory, f"unreadable manifest: {e}")
        snapshot = cls(directory, manifest, verify=verify)
        LOG.info("loaded cube generation %d from %s", snapshot.generation, directory)
        return snapshot

    @property
    def generation(self) -> int:
        return self.manifest.generation

    @property
    def embedding_dim(self) -> int:
        return self.manifest.embedding_dim

    @property
    def key_count(self) -> int:
        return int(sum(len(s) for s in self._signatures))

    def keys(self) -> Iterator[FeatureSignature]:
        for signatures in self._signatures:
            for sig in signatures:
                yield FeatureSignature(int(sig))

    def lookup(self, keys: List[int]) -> List[Optional[SparseParameter]]:
        """
        Looks up a batch of signatures. The result preserves input order; absent keys yield
        None.

        :raises CorruptBlock: if a value cannot be read or decoded
        """
        results: List[Optional[SparseParameter]] = [None] * len(keys)
        if not keys:
            return results

        shard_count = self.manifest.shard_count
        query = np.fromiter((int(k) for k in keys), dtype="<u8", count=len(keys))
        shards = query % np.uint64(shard_count) if shard_count > 1 else np.zeros(len(keys), int)

        for shard in range(shard_count):
            positions = np.nonzero(shards == shard)[0]
            if not len(positions):
                continue
            signatures = self._signatures[shard]
            if not len(signatures):
                continue
            wanted = query[positions]
            slots = np.searchsorted(signatures, wanted)
            slots[slots >= len(signatures)] = len(signatures) - 1
            found = signatures[slots] == wanted
            for position, slot in zip(positions[found], slots[found]):
                results[position] = self._read(shard, int(slot))

        return results

    def _read(self, shard: int, slot: int) -> SparseParameter:
        block_id = int(self._block_ids[shard][slot])
        block = self._blocks.get(block_id)
        if block is None:
            raise CorruptBlock(block_id, "block missing from manifest")
        values = block.read(int(self._offsets[shard][slot]))
        if not np.all(np.isfinite(values)) or values[-2] < 0 or values[-1] < 0:
            raise CorruptBlock(block_id, "value does not decode to a valid parameter")
        return SparseParameter.from_array(values)

    def close(self) -> None:
        for block in self._blocks.values():
            block.close()
        self._blocks = {}

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def __str__(self):
        return f"CubeSnapshot(generation={self.generation}, keys={self.key_count})"

    def __repr__(self):
        return self.__str__()


def hot_reload(current: Optional[CubeSnapshot], new_directory: str) -> CubeSnapshot:
    """
    Loads and fully verifies the cube in ``new_directory`` as the successor of ``current``.
    The current snapshot is left untouched; swapping and retiring it is up to the caller
    (see ``rankpipe.reload.DoubleBuffer``).

    :raises StaleGeneration: if the new generation does not exceed the current one
    :raises VerificationFailed: if the new cube cannot be loaded or verified
    """
    try:
        manifest = CubeManifest.read(new_directory)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise VerificationFailed(new_directory, f"unreadable manifest: {e}")

    if current is not None and manifest.generation <= current.generation:
        raise StaleGeneration(current.generation, manifest.generation)

    try:
        return CubeSnapshot(new_directory, manifest, verify=True)
    except VerificationFailed:
        raise
    except (CorruptBlock, OSError, ValueError) as e:
        raise VerificationFailed(new_directory, str(e))
