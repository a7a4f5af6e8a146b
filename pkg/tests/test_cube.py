import json
import os

import numpy as np
import pytest

from rankpipe.cube import (
    DISK,
    INDEX_DTYPE,
    MEMORY,
    CorruptBlock,
    CubeManifest,
    CubeSnapshot,
    DimensionMismatch,
    EmptyInput,
    StaleGeneration,
    VerificationFailed,
    all_disk,
    build,
    hot_reload,
    is_done,
    memory_first,
    sign,
)
from rankpipe.cube import SparseParameter as P
from rankpipe.hashing import fnv1a_64


def params(n, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return {f"k{i}": P(rng.normal(size=dim), show=float(i), click=float(i % 3)) for i in range(n)}


class TestSparseParameter:
    def test_rejects_negative_statistics(self):
        with pytest.raises(ValueError):
            P(np.zeros(2), show=-1.0)

    def test_bytes(self):
        p = P([1.0, 2.0], show=3.0, click=1.0)
        assert len(p.to_bytes()) == 16
        assert P.from_bytes(p.to_bytes(), 2) == p


class TestBuild:
    def test_sign_is_fnv1a(self):
        assert sign("k1") == fnv1a_64(b"k1")

    def test_lookup_returns_every_value(self, tmp_path):
        values = params(500)
        manifest = build(
            values.items(),
            str(tmp_path),
            placement_policy=memory_first(1),
            block_size_bytes=512,
            shard_count=3,
            generation=7,
        )
        assert manifest.generation == 7
        assert manifest.shard_count == 3
        placements = {b.placement for b in manifest.blocks}
        assert placements == {MEMORY, DISK}
        assert is_done(str(tmp_path))

        with CubeSnapshot.load(str(tmp_path)) as snapshot:
            assert snapshot.key_count == 500
            assert snapshot.generation == 7
            keys = [sign(k) for k in values]
            assert snapshot.lookup(keys) == list(values.values())

    def test_lookup_preserves_order_and_reports_absent(self, tmp_path):
        values = params(20)
        build(values.items(), str(tmp_path), placement_policy=all_disk, block_size_bytes=128)

        with CubeSnapshot.load(str(tmp_path)) as snapshot:
            result = snapshot.lookup([sign("k3"), sign("missing"), sign("k1"), sign("k3")])
            assert result == [values["k3"], None, values["k1"], values["k3"]]
            assert snapshot.lookup([]) == []

    def test_duplicates_keep_last(self, tmp_path):
        build([("a", P([1.0])), ("a", P([2.0]))], str(tmp_path))
        with CubeSnapshot.load(str(tmp_path)) as snapshot:
            assert snapshot.key_count == 1
            assert snapshot.lookup([sign("a")])[0] == P([2.0])

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(DimensionMismatch) as e:
            build([("a", P([1.0])), ("b", P([1.0, 2.0]))], str(tmp_path))
        assert (e.value.expected, e.value.actual) == (1, 2)

    def test_empty_input(self, tmp_path):
        with pytest.raises(EmptyInput):
            build([], str(tmp_path))

    def test_done_can_be_deferred(self, tmp_path):
        build(params(3).items(), str(tmp_path), write_done=False)
        assert not is_done(str(tmp_path))

    def test_manifest_is_json(self, tmp_path):
        build(params(3).items(), str(tmp_path), generation=3)
        with open(os.path.join(str(tmp_path), "manifest.json")) as fd:
            doc = json.load(fd)
        assert doc["generation"] == 3
        assert CubeManifest.read(str(tmp_path)).embedding_dim == 4


class TestVerification:
    def test_corrupt_block_detected(self, tmp_path):
        manifest = build(params(50).items(), str(tmp_path), block_size_bytes=256)
        path = os.path.join(str(tmp_path), manifest.blocks[0].filename)
        with open(path, "r+b") as fd:
            first = fd.read(1)
            fd.seek(0)
            fd.write(bytes([first[0] ^ 0xFF]))

        with pytest.raises(CorruptBlock) as e:
            CubeSnapshot.load(str(tmp_path))
        assert e.value.block_id == manifest.blocks[0].block_id

    def test_truncated_block_detected(self, tmp_path):
        manifest = build(params(50).items(), str(tmp_path), block_size_bytes=256)
        path = os.path.join(str(tmp_path), manifest.blocks[-1].filename)
        with open(path, "r+b") as fd:
            fd.truncate(4)

        with pytest.raises(CorruptBlock):
            CubeSnapshot.load(str(tmp_path), verify=False)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(VerificationFailed):
            CubeSnapshot.load(str(tmp_path))

    def test_corrupt_index_detected(self, tmp_path):
        build(params(50).items(), str(tmp_path), block_size_bytes=256)
        path = os.path.join(str(tmp_path), "shard_0", "index.bin")
        with open(path, "r+b") as fd:
            fd.seek(3)
            byte = fd.read(1)
            fd.seek(3)
            fd.write(bytes([byte[0] ^ 0x01]))

        with pytest.raises(VerificationFailed) as e:
            CubeSnapshot.load(str(tmp_path))
        assert "checksum" in str(e.value)

    def test_index_must_point_into_manifest_blocks(self, tmp_path):
        build(params(50).items(), str(tmp_path), block_size_bytes=256)
        path = os.path.join(str(tmp_path), "shard_0", "index.bin")
        index = np.fromfile(path, dtype=INDEX_DTYPE)
        index["block"][-1] = 999
        index.tofile(path)

        # the block references are checked even without checksum verification
        with pytest.raises(VerificationFailed) as e:
            CubeSnapshot.load(str(tmp_path), verify=False)
        assert "999" in str(e.value)

    def test_index_offsets_stay_inside_blocks(self, tmp_path):
        manifest = build(params(50).items(), str(tmp_path), block_size_bytes=256)
        path = os.path.join(str(tmp_path), "shard_0", "index.bin")
        index = np.fromfile(path, dtype=INDEX_DTYPE)
        index["offset"][0] = manifest.blocks[0].byte_length
        index.tofile(path)

        with pytest.raises(VerificationFailed):
            CubeSnapshot.load(str(tmp_path), verify=False)

    def test_manifest_lists_index_checksums(self, tmp_path):
        manifest = build(params(50).items(), str(tmp_path), shard_count=3)
        assert [i.shard for i in manifest.indexes] == [0, 1, 2]
        assert CubeManifest.read(str(tmp_path)).indexes == manifest.indexes
        assert sum(i.byte_length for i in manifest.indexes) == 50 * INDEX_DTYPE.itemsize


class TestHotReload:
    def test_newer_generation_loads(self, tmp_path):
        old_dir, new_dir = str(tmp_path / "gen-1"), str(tmp_path / "gen-2")
        build(params(10).items(), old_dir, generation=1)
        build(params(10, seed=1).items(), new_dir, generation=2)

        with CubeSnapshot.load(old_dir) as current:
            with hot_reload(current, new_dir) as successor:
                assert successor.generation == 2
                # the current snapshot keeps serving its own values
                assert current.lookup([sign("k0")])[0] == params(10)["k0"]
                assert successor.lookup([sign("k0")])[0] == params(10, seed=1)["k0"]

    def test_stale_generation_refused(self, tmp_path):
        old_dir, new_dir = str(tmp_path / "gen-2"), str(tmp_path / "gen-1")
        build(params(10).items(), old_dir, generation=2)
        build(params(10).items(), new_dir, generation=2)

        with CubeSnapshot.load(old_dir) as current:
            with pytest.raises(StaleGeneration):
                hot_reload(current, new_dir)

    def test_corrupt_successor_fails_verification(self, tmp_path):
        new_dir = str(tmp_path / "gen-2")
        manifest = build(params(10).items(), new_dir, generation=2)
        with open(os.path.join(new_dir, manifest.blocks[0].filename), "r+b") as fd:
            fd.write(b"\xff\xff\xff\xff")

        with pytest.raises(VerificationFailed):
            hot_reload(None, new_dir)
