import os
import threading
import time

import pytest

from rankpipe.cube import StaleGeneration, VerificationFailed, sign
from rankpipe.models import ModelGeneration, ModelStore, write_synthetic_generation
from rankpipe.reload import DoubleBuffer, ModelWatcher, latest_generation, watch


class TestDoubleBuffer:
    def test_retire_waits_for_readers(self):
        retired = []
        buffer = DoubleBuffer("v1", on_retire=retired.append)

        lease = buffer.acquire()
        assert buffer.publish("v2") == "v1"
        assert buffer.current == "v2"
        assert lease.value == "v1"
        assert retired == []
        assert buffer.retiring == 1

        lease.release()
        lease.release()
        assert retired == ["v1"]
        assert buffer.wait_retired(timeout=0)

    def test_retire_immediately_without_readers(self):
        retired = []
        buffer = DoubleBuffer("v1", on_retire=retired.append)
        with buffer.lease() as value:
            assert value == "v1"
        buffer.publish("v2")
        assert retired == ["v1"]

    def test_concurrent_readers_never_see_retired_value(self):
        retired = set()
        buffer = DoubleBuffer(0, on_retire=retired.add)
        errors = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                with buffer.lease() as value:
                    if value in retired:
                        errors.append(value)

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for t in threads:
            t.start()
        for v in range(1, 200):
            buffer.publish(v)
        stop.set()
        for t in threads:
            t.join(timeout=5)

        assert buffer.wait_retired(timeout=5)
        assert errors == []
        assert retired == set(range(199))


def generation(root, n, **kwargs):
    directory = os.path.join(str(root), f"gen-{n}")
    write_synthetic_generation(directory, n, key_universe=200, **kwargs)
    return directory


class TestGenerations:
    def test_latest_ignores_incomplete(self, tmp_path):
        generation(tmp_path, 1)
        generation(tmp_path, 2)
        incomplete = os.path.join(str(tmp_path), "gen-3")
        generation(tmp_path, 3)
        os.unlink(os.path.join(incomplete, "DONE"))

        assert latest_generation(str(tmp_path)).endswith("gen-2")

    def test_watcher_triggers_highest_only(self, tmp_path):
        generation(tmp_path, 1)
        watcher = ModelWatcher(str(tmp_path), lambda d: None, lambda: 1, poll_interval=0.01)
        assert watcher.poll() is None

        generation(tmp_path, 2)
        generation(tmp_path, 3)
        assert watcher.poll().endswith("gen-3")

    def test_watch_iterator(self, tmp_path):
        generation(tmp_path, 1)
        stop = threading.Event()
        found = watch(str(tmp_path), poll_interval=0.01, stop=stop)
        assert next(found).endswith("gen-1")
        stop.set()
        assert list(found) == []


class TestModelStore:
    def test_open_and_reload(self, tmp_path):
        generation(tmp_path, 1)
        store = ModelStore.open(str(tmp_path))
        published = []
        store.on_publish(lambda g: published.append(g.generation))
        try:
            assert store.generation == 1
            assert set(store.current.models) == {"dnn_ctr", "dnn_fr", "dnn_cmt"}

            lease = store.acquire()
            store.reload(generation(tmp_path, 2))
            assert store.generation == 2
            assert published == [2]
            # the leased generation still answers lookups
            assert lease.value.snapshot.lookup([sign("k1")])[0] is not None
            lease.release()
            assert store.wait_retired(timeout=1)
            assert store.reloads == 1
        finally:
            store.close()

    def test_stale_and_corrupt_generations_refused(self, tmp_path):
        generation(tmp_path, 2)
        store = ModelStore.open(str(tmp_path))
        try:
            with pytest.raises(StaleGeneration):
                store.reload(generation(tmp_path, 1))

            broken = generation(tmp_path, 3)
            with open(os.path.join(broken, "block_0.bin"), "r+b") as fd:
                fd.write(b"\x00\x01\x02\x03")
            with pytest.raises(VerificationFailed):
                store.reload(broken)
            assert store.generation == 2
        finally:
            store.close()

    def test_model_generation_must_match_cube(self, tmp_path):
        directory = generation(tmp_path, 1)
        other = generation(tmp_path, 2)
        os.replace(
            os.path.join(other, "dense_dnn_ctr.bin"), os.path.join(directory, "dense_dnn_ctr.bin")
        )
        with pytest.raises(VerificationFailed):
            ModelGeneration.load(directory)

    def test_open_without_generation(self, tmp_path):
        with pytest.raises(VerificationFailed):
            ModelStore.open(str(tmp_path))

    def test_watch_reloads(self, tmp_path):
        generation(tmp_path, 1)
        store = ModelStore.open(str(tmp_path))
        try:
            store.watch(str(tmp_path), poll_interval=0.02)
            generation(tmp_path, 2)
            deadline = time.time() + 5
            while store.generation != 2 and time.time() < deadline:
                time.sleep(0.02)
            assert store.generation == 2
        finally:
            store.close()
