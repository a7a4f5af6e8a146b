from rankpipe.hashing import fnv1a_64, stable_hash, unit_interval


class TestFnv1a:
    def test_reference_vectors(self):
        assert fnv1a_64(b"") == 0xCBF29CE484222325
        assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a_64(b"foobar") == 0x85944171F73967E8

    def test_strings_are_utf8_encoded(self):
        assert fnv1a_64("foobar") == fnv1a_64(b"foobar")
        assert fnv1a_64("ü") == fnv1a_64("ü".encode("utf-8"))


class TestStableHash:
    def test_deterministic(self):
        assert stable_hash("k42") == stable_hash("k42")
        assert stable_hash("k42") != stable_hash("k43")

    def test_unit_interval_range_and_spread(self):
        values = [unit_interval(f"u{i}") for i in range(2000)]
        assert all(0.0 <= v < 1.0 for v in values)
        # roughly uniform: every decile is populated
        deciles = {int(v * 10) for v in values}
        assert deciles == set(range(10))
