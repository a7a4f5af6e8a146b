from rankpipe.events import Event, JoinBuffer, StageTiming, merge_payloads


def fragments(event, total):
    return [event.fork(i, total) for i in range(total)]


class TestEvent:
    def test_fork_pushes_fragment_frame(self):
        event = Event("r1", {"a": 1}, ticket=7)
        part = event.fork(1, 3)
        assert part.fragments == ((1, 3),)
        assert part.fragment_index == 1
        assert part.fragment_total == 3
        assert part.join_key == (7, ())

        part.payload["b"] = 2
        assert "b" not in event.payload

    def test_stage_timing(self):
        timing = StageTiming("user", enqueued=1.0, started=1.5, finished=2.25)
        assert timing.queue_wait == 0.5
        assert timing.service_time == 0.75
        assert timing.latency == 1.25


class TestMergePayloads:
    def test_nested_dicts_merged_and_lowest_index_wins(self):
        a, b = fragments(Event("r1", {}), 2)
        a.payload = {"user": {"p": 1}, "x": "from-a"}
        b.payload = {"user": {"q": 2}, "x": "from-b", "items": [1]}

        merged = merge_payloads([b, a])
        assert merged == {"user": {"p": 1, "q": 2}, "x": "from-a", "items": [1]}


class TestJoinBuffer:
    def test_join_fires_on_last_fragment_in_any_order(self):
        buffer = JoinBuffer(timeout=1.0)
        parts = fragments(Event("r1", {}, ticket=1), 3)
        for i, part in enumerate(parts):
            part.payload = {f"k{i}": i}

        assert buffer.offer(parts[2], now=0.0) is None
        assert buffer.offer(parts[0], now=0.1) is None
        assert len(buffer) == 1

        joined = buffer.offer(parts[1], now=0.2)
        assert joined.payload == {"k0": 0, "k1": 1, "k2": 2}
        assert joined.fragments == ()
        assert len(buffer) == 0

    def test_unfragmented_event_passes_through(self):
        event = Event("r1", {"a": 1})
        assert JoinBuffer(1.0).offer(event, now=0.0) is event

    def test_expire_drops_stale_partials(self):
        buffer = JoinBuffer(timeout=1.0)
        parts = fragments(Event("r1", {}, ticket=1), 2)
        buffer.offer(parts[0], now=0.0)

        assert buffer.expire(now=0.5) == []
        expired = buffer.expire(now=1.0)
        assert [e.request_id for e in expired] == ["r1"]
        assert len(buffer) == 0

        # a late fragment starts a new partial, it never completes the expired one
        assert buffer.offer(parts[1], now=1.1) is None

    def test_discard_by_ticket(self):
        buffer = JoinBuffer(timeout=1.0)
        buffer.offer(fragments(Event("r1", {}, ticket=1), 2)[0], now=0.0)
        buffer.offer(fragments(Event("r2", {}, ticket=2), 2)[0], now=0.0)

        buffer.discard(1)
        assert len(buffer) == 1

    def test_join_takes_earliest_deadline_and_tenant(self):
        buffer = JoinBuffer(timeout=1.0)
        a, b = fragments(Event("r1", {}, ticket=1), 2)
        a.deadline = 5.0
        b.deadline = 3.0
        b.tenant = "t1"

        buffer.offer(a, now=0.0)
        joined = buffer.offer(b, now=0.0)
        assert joined.deadline == 3.0
        assert joined.tenant == "t1"
