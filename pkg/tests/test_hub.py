import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from conftest import MockHub, make_product, md5
from satseries.hub import (
    DownloadQueue,
    DownloadTask,
    Journal,
    SimulatedClock,
    TaskState,
    ThrottlePolicy,
    TransitionError,
    check_trace,
    download_product,
    poll_until_online,
    schedule_lta_requests,
)

POLICY = ThrottlePolicy()


def run_queue(hub, tmp_path, products, policy=POLICY, with_md5=True):
    q = DownloadQueue(hub.client, tmp_path / "dl", tmp_path / "journal.jsonl", policy, hub.clock)
    for p in products:
        q.add(p.id, p.md5 if with_md5 else None, len(p.payload))
    return q, q.run()


# scheduling


def test_three_offline_products_thirty_minutes_apart(mock_hub):
    hub = mock_hub([make_product(f"P{i}", online=False) for i in range(3)])
    tasks = [DownloadTask(f"P{i}") for i in range(3)]
    events = list(schedule_lta_requests(tasks, POLICY, hub.clock, hub.client.is_online))
    assert [(e.time, e.kind) for e in events] == [(0, "lta_request"), (1800, "lta_request"), (3600, "lta_request")]


def test_online_product_bypasses_throttle(mock_hub):
    hub = mock_hub([make_product("ON"), make_product("OFF", online=False)])
    events = list(schedule_lta_requests([DownloadTask("ON"), DownloadTask("OFF")], POLICY, hub.clock, hub.client.is_online))
    assert [(e.product_id, e.time, e.kind) for e in events] == [("ON", 0, "download"), ("OFF", 0, "lta_request")]


def test_no_tasks_no_events(mock_hub):
    hub = mock_hub([])
    assert list(schedule_lta_requests([], POLICY, hub.clock, hub.client.is_online)) == []


def test_backoff_sequence():
    assert [POLICY.backoff(i) for i in range(1, 9)] == [10, 20, 40, 80, 160, 320, 600, 600]


# polling


def test_online_observed_at_first_poll_after_two_hours(mock_hub):
    hub = mock_hub([make_product("P", online=False, online_after=7200)])
    assert hub.client.retrieve("P") is False
    task = DownloadTask("P", requested_at=hub.clock.now())
    state, _ = poll_until_online(hub.client, task, POLICY, hub.clock)
    assert state is TaskState.ONLINE and hub.clock.now() == 7200


def test_never_restored_fails_at_36_hours(mock_hub):
    hub = mock_hub([make_product("P", online=False, online_after=None)])
    hub.client.retrieve("P")
    state, reason = poll_until_online(hub.client, DownloadTask("P", requested_at=0.0), POLICY, hub.clock)
    assert state is TaskState.FAILED and reason == "lta timeout" and hub.clock.now() == 36 * 3600


def test_online_at_request_is_immediate(mock_hub):
    hub = mock_hub([make_product("P")])
    assert hub.client.retrieve("P") is True
    state, _ = poll_until_online(hub.client, DownloadTask("P", requested_at=0.0), POLICY, hub.clock)
    assert state is TaskState.ONLINE and hub.clock.now() == 0


def test_retrieve_is_idempotent(mock_hub):
    hub = mock_hub([make_product("P", online=False, online_after=100)])
    hub.client.retrieve("P")
    hub.clock.advance(60)
    hub.client.retrieve("P")
    hub.clock.advance(40)
    assert hub.client.is_online("P")


# transfer


def test_download_happy_path(mock_hub, tmp_path):
    p = make_product("P", size=1 << 20)
    hub = mock_hub([p])
    out = download_product(hub.client, DownloadTask("P", checksum_expected=p.md5), tmp_path, POLICY, hub.clock)
    assert out.ok and (tmp_path / "P.zip").read_bytes() == p.payload


def test_download_checksum_mismatch(mock_hub, tmp_path):
    p = make_product("P", size=4096)
    hub = mock_hub([p])
    hub.state.corrupt.add("P")
    out = download_product(hub.client, DownloadTask("P", checksum_expected=p.md5), tmp_path, POLICY, hub.clock)
    assert not out.ok and out.reason == "checksum"
    assert not (tmp_path / "P.zip.part").exists() and not (tmp_path / "P.zip").exists()


def test_download_resumes_after_cut(mock_hub, tmp_path):
    p = make_product("P", size=1 << 20)
    hub = mock_hub([p])
    hub.state.cut_downloads["P"] = [len(p.payload) // 2]
    out = download_product(hub.client, DownloadTask("P", checksum_expected=p.md5), tmp_path, POLICY, hub.clock)
    assert out.ok and out.range_requests == 1
    log = hub.state.downloads("P")
    assert [e.range for e in log] == [None, f"bytes={len(p.payload) // 2}-"]
    assert (tmp_path / "P.zip").read_bytes() == p.payload


def test_size_check_without_checksum(mock_hub, tmp_path):
    p = make_product("P", size=5000)
    hub = mock_hub([p])
    assert download_product(hub.client, DownloadTask("P", size_expected=5000), tmp_path, POLICY, hub.clock).ok
    (tmp_path / "P.zip").unlink()
    bad = download_product(hub.client, DownloadTask("P", size_expected=4000), tmp_path, POLICY, hub.clock)
    assert not bad.ok and bad.reason == "size"


def test_transport_errors_retry_then_fail(mock_hub, tmp_path):
    p = make_product("P", size=4096)
    hub = mock_hub([p])
    hub.state.fail_next["/download/P"] = 2
    out = download_product(hub.client, DownloadTask("P", checksum_expected=p.md5), tmp_path, POLICY, hub.clock)
    assert out.ok and hub.clock.now() == 10 + 20
    hub.state.fail_next["/download/P"] = 10
    (tmp_path / "P.zip").unlink()
    out = download_product(hub.client, DownloadTask("P", checksum_expected=p.md5), tmp_path, POLICY, hub.clock)
    assert not out.ok and out.reason.startswith("transport")


# queue


def test_queue_mixed_online_offline(mock_hub, tmp_path):
    prods = [make_product("A", seed=1), make_product("B", seed=2, online=False, online_after=5000)]
    hub = mock_hub(prods)
    _, report = run_queue(hub, tmp_path, prods)
    assert sorted(report.done) == ["A", "B"] and not report.failed
    for p in prods:
        assert (tmp_path / "dl" / f"{p.id}.zip").read_bytes() == p.payload
    entries = Journal(tmp_path / "journal.jsonl", hub.clock).entries()
    check_trace(entries)
    assert [e["to"] for e in entries if e["product_id"] == "A"] == ["Online", "Downloading", "Done"]
    b = [(e["to"], e["ts"]) for e in entries if e["product_id"] == "B"]
    assert b[0] == ("LtaRequested", 0) and b[1] == ("Online", 5400)  # first 10-min poll after 5000 s


def test_queue_reports_checksum_failure(mock_hub, tmp_path):
    prods = [make_product("A", seed=1), make_product("B", seed=2)]
    hub = mock_hub(prods)
    hub.state.corrupt.add("B")
    _, report = run_queue(hub, tmp_path, prods)
    assert report.done == ["A"] and report.failed == {"B": "checksum"}


def test_queue_lta_timeout(mock_hub, tmp_path):
    prods = [make_product("A", online=False, online_after=None)]
    hub = mock_hub(prods)
    _, report = run_queue(hub, tmp_path, prods)
    assert report.failed == {"A": "lta timeout"} and hub.clock.now() == 36 * 3600


def test_restart_skips_done_and_keeps_queued(mock_hub, tmp_path):
    prods = [make_product(x, seed=i, online=False, online_after=600) for i, x in enumerate("ABC")]
    hub = mock_hub(prods)
    journal = Journal(tmp_path / "journal.jsonl", hub.clock)
    # A finished, B was requested, C never touched when the previous run died
    journal.record("A", TaskState.QUEUED, TaskState.LTA_REQUESTED)
    journal.record("A", TaskState.LTA_REQUESTED, TaskState.ONLINE)
    journal.record("A", TaskState.ONLINE, TaskState.DOWNLOADING)
    (tmp_path / "dl").mkdir()
    (tmp_path / "dl" / "A.zip").write_bytes(prods[0].payload)
    journal.record("A", TaskState.DOWNLOADING, TaskState.DONE)
    hub.clock.advance(100)
    journal.record("B", TaskState.QUEUED, TaskState.LTA_REQUESTED)
    hub.client.retrieve("B")
    hub.state.log.clear()

    _, report = run_queue(hub, tmp_path, prods)
    assert sorted(report.done) == ["A", "B", "C"]
    assert hub.state.downloads("A") == []
    posts = [e for e in hub.state.log if e.method == "POST"]
    assert [e.path for e in posts] == ["/retrieve/C"]
    # C waits out the throttle interval that B's request started
    assert posts[0].t == 100 + POLICY.min_request_interval
    check_trace(Journal(tmp_path / "journal.jsonl", hub.clock).entries())


def test_throttle_counts_requests_answered_online(mock_hub, tmp_path):
    hub = mock_hub([make_product("A")])
    journal = Journal(tmp_path / "journal.jsonl", hub.clock)
    journal.record("A", TaskState.QUEUED, TaskState.ONLINE, "online at request")
    assert journal.last_lta_request() == 0.0


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(st.booleans(), st.sampled_from([None, 0.0, 600.0, 7200.0, 50000.0])), min_size=1, max_size=7))
def test_rate_limit_safety(tmp_path_factory, spec):
    prods = [make_product(f"P{i}", size=512, seed=i, online=on, online_after=after) for i, (on, after) in enumerate(spec)]
    hub = MockHub(prods)
    try:
        tmp = tmp_path_factory.mktemp("q")
        _, report = run_queue(hub, tmp, prods)
    finally:
        hub.close()
    posts = [e.t for e in hub.state.log if e.method == "POST"]
    assert oracles.sliding_window_max(posts, POLICY.min_request_interval) <= 1
    check_trace(Journal(tmp / "journal.jsonl", hub.clock).entries())
    assert len(report.done) + len(report.failed) == len(prods)
    for p, (on, after) in zip(prods, spec):
        assert (p.id in report.done) == (on or after is not None)


# journal


def test_journal_torn_tail_ignored(tmp_path):
    j = Journal(tmp_path / "j.jsonl", SimulatedClock())
    j.record("A", TaskState.QUEUED, TaskState.ONLINE)
    with open(tmp_path / "j.jsonl", "a") as fh:
        fh.write('{"ts": 1, "product_id": "A", "fro')
    assert j.replay()["A"].state is TaskState.ONLINE


def test_journal_rejects_illegal_transition(tmp_path):
    path = tmp_path / "j.jsonl"
    path.write_text(json.dumps({"ts": 0, "product_id": "A", "from": "Queued", "to": "Done", "detail": ""}) + "\n")
    with pytest.raises(TransitionError):
        Journal(path, SimulatedClock()).replay()
    with pytest.raises(TransitionError):
        check_trace(Journal(path, SimulatedClock()).entries())


def test_queue_refuses_illegal_move(mock_hub, tmp_path):
    hub = mock_hub([make_product("A")])
    q = DownloadQueue(hub.client, tmp_path, tmp_path / "j.jsonl", POLICY, hub.clock)
    t = q.add("A")
    with pytest.raises(TransitionError):
        q._move(t, TaskState.DONE)


def test_md5_helper_matches_mock():
    p = make_product("A", size=100)
    assert p.md5 == md5(p.payload)
