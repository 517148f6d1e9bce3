"""Throttled, resumable product retrieval.

Archived products must be requested before they can be downloaded, at no
more than one request per ``min_request_interval``, and typically come
online within ``lta_availability_window``. Every task state change is
appended to a JSON-lines journal so an interrupted run can be resumed
without repeating finished work.
"""
from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol, Sequence

import httpx

from .catalog import ProductMeta, QuerySpec
from .geo import GeoPolygon
from .timefmt import format_utc

log = logging.getLogger(__name__)

CHUNK = 64 * 1024


# ---------------------------------------------------------------------------
# clocks


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...

    def wait(self, futures: Iterable[cf.Future], deadline: float | None) -> set[cf.Future]: ...


class SystemClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def wait(self, futures, deadline):
        timeout = None if deadline is None else max(0.0, deadline - self.now())
        done, _ = cf.wait(list(futures), timeout=timeout, return_when=cf.FIRST_COMPLETED)
        return done


class SimulatedClock:
    """Manually advanced clock; ``sleep`` jumps forward instantly."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._t += seconds

    def advance_to(self, t: float) -> None:
        with self._lock:
            self._t = max(self._t, t)

    def wait(self, futures, deadline):
        futures = list(futures)
        if futures:
            # transfers take no simulated time; let one finish before time moves on
            done, _ = cf.wait(futures, return_when=cf.FIRST_COMPLETED)
            return done
        if deadline is not None:
            self.advance_to(deadline)
        return set()


# ---------------------------------------------------------------------------
# tasks and journal


class TaskState(str, Enum):
    QUEUED = "Queued"
    LTA_REQUESTED = "LtaRequested"
    ONLINE = "Online"
    DOWNLOADING = "Downloading"
    DONE = "Done"
    FAILED = "Failed"


TRANSITIONS = {
    TaskState.QUEUED: {TaskState.LTA_REQUESTED, TaskState.ONLINE, TaskState.FAILED},
    TaskState.LTA_REQUESTED: {TaskState.ONLINE, TaskState.FAILED},
    TaskState.ONLINE: {TaskState.DOWNLOADING, TaskState.FAILED},
    TaskState.DOWNLOADING: {TaskState.DONE, TaskState.FAILED},
    TaskState.DONE: set(),
    TaskState.FAILED: set(),
}
TERMINAL = {TaskState.DONE, TaskState.FAILED}


class TransitionError(RuntimeError):
    pass


@dataclass
class DownloadTask:
    product_id: str
    state: TaskState = TaskState.QUEUED
    attempts: int = 0
    checksum_expected: str | None = None
    size_expected: int | None = None
    requested_at: float | None = None
    reason: str | None = None


@dataclass(frozen=True)
class ThrottlePolicy:
    min_request_interval: float = 30 * 60.0
    lta_availability_window: float = 24 * 3600.0
    poll_interval: float = 10 * 60.0
    max_concurrent_downloads: int = 2
    max_attempts: int = 5
    backoff_base: float = 10.0
    backoff_factor: float = 2.0
    backoff_cap: float = 600.0

    def __post_init__(self):
        for name in ("min_request_interval", "lta_availability_window", "poll_interval", "backoff_base"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_concurrent_downloads < 1 or self.max_attempts < 1:
            raise ValueError("max_concurrent_downloads and max_attempts must be >= 1")

    @property
    def lta_timeout(self) -> float:
        return 1.5 * self.lta_availability_window

    def backoff(self, failures: int) -> float:
        """Delay before retry number ``failures`` (1-based)."""
        return min(self.backoff_base * self.backoff_factor ** (failures - 1), self.backoff_cap)


class Journal:
    """Append-only JSON-lines record of task transitions."""

    def __init__(self, path: str | os.PathLike, clock: Clock):
        self.path = Path(path)
        self.clock = clock
        self._lock = threading.Lock()

    def record(self, product_id: str, src: TaskState, dst: TaskState, detail: str = "") -> dict:
        entry = {"ts": self.clock.now(), "product_id": product_id, "from": src.value, "to": dst.value, "detail": detail}
        line = json.dumps(entry) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        return entry

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        lines = self.path.read_text().split("\n")
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                if i >= len(lines) - 2:
                    log.warning("ignoring torn journal tail in %s", self.path)
                    break
                raise
        return out

    def replay(self) -> dict[str, DownloadTask]:
        tasks: dict[str, DownloadTask] = {}
        for e in self.entries():
            t = tasks.setdefault(e["product_id"], DownloadTask(e["product_id"]))
            dst = TaskState(e["to"])
            if TaskState(e["from"]) != t.state or dst not in TRANSITIONS[t.state]:
                raise TransitionError(f"journal has invalid transition {e['from']}->{e['to']} for {t.product_id}")
            t.state = dst
            if dst is TaskState.LTA_REQUESTED:
                t.requested_at = e["ts"]
            if dst is TaskState.DOWNLOADING:
                t.attempts += 1
            if dst is TaskState.FAILED:
                t.reason = e.get("detail")
        return tasks

    def last_lta_request(self) -> float | None:
        """Time of the most recent retrieve call, whatever the hub answered."""
        times = [e["ts"] for e in self.entries() if _is_lta_request(e)]
        return max(times) if times else None


def _is_lta_request(e: dict) -> bool:
    if e["to"] == TaskState.LTA_REQUESTED.value:
        return True
    detail = e.get("detail") or ""
    return detail == "online at request" or detail.startswith("lta request:")


def check_trace(entries: Sequence[dict]) -> None:
    """Raise if any product's journal entries leave the transition graph."""
    state: dict[str, TaskState] = {}
    for e in entries:
        cur = state.get(e["product_id"], TaskState.QUEUED)
        src, dst = TaskState(e["from"]), TaskState(e["to"])
        if src != cur or dst not in TRANSITIONS[cur]:
            raise TransitionError(f"{e['product_id']}: {src.value}->{dst.value} after {cur.value}")
        state[e["product_id"]] = dst


# ---------------------------------------------------------------------------
# hub access


class HubError(RuntimeError):
    pass


class HubUnavailable(HubError):
    """Transport failure or server-side error; worth retrying."""


class IncompleteTransfer(HubUnavailable):
    pass


class HubClient:
    """Client for the hub wire protocol (search / retrieve / status / download)."""

    def __init__(self, http: httpx.Client):
        self.http = http

    @classmethod
    def connect(cls, base_url: str, *, auth: tuple[str, str] | None = None, timeout: float = 60.0) -> "HubClient":
        return cls(httpx.Client(base_url=base_url, auth=auth, timeout=timeout))

    def _request(self, method: str, url: str, **kw) -> httpx.Response:
        try:
            resp = self.http.request(method, url, **kw)
        except httpx.TransportError as exc:
            raise HubUnavailable(f"{method} {url}: {exc}") from exc
        if resp.status_code >= 500:
            raise HubUnavailable(f"{method} {url}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise HubError(f"{method} {url}: HTTP {resp.status_code} {resp.text[:200]}")
        return resp

    def search(self, query: QuerySpec) -> list[ProductMeta]:
        resp = self._request("GET", "/search", params=query.params())
        try:
            items = resp.json()["products"]
            return [product_from_wire(p) for p in items]
        except (ValueError, KeyError, TypeError) as exc:
            raise HubError(f"malformed search response: {exc}") from None

    def retrieve(self, product_id: str) -> bool:
        """Ask for a product; True when it is already online (200), False when queued (202)."""
        resp = self._request("POST", f"/retrieve/{product_id}")
        if resp.status_code not in (200, 202):
            raise HubError(f"retrieve {product_id}: unexpected HTTP {resp.status_code}")
        return resp.status_code == 200

    def is_online(self, product_id: str) -> bool:
        return bool(self._request("GET", f"/status/{product_id}").json()["online"])

    def stream(self, product_id: str, offset: int = 0):
        headers = {"Range": f"bytes={offset}-"} if offset else {}
        return self.http.stream("GET", f"/download/{product_id}", headers=headers)


def product_from_wire(p: dict) -> ProductMeta:
    return ProductMeta(
        product_id=str(p["id"]),
        tile_id=str(p["tile"]),
        sensing_time=p["sensing_time"],
        cloud_cover_pct=float(p["cloud_pct"]),
        footprint=GeoPolygon.from_wkt(p["footprint_wkt"]),
        data_coverage_pct=p.get("data_coverage_pct"),
        online=bool(p.get("online", False)),
        size_bytes=int(p.get("size", 0)),
        md5=p.get("md5"),
    )


def product_to_wire(m: ProductMeta) -> dict:
    d = {
        "id": m.product_id,
        "tile": m.tile_id,
        "sensing_time": format_utc(m.sensing_time),
        "cloud_pct": m.cloud_cover_pct,
        "footprint_wkt": m.footprint.to_wkt(),
        "online": m.online,
        "size": m.size_bytes,
        "md5": m.md5,
    }
    if m.data_coverage_pct is not None:
        d["data_coverage_pct"] = m.data_coverage_pct
    return d


# ---------------------------------------------------------------------------
# scheduling


@dataclass(frozen=True)
class DispatchEvent:
    time: float
    product_id: str
    kind: str  # "download" (already online) or "lta_request"


class LtaThrottle:
    def __init__(self, interval: float, last_request: float | None = None):
        self.interval = interval
        self.last = last_request

    def next_slot(self, now: float) -> float:
        return now if self.last is None else max(now, self.last + self.interval)

    def mark(self, t: float):
        self.last = t


def schedule_lta_requests(
    tasks: Sequence[DownloadTask],
    policy: ThrottlePolicy,
    clock: Clock,
    is_online: Callable[[str], bool],
    last_request: float | None = None,
) -> Iterator[DispatchEvent]:
    """Yield dispatch events, sleeping on ``clock`` between LTA requests.

    Online products are released at once; the i-th offline product is
    requested no earlier than ``start + i * min_request_interval``.
    """
    start = clock.now()
    throttle = LtaThrottle(policy.min_request_interval, last_request)
    offline = []
    for t in tasks:
        if is_online(t.product_id):
            yield DispatchEvent(start, t.product_id, "download")
        else:
            offline.append(t)
    for t in offline:
        slot = throttle.next_slot(clock.now())
        clock.sleep(slot - clock.now())
        now = clock.now()
        throttle.mark(now)
        yield DispatchEvent(now, t.product_id, "lta_request")


def poll_until_online(
    hub: HubClient, task: DownloadTask, policy: ThrottlePolicy, clock: Clock
) -> tuple[TaskState, str]:
    """Poll a requested product until it is online or the LTA timeout expires.

    Returns ``(ONLINE, "")`` or ``(FAILED, reason)``.
    """
    requested = task.requested_at if task.requested_at is not None else clock.now()
    failures = 0
    while True:
        try:
            if hub.is_online(task.product_id):
                return TaskState.ONLINE, ""
            failures = 0
            delay = policy.poll_interval
        except HubUnavailable as exc:
            failures += 1
            task.attempts += 1
            if failures >= policy.max_attempts:
                return TaskState.FAILED, f"hub unreachable: {exc}"
            delay = policy.backoff(failures)
        if clock.now() - requested >= policy.lta_timeout:
            return TaskState.FAILED, "lta timeout"
        clock.sleep(min(delay, requested + policy.lta_timeout - clock.now()))


@dataclass
class DownloadOutcome:
    ok: bool
    reason: str = ""
    path: Path | None = None
    range_requests: int = 0


def _file_md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _verify(path: Path, task: DownloadTask) -> str:
    """Empty string when ``path`` passes the integrity check, else the failure reason."""
    if task.checksum_expected:
        return "" if _file_md5(path) == task.checksum_expected.lower() else "checksum"
    if task.size_expected is not None:
        return "" if path.stat().st_size == task.size_expected else "size"
    return ""


def download_product(
    hub: HubClient,
    task: DownloadTask,
    dest: str | os.PathLike,
    policy: ThrottlePolicy = ThrottlePolicy(),
    clock: Clock | None = None,
    progress: Callable[[int], None] | None = None,
) -> DownloadOutcome:
    """Fetch ``task``'s product into ``dest/<id>.zip`` via a ``.zip.part`` file.

    Transport failures resume from the partial file's length with a byte
    range request. The part file is renamed only after the checksum (or,
    without one, the size) matches; on mismatch it is deleted.
    """
    clock = clock or SystemClock()
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    final = dest / f"{task.product_id}.zip"
    part = dest / f"{task.product_id}.zip.part"
    if final.exists() and not _verify(final, task):
        return DownloadOutcome(True, "already present", final)

    failures = ranges = 0
    while True:
        offset = part.stat().st_size if part.exists() else 0
        if task.size_expected is not None and offset > task.size_expected:
            part.unlink()
            offset = 0
        try:
            if task.size_expected is None or offset < task.size_expected:
                ranges += offset > 0
                _fetch(hub, task, part, offset, progress)
            break
        except HubUnavailable as exc:
            failures += 1
            task.attempts += 1
            if failures >= policy.max_attempts:
                return DownloadOutcome(False, f"transport: {exc}", range_requests=ranges)
            log.info("transfer of %s interrupted (%s); resuming", task.product_id, exc)
            clock.sleep(policy.backoff(failures))
        except HubError as exc:
            return DownloadOutcome(False, str(exc), range_requests=ranges)

    bad = _verify(part, task)
    if bad:
        part.unlink(missing_ok=True)
        return DownloadOutcome(False, bad, range_requests=ranges)
    os.replace(part, final)
    return DownloadOutcome(True, "", final, ranges)


def _fetch(hub: HubClient, task: DownloadTask, part: Path, offset: int, progress):
    try:
        with hub.stream(task.product_id, offset) as resp:
            if resp.status_code >= 500:
                raise HubUnavailable(f"download {task.product_id}: HTTP {resp.status_code}")
            if resp.status_code not in (200, 206):
                resp.read()
                raise HubError(f"download {task.product_id}: HTTP {resp.status_code}")
            if resp.status_code == 200 and offset:
                # server ignored the range; start over
                offset = 0
            total = _expected_total(resp, offset)
            mode = "ab" if offset else "wb"
            received = offset
            with open(part, mode) as fh:
                if offset:
                    fh.truncate(offset)
                for chunk in resp.iter_bytes(CHUNK):
                    fh.write(chunk)
                    received += len(chunk)
                    if progress:
                        progress(received)
                fh.flush()
                os.fsync(fh.fileno())
    except httpx.TransportError as exc:
        raise HubUnavailable(f"download {task.product_id}: {exc}") from exc
    if total is not None and received < total:
        raise IncompleteTransfer(f"download {task.product_id}: got {received} of {total} bytes")


def _expected_total(resp: httpx.Response, offset: int) -> int | None:
    cr = resp.headers.get("content-range")
    if cr and "/" in cr:
        tail = cr.rsplit("/", 1)[1]
        if tail.isdigit():
            return int(tail)
    cl = resp.headers.get("content-length")
    return offset + int(cl) if cl and cl.isdigit() else None


# ---------------------------------------------------------------------------
# queue runner


@dataclass
class QueueReport:
    done: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    downloaded: list[str] = field(default_factory=list)


class DownloadQueue:
    """Single scheduler over a set of tasks; downloads run on a worker pool.

    Only the scheduler thread changes task state and writes the journal.
    """

    def __init__(
        self,
        hub: HubClient,
        dest: str | os.PathLike,
        journal: str | os.PathLike,
        policy: ThrottlePolicy = ThrottlePolicy(),
        clock: Clock | None = None,
    ):
        self.hub = hub
        self.dest = Path(dest)
        self.policy = policy
        self.clock = clock or SystemClock()
        self.journal = Journal(journal, self.clock)
        self.tasks: dict[str, DownloadTask] = {}
        self.progress: Callable[[str, int], None] | None = None

    def add(self, product_id: str, md5: str | None = None, size: int | None = None) -> DownloadTask:
        t = self.tasks.get(product_id)
        if t is None:
            t = self.tasks[product_id] = DownloadTask(product_id)
        t.checksum_expected = md5 or t.checksum_expected
        t.size_expected = size if size else t.size_expected
        return t

    def restore(self):
        """Apply the journal to known tasks (and adopt any it mentions)."""
        for pid, rec in self.journal.replay().items():
            t = self.add(pid)
            t.state, t.requested_at, t.attempts, t.reason = rec.state, rec.requested_at, rec.attempts, rec.reason

    def _move(self, task: DownloadTask, dst: TaskState, detail: str = ""):
        if dst not in TRANSITIONS[task.state]:
            raise TransitionError(f"{task.product_id}: {task.state.value} -> {dst.value}")
        self.journal.record(task.product_id, task.state, dst, detail)
        log.info("%s: %s -> %s %s", task.product_id, task.state.value, dst.value, detail)
        task.state = dst
        if dst is TaskState.FAILED:
            task.reason = detail

    def run(self) -> QueueReport:
        self.restore()
        pol, clock = self.policy, self.clock
        throttle = LtaThrottle(pol.min_request_interval, self.journal.last_lta_request())
        order = list(self.tasks.values())

        to_request: deque[DownloadTask] = deque()
        polling: dict[str, tuple[float, int]] = {}  # product_id -> (next poll, consecutive errors)
        ready: deque[DownloadTask] = deque()
        report = QueueReport()

        for t in order:
            if t.state is TaskState.QUEUED:
                online = self._status(t)
                if online is None:
                    continue
                if online:
                    self._move(t, TaskState.ONLINE, "already online")
                    ready.append(t)
                else:
                    to_request.append(t)
            elif t.state is TaskState.LTA_REQUESTED:
                polling[t.product_id] = (clock.now(), 0)
            elif t.state in (TaskState.ONLINE, TaskState.DOWNLOADING):
                ready.append(t)

        running: dict[cf.Future, DownloadTask] = {}
        with cf.ThreadPoolExecutor(max_workers=pol.max_concurrent_downloads) as pool:
            while to_request or polling or ready or running:
                now = clock.now()
                if to_request and throttle.next_slot(now) <= now:
                    t = to_request.popleft()
                    self._request_lta(t, throttle, ready, polling)
                    continue

                for pid, (due, errors) in list(polling.items()):
                    if due > clock.now():
                        continue
                    t = self.tasks[pid]
                    try:
                        online = self.hub.is_online(pid)
                        errors = 0
                    except HubUnavailable as exc:
                        errors += 1
                        t.attempts += 1
                        if errors >= pol.max_attempts:
                            del polling[pid]
                            self._move(t, TaskState.FAILED, f"hub unreachable: {exc}")
                            continue
                        polling[pid] = (clock.now() + pol.backoff(errors), errors)
                        online = False
                    if online:
                        del polling[pid]
                        self._move(t, TaskState.ONLINE, "lta restored")
                        ready.append(t)
                    elif clock.now() - t.requested_at >= pol.lta_timeout:
                        del polling[pid]
                        self._move(t, TaskState.FAILED, "lta timeout")
                    elif errors == 0:
                        nxt = min(clock.now() + pol.poll_interval, t.requested_at + pol.lta_timeout)
                        polling[pid] = (nxt, 0)

                while ready and len(running) < pol.max_concurrent_downloads:
                    t = ready.popleft()
                    if t.state is TaskState.ONLINE:
                        self._move(t, TaskState.DOWNLOADING)
                    fut = pool.submit(self._download, t)
                    running[fut] = t

                deadlines = [d for d, _ in polling.values()]
                if to_request:
                    deadlines.append(throttle.next_slot(clock.now()))
                deadline = min(deadlines) if deadlines else None
                if running:
                    done = clock.wait(running, deadline)
                elif deadline is not None:
                    clock.sleep(deadline - clock.now())
                    done = set()
                else:
                    done = set()
                for fut in done:
                    t = running.pop(fut)
                    outcome = fut.result()
                    if outcome.ok:
                        self._move(t, TaskState.DONE, outcome.reason)
                        if outcome.reason != "already present":
                            report.downloaded.append(t.product_id)
                    else:
                        self._move(t, TaskState.FAILED, outcome.reason)

        for t in order:
            if t.state is TaskState.DONE:
                report.done.append(t.product_id)
            elif t.state is TaskState.FAILED:
                report.failed[t.product_id] = t.reason or ""
        return report

    def _status(self, t: DownloadTask) -> bool | None:
        failures = 0
        while True:
            try:
                return self.hub.is_online(t.product_id)
            except HubUnavailable as exc:
                failures += 1
                if failures >= self.policy.max_attempts:
                    self._move(t, TaskState.FAILED, f"hub unreachable: {exc}")
                    return None
                self.clock.sleep(self.policy.backoff(failures))
            except HubError as exc:
                self._move(t, TaskState.FAILED, str(exc))
                return None

    def _request_lta(self, t, throttle, ready, polling):
        now = self.clock.now()
        throttle.mark(now)
        try:
            online = self.hub.retrieve(t.product_id)
        except HubError as exc:
            self._move(t, TaskState.FAILED, f"lta request: {exc}")
            return
        if online:
            self._move(t, TaskState.ONLINE, "online at request")
            ready.append(t)
            return
        t.requested_at = now
        self._move(t, TaskState.LTA_REQUESTED)
        polling[t.product_id] = (now + self.policy.poll_interval, 0)

    def _download(self, t: DownloadTask) -> DownloadOutcome:
        cb = None
        if self.progress is not None:
            def cb(n, pid=t.product_id):
                self.progress(pid, n)
        try:
            return download_product(self.hub, t, self.dest, self.policy, self.clock, cb)
        except Exception as exc:  # a worker must never take the scheduler down silently
            log.exception("download of %s crashed", t.product_id)
            return DownloadOutcome(False, f"error: {exc}")
