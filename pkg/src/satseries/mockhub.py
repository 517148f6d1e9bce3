"""A scripted, deterministic stand-in for the product hub.

Serves the same wire protocol as the real adapter expects. Time comes from
an injected clock so archive delays of hours can be simulated instantly,
and faults (dropped connections, server errors, corrupted payloads) can be
scripted per product.
"""
from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response, StreamingResponse

from .geo import GeoPolygon
from .hub import Clock, SystemClock
from .timefmt import format_utc, parse_utc


@dataclass
class MockProduct:
    id: str
    tile: str
    sensing_time: str
    cloud_pct: float
    footprint_wkt: str
    payload: bytes = field(repr=False)
    online: bool = True
    # seconds between the LTA request and availability; None never restores
    online_after: float | None = 3600.0
    md5: str | None = None
    data_coverage_pct: float | None = None

    def __post_init__(self):
        if self.md5 is None:
            self.md5 = hashlib.md5(self.payload).hexdigest()
        self.sensing_time = format_utc(parse_utc(self.sensing_time))

    def wire(self) -> dict:
        d = {
            "id": self.id,
            "tile": self.tile,
            "sensing_time": self.sensing_time,
            "cloud_pct": self.cloud_pct,
            "footprint_wkt": self.footprint_wkt,
            "online": self.online,
            "size": len(self.payload),
            "md5": self.md5,
        }
        if self.data_coverage_pct is not None:
            d["data_coverage_pct"] = self.data_coverage_pct
        return d


@dataclass
class LogEntry:
    t: float
    method: str
    path: str
    status: int
    range: str | None = None


class MockHubState:
    def __init__(self, products: list[MockProduct], clock: Clock | None = None):
        self.products = {p.id: p for p in products}
        self.clock = clock or SystemClock()
        self.log: list[LogEntry] = []
        self.requested_at: dict[str, float] = {}
        # fault scripts
        self.cut_downloads: dict[str, list[int]] = {}  # id -> byte counts for successive cut responses
        self.fail_next: dict[str, int] = {}  # path prefix -> remaining 503 responses
        self.corrupt: set[str] = set()
        self.chunk_delay: float = 0.0
        self._lock = threading.Lock()

    def note(self, method, path, status, rng=None):
        with self._lock:
            self.log.append(LogEntry(self.clock.now(), method, path, status, rng))

    def is_online(self, pid: str) -> bool:
        p = self.products[pid]
        if p.online:
            return True
        t = self.requested_at.get(pid)
        if t is None or p.online_after is None:
            return False
        if self.clock.now() - t >= p.online_after:
            p.online = True
        return p.online

    def injected_failure(self, path: str) -> bool:
        with self._lock:
            for prefix, n in self.fail_next.items():
                if n > 0 and path.startswith(prefix):
                    self.fail_next[prefix] = n - 1
                    return True
        return False

    def lta_requests(self) -> list[LogEntry]:
        return [e for e in self.log if e.method == "POST" and e.status == 202]

    def downloads(self, pid: str) -> list[LogEntry]:
        return [e for e in self.log if e.path == f"/download/{pid}"]


def _bbox_of(wkt: str):
    return GeoPolygon.from_wkt(wkt).bounds()


def create_app(state: MockHubState) -> FastAPI:
    app = FastAPI(title="mock product hub")
    app.state.hub = state

    def lookup(pid: str) -> MockProduct:
        if pid not in state.products:
            raise HTTPException(404, f"unknown product {pid}")
        return state.products[pid]

    def maybe_fail(request: Request):
        if state.injected_failure(request.url.path):
            state.note(request.method, request.url.path, 503)
            raise HTTPException(503, "injected failure")

    @app.get("/search")
    def search(
        request: Request,
        bbox: str = Query(...),
        start: str = Query(...),
        end: str = Query(...),
        cloudmax: float = Query(100.0),
    ):
        maybe_fail(request)
        try:
            w, s, e, n = (float(v) for v in bbox.split(","))
            t0, t1 = parse_utc(start), parse_utc(end)
        except ValueError:
            raise HTTPException(400, "bad query parameters") from None
        hits = []
        for p in sorted(state.products.values(), key=lambda p: p.id):
            pw, ps, pe, pn = _bbox_of(p.footprint_wkt)
            t = parse_utc(p.sensing_time)
            if pe < w or pw > e or pn < s or ps > n:
                continue
            if not (t0 <= t < t1) or p.cloud_pct > cloudmax:
                continue
            d = p.wire()
            d["online"] = state.is_online(p.id)
            hits.append(d)
        state.note("GET", "/search", 200)
        return {"products": hits}

    @app.post("/retrieve/{pid}")
    def retrieve(pid: str, request: Request):
        maybe_fail(request)
        lookup(pid)
        if state.is_online(pid):
            state.note("POST", request.url.path, 200)
            return JSONResponse({"online": True}, status_code=200)
        # repeated requests do not restart the archive clock
        state.requested_at.setdefault(pid, state.clock.now())
        state.note("POST", request.url.path, 202)
        return JSONResponse({"online": False}, status_code=202)

    @app.get("/status/{pid}")
    def status(pid: str, request: Request):
        maybe_fail(request)
        lookup(pid)
        state.note("GET", request.url.path, 200)
        return {"online": state.is_online(pid)}

    @app.get("/download/{pid}")
    def download(pid: str, request: Request):
        rng = request.headers.get("range")
        maybe_fail(request)
        p = lookup(pid)
        if not state.is_online(pid):
            state.note("GET", request.url.path, 409, rng)
            raise HTTPException(409, "product is offline")
        body = p.payload
        if pid in state.corrupt and body:
            body = bytes([body[0] ^ 0xFF]) + body[1:]
        size = len(body)
        offset = 0
        if rng:
            try:
                unit, spec = rng.split("=", 1)
                offset = int(spec.split("-", 1)[0])
                assert unit.strip() == "bytes"
            except (ValueError, AssertionError):
                raise HTTPException(416, "bad range") from None
            if offset >= size:
                state.note("GET", request.url.path, 416, rng)
                raise HTTPException(416, "range not satisfiable")
        chunk = body[offset:]
        headers = {"content-length": str(len(chunk)), "accept-ranges": "bytes"}
        status = 200
        if rng:
            status = 206
            headers["content-range"] = f"bytes {offset}-{size - 1}/{size}"
        cuts = state.cut_downloads.get(pid)
        if cuts:
            keep = cuts.pop(0)
            # declared length stays full; the body stops short like a dropped connection
            chunk = chunk[: max(0, keep - offset)]
        state.note("GET", request.url.path, status, rng)
        if state.chunk_delay > 0:

            def slow():
                for i in range(0, len(chunk), 4096):
                    time.sleep(state.chunk_delay)
                    yield chunk[i:i + 4096]

            return StreamingResponse(slow(), status_code=status, headers=headers, media_type="application/zip")
        return Response(chunk, status_code=status, headers=headers, media_type="application/zip")

    return app


def load_catalog(path: str | os.PathLike) -> list[MockProduct]:
    """Read a mock catalogue: JSON list of products whose payloads sit next to it."""
    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for d in doc["products"]:
        payload = (path.parent / d.pop("payload_file")).read_bytes()
        out.append(MockProduct(payload=payload, **d))
    return out


def serve(catalog: str | os.PathLike, host: str = "127.0.0.1", port: int = 8765, chunk_delay: float = 0.0):
    import uvicorn

    state = MockHubState(load_catalog(catalog))
    state.chunk_delay = chunk_delay
    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
