from __future__ import annotations

import hashlib
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient

from satseries.geo import Crs, GeoPoint, GeoPolygon, project
from satseries.hub import HubClient, SimulatedClock
from satseries.mockhub import MockHubState, MockProduct, create_app

UTM33N = Crs.utm(33, "N")

# one line per acceptance criterion, echoed in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def utm_rect_wkt(x0, y0, x1, y1, crs=UTM33N) -> str:
    """WGS84 footprint WKT of a UTM rectangle."""
    pts = [project(GeoPoint(x, y), crs, Crs.wgs84()) for x, y in ((x0, y0), (x1, y0), (x1, y1), (x0, y1))]
    return GeoPolygon(tuple((p.x, p.y) for p in pts), Crs.wgs84()).to_wkt()


def payload(n: int, seed: int = 0) -> bytes:
    return np.random.default_rng(seed).integers(0, 256, n, dtype=np.uint8).tobytes()


def make_product(pid: str, *, size=4096, seed=0, online=True, online_after=3600.0, cloud=1.0,
                 when="2018-05-01T10:00:00Z", tile="T33TUN", footprint=None, coverage=None) -> MockProduct:
    return MockProduct(
        id=pid, tile=tile, sensing_time=when, cloud_pct=cloud,
        footprint_wkt=footprint or utm_rect_wkt(400000, 5190000, 509800, 5299960),
        payload=payload(size, seed), online=online, online_after=online_after, data_coverage_pct=coverage,
    )


class MockHub:
    """In-process mock hub on a simulated clock, reached through a TestClient."""

    def __init__(self, products, clock=None):
        self.clock = clock or SimulatedClock()
        self.state = MockHubState(products, self.clock)
        self.http = TestClient(create_app(self.state))
        self.client = HubClient(self.http)

    def close(self):
        self.http.close()


@pytest.fixture
def mock_hub():
    hubs = []

    def factory(products, clock=None):
        h = MockHub(products, clock)
        hubs.append(h)
        return h

    yield factory
    for h in hubs:
        h.close()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveHub:
    """The mock hub served over real HTTP in a background thread."""

    def __init__(self, products, port=None):
        self.state = MockHubState(products)
        self.port = port or free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        config = uvicorn.Config(create_app(self.state), host="127.0.0.1", port=self.port, log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("mock hub did not start")
            time.sleep(0.01)
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


def md5(b: bytes) -> str:
    return hashlib.md5(b).hexdigest()
