"""The remote segmentation adapter against an in-process HTTP server."""

import base64
import io
import json
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

from ivfuse import masks as mk
from ivfuse.errors import MalformedMaskError, RemoteUnreachableError


def _b64_mask(arr):
    buf = io.BytesIO()
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


class FakeService:
    def __init__(self, instances, fail_first=0, delay=0.0, raw_reply=None):
        self.instances = instances
        self.fail_first = fail_first
        self.delay = delay
        self.raw_reply = raw_reply
        self.requests = []
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with service.lock:
                    service.requests.append(body)
                    n = len(service.requests)
                    service.active += 1
                    service.peak = max(service.peak, service.active)
                time.sleep(service.delay)
                with service.lock:
                    service.active -= 1
                if n <= service.fail_first:
                    self.send_response(503)
                    self.end_headers()
                    return
                payload = service.raw_reply or json.dumps(
                    {"masks": [_b64_mask(m) for m in service.instances]}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(payload)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/segment"
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def instances():
    a = np.zeros((8, 10), np.uint8)
    b = np.zeros((8, 10), np.uint8)
    a[1:4, 1:4] = 1
    b[3:6, 2:8] = 1
    return [a, b]


def test_union_of_instances(instances):
    svc = FakeService(instances)
    try:
        spec = mk.MaskProviderSpec("external-lvm", prompt=mk.DEFAULT_PROMPT, endpoint=svc.url)
        image = np.random.default_rng(0).random((8, 10, 3))
        mask, count = mk.generate_modal_mask_with_count(image, spec)
    finally:
        svc.close()
    assert count == 2
    np.testing.assert_array_equal(mask, instances[0] | instances[1])
    assert len(svc.requests) == 1
    assert svc.requests[0]["prompt"] == mk.DEFAULT_PROMPT
    with Image.open(io.BytesIO(base64.b64decode(svc.requests[0]["image"]))) as im:
        assert im.size == (10, 8)


def test_zero_detections_give_empty_mask():
    svc = FakeService([])
    try:
        spec = mk.MaskProviderSpec("external-lvm", prompt="cars", endpoint=svc.url)
        mask, count = mk.generate_modal_mask_with_count(np.zeros((8, 10)), spec)
    finally:
        svc.close()
    assert count == 0 and mask.shape == (8, 10) and not mask.any()


def test_transient_failures_are_retried(instances):
    svc = FakeService(instances, fail_first=2)
    try:
        client = mk.LVMClient(svc.url, retries=3, backoff=0.01)
        out = client.segment(np.zeros((8, 10)), "cars")
    finally:
        svc.close()
    assert len(out) == 2 and len(svc.requests) == 3


def test_unreachable_after_retries():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    client = mk.LVMClient(f"http://127.0.0.1:{port}/x", retries=2, backoff=0.01, timeout=1)
    with pytest.raises(RemoteUnreachableError, match="3 attempts"):
        client.segment(np.zeros((4, 4)), "cars")


def test_persistent_server_errors_exhaust_retries(instances):
    svc = FakeService(instances, fail_first=10)
    try:
        client = mk.LVMClient(svc.url, retries=3, backoff=0.01)
        with pytest.raises(RemoteUnreachableError):
            client.segment(np.zeros((8, 10)), "cars")
    finally:
        svc.close()
    assert len(svc.requests) == 4


def test_malformed_reply():
    svc = FakeService([], raw_reply=b'{"detections": []}')
    try:
        with pytest.raises(MalformedMaskError):
            mk.LVMClient(svc.url).segment(np.zeros((4, 4)), "cars")
    finally:
        svc.close()


def test_instance_size_mismatch(instances):
    svc = FakeService(instances)
    try:
        spec = mk.MaskProviderSpec("external-lvm", prompt="cars", endpoint=svc.url)
        with pytest.raises(mk.DimensionMismatchError):
            mk.generate_modal_mask(np.zeros((9, 10)), spec)
    finally:
        svc.close()


def test_in_flight_requests_are_bounded(instances):
    svc = FakeService(instances, delay=0.05)
    try:
        client = mk.LVMClient(svc.url, max_in_flight=2)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: client.segment(np.zeros((8, 10)), "cars"),
                                    range(8)))
    finally:
        svc.close()
    assert len(results) == 8 and len(svc.requests) == 8
    assert svc.peak <= 2
