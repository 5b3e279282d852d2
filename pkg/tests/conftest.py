import json
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from stagewise import backends


@contextmanager
def serve(handler_fn):
    """Run a local HTTP server; ``handler_fn(path, payload) -> (status, body)``."""
    calls = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            payload = json.loads(self.rfile.read(length) or b"null")
            calls.append((self.path, payload))
            status, body = handler_fn(self.path, payload)
            raw = body if isinstance(body, bytes) else json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        yield f"http://127.0.0.1:{srv.server_address[1]}", calls
    finally:
        srv.shutdown()
        srv.server_close()


@pytest.fixture
def fast_backoff(monkeypatch):
    monkeypatch.setattr(backends, "HTTP_BACKOFF", 0.01)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail, status=None):
    """Remember one acceptance verdict; all of them are echoed in the terminal summary."""
    status = status or ("PASS" if passed else "FAIL")
    line = f"[{status}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
