"""A local chat-completion server that answers with canned replies.

Used by the test-suite and for offline demos of the LLM decomposition path::

    with StubLLMServer(reply="1. a\\n2. b") as stub:
        decompose_llm(pair, "psi1", LlmEndpointConfig(stub.base_url))
"""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Union

Reply = Union[str, Callable[[dict], str]]


class _Handler(BaseHTTPRequestHandler):
    server: "_Server"

    def log_message(self, *args):  # keep test output quiet
        pass

    def do_POST(self):
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._send(404, {"error": {"message": f"no route {self.path}"}})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send(400, {"error": {"message": "invalid JSON"}})
            return
        stub = self.server.stub
        with stub.lock:
            stub.requests.append({"path": self.path, "headers": dict(self.headers), "body": body})
        if stub.status != 200:
            self._send(stub.status, {"error": {"message": "stub configured to fail"}})
            return
        content = stub.reply(body) if callable(stub.reply) else stub.reply
        self._send(200, {
            "id": f"stub-{len(stub.requests)}",
            "object": "chat.completion",
            "model": body.get("model", "stub"),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        })

    def _send(self, status, payload):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    stub: "StubLLMServer"


class StubLLMServer:
    """OpenAI-compatible ``POST /v1/chat/completions`` on 127.0.0.1 with a fixed or computed reply."""

    def __init__(self, reply: Reply = "", status: int = 200, port: int = 0):
        self.reply = reply
        self.status = status
        self.requests: list = []
        self.lock = threading.Lock()
        self._httpd = _Server(("127.0.0.1", port), _Handler)
        self._httpd.stub = self
        self._thread = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}/v1"

    def start(self) -> "StubLLMServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self):
        self._httpd.serve_forever()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
