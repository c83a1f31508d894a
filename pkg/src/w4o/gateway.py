"""JSON-over-HTTP protocol for the five model slots, a retrying client and a scriptable mock server.

Routes (all POST, header ``X-Request-Id``)::

    /v1/plan      {task, image_png_b64}                          -> {subtasks, targets}
    /v1/dream     {image_png_b64, prompt}                        -> {image_png_b64}
    /v1/critique  {image_before_b64, image_after_b64, subtask}   -> {decision, revised_prompt?, rationale?}
    /v1/depth     {image_png_b64}                                -> {width, height, depth_f32le_b64}
    /v1/segment   {image_png_b64, label}                         -> {mask_png_b64}
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Dict, List, Optional

import jsonschema
import numpy as np
import requests
from PIL import Image

from .errors import BackendTimeout, MalformedResponse, PortUnavailable, RemoteError, RetriesExhausted
from .geometry import DepthMap
from .world_agents import BackendSuite, Critic, DepthEstimator, Dreamer, Planner, ReflectionVerdict, Segmenter

log = logging.getLogger(__name__)

ENV_URL = "W4O_BACKEND_URL"
KINDS = ("plan", "dream", "critique", "depth", "segment")
ROUTES = {kind: f"/v1/{kind}" for kind in KINDS}

_STR = {"type": "string"}
_NONEMPTY = {"type": "string", "minLength": 1}

REQUEST_SCHEMAS = {
    "plan": {
        "type": "object",
        "required": ["task", "image_png_b64"],
        "properties": {"task": _NONEMPTY, "image_png_b64": _STR},
    },
    "dream": {
        "type": "object",
        "required": ["image_png_b64", "prompt"],
        "properties": {"image_png_b64": _STR, "prompt": _NONEMPTY},
    },
    "critique": {
        "type": "object",
        "required": ["image_before_b64", "image_after_b64", "subtask"],
        "properties": {"image_before_b64": _STR, "image_after_b64": _STR, "subtask": _NONEMPTY},
    },
    "depth": {"type": "object", "required": ["image_png_b64"], "properties": {"image_png_b64": _STR}},
    "segment": {
        "type": "object",
        "required": ["image_png_b64", "label"],
        "properties": {"image_png_b64": _STR, "label": _NONEMPTY},
    },
}

RESPONSE_SCHEMAS = {
    "plan": {
        "type": "object",
        "required": ["subtasks", "targets"],
        "properties": {
            "subtasks": {"type": "array", "items": _NONEMPTY},
            "targets": {"type": "array", "items": _NONEMPTY},
        },
    },
    "dream": {"type": "object", "required": ["image_png_b64"], "properties": {"image_png_b64": _STR}},
    "critique": {
        "type": "object",
        "required": ["decision"],
        "properties": {
            "decision": {"enum": ["accept", "revise"]},
            "revised_prompt": _STR,
            "rationale": _STR,
        },
        "if": {"properties": {"decision": {"const": "revise"}}},
        "then": {"required": ["revised_prompt"], "properties": {"revised_prompt": _NONEMPTY}},
    },
    "depth": {
        "type": "object",
        "required": ["width", "height", "depth_f32le_b64"],
        "properties": {
            "width": {"type": "integer", "minimum": 1},
            "height": {"type": "integer", "minimum": 1},
            "depth_f32le_b64": _STR,
        },
    },
    "segment": {"type": "object", "required": ["mask_png_b64"], "properties": {"mask_png_b64": _STR}},
}


# ---------------------------------------------------------------- codecs

def encode_png(image: np.ndarray) -> str:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ValueError("images must be uint8")
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data, validate=True))) as img:
        img.load()
        return np.array(img)


def encode_mask(mask: np.ndarray) -> str:
    return encode_png(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def decode_mask(data: str) -> np.ndarray:
    arr = decode_png(data)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr >= 128


def encode_depth(depth: DepthMap) -> Dict[str, Any]:
    """Invalid pixels travel as 0."""
    return {
        "width": depth.width,
        "height": depth.height,
        "depth_f32le_b64": base64.b64encode(depth.values.astype("<f4").tobytes()).decode("ascii"),
    }


def decode_depth(doc: Dict[str, Any]) -> DepthMap:
    raw = np.frombuffer(base64.b64decode(doc["depth_f32le_b64"], validate=True), dtype="<f4")
    w, h = int(doc["width"]), int(doc["height"])
    if raw.size != w * h:
        raise MalformedResponse(f"depth payload holds {raw.size} values, expected {w}x{h}")
    return DepthMap.from_array(raw.astype(float).reshape(h, w))


# ---------------------------------------------------------------- client

@dataclass(frozen=True)
class GatewayConfig:
    base_url: str = "http://127.0.0.1:8700"
    timeout: float = 30.0
    max_retries: int = 2
    backoff_base: float = 0.5
    single_flight: bool = False

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")

    def resolved_url(self) -> str:
        return os.environ.get(ENV_URL) or self.base_url


@dataclass(frozen=True)
class BackendRequest:
    kind: str
    payload: Dict[str, Any]
    request_id: str = field(default_factory=lambda: str(uuid.uuid4()))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown request kind {self.kind!r}")
        jsonschema.validate(self.payload, REQUEST_SCHEMAS[self.kind])

    def body(self) -> bytes:
        return json.dumps(self.payload, sort_keys=True, separators=(",", ":")).encode()


_flight_locks: Dict[str, threading.Lock] = {}
_flight_guard = threading.Lock()


def _flight_lock(url: str) -> threading.Lock:
    with _flight_guard:
        return _flight_locks.setdefault(url, threading.Lock())


def call(config: GatewayConfig, request: BackendRequest, session: Optional[requests.Session] = None) -> Dict[str, Any]:
    """POST ``request`` with retries on transport errors and 5xx; returns the validated response.

    The body bytes and ``X-Request-Id`` are identical on every attempt, and the
    timeout applies to each attempt separately.
    """
    base = config.resolved_url().rstrip("/")
    url = base + ROUTES[request.kind]
    if config.single_flight:
        with _flight_lock(base):
            return _call(config, request, url, session)
    return _call(config, request, url, session)


def _call(config, request, url, session):
    body = request.body()
    headers = {"Content-Type": "application/json", "X-Request-Id": request.request_id}
    poster = session.post if session is not None else requests.post
    attempts = 0
    timeouts = 0
    last_problem = ""
    for attempt in range(config.max_retries + 1):
        if attempt:
            time.sleep(config.backoff_base * 2 ** (attempt - 1))
        attempts += 1
        try:
            resp = poster(url, data=body, headers=headers, timeout=config.timeout)
        except requests.Timeout as exc:
            timeouts += 1
            last_problem = f"timeout: {exc}"
            log.warning("%s attempt %d timed out", request.kind, attempts)
            continue
        except requests.ConnectionError as exc:
            last_problem = f"transport error: {exc}"
            log.warning("%s attempt %d failed: %s", request.kind, attempts, exc)
            continue
        if resp.status_code >= 500:
            last_problem = f"HTTP {resp.status_code}"
            log.warning("%s attempt %d got %d", request.kind, attempts, resp.status_code)
            continue
        if resp.status_code >= 400:
            try:
                message = resp.json().get("error", resp.text)
            except ValueError:
                message = resp.text
            raise RemoteError(f"{request.kind}: HTTP {resp.status_code}: {message}", resp.status_code)
        try:
            doc = resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{request.kind}: response is not JSON") from exc
        try:
            jsonschema.validate(doc, RESPONSE_SCHEMAS[request.kind])
        except jsonschema.ValidationError as exc:
            raise MalformedResponse(f"{request.kind}: {exc.message}") from exc
        return doc
    if timeouts == attempts:
        raise BackendTimeout(f"{request.kind}: all {attempts} attempts timed out", attempts)
    raise RetriesExhausted(f"{request.kind}: gave up after {attempts} attempts ({last_problem})", attempts)


class Gateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self.session = requests.Session()

    def call(self, kind: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        return call(self.config, BackendRequest(kind, payload), self.session)

    def close(self):
        self.session.close()


class RemotePlanner(Planner):
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def plan(self, task, image):
        doc = self.gateway.call("plan", {"task": task, "image_png_b64": encode_png(image)})
        return doc["subtasks"], doc["targets"]


class RemoteDreamer(Dreamer):
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def dream(self, image, prompt):
        doc = self.gateway.call("dream", {"image_png_b64": encode_png(image), "prompt": prompt})
        try:
            return decode_png(doc["image_png_b64"])
        except Exception as exc:
            raise MalformedResponse(f"dream: undecodable image: {exc}") from exc


class RemoteCritic(Critic):
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def critique(self, before, after, subtask):
        doc = self.gateway.call(
            "critique",
            {"image_before_b64": encode_png(before), "image_after_b64": encode_png(after), "subtask": subtask},
        )
        revised = doc.get("revised_prompt") if doc["decision"] == "revise" else None
        return ReflectionVerdict(doc["decision"], revised, doc.get("rationale", ""))


class RemoteDepth(DepthEstimator):
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def estimate(self, image):
        doc = self.gateway.call("depth", {"image_png_b64": encode_png(image)})
        return decode_depth(doc)


class RemoteSegmenter(Segmenter):
    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def segment(self, image, label):
        doc = self.gateway.call("segment", {"image_png_b64": encode_png(image), "label": label})
        try:
            return decode_mask(doc["mask_png_b64"])
        except Exception as exc:
            raise MalformedResponse(f"segment: undecodable mask: {exc}") from exc


def remote_suite(config: GatewayConfig) -> BackendSuite:
    gw = Gateway(config)
    return BackendSuite(
        planner=RemotePlanner(gw),
        dreamer=RemoteDreamer(gw),
        critic=RemoteCritic(gw),
        depth_estimator=RemoteDepth(gw),
        segmenter=RemoteSegmenter(gw),
        name="remote",
    )


# ---------------------------------------------------------------- mock server

@dataclass
class RecordedRequest:
    kind: str
    ordinal: int
    request_id: Optional[str]
    body: bytes

    def json(self) -> Dict[str, Any]:
        return json.loads(self.body)


class MockServer:
    """Local HTTP server replaying a per-kind script of responses.

    ``script`` maps a kind to a list of entries, consumed by call ordinal (the
    last entry repeats).  An entry may set ``status`` (default 200), ``body``
    (a JSON document), ``raw`` (a literal response string), ``echo`` (answer a
    dream request with its own input image) and ``delay`` in seconds.
    """

    def __init__(self, script: Dict[str, List[Dict[str, Any]]], port: int = 0, host: str = "127.0.0.1"):
        unknown = set(script) - set(KINDS)
        if unknown:
            raise ValueError(f"script has unknown kinds: {sorted(unknown)}")
        self.script = {k: list(v) for k, v in script.items()}
        self.requests: List[RecordedRequest] = []
        self._counts = {k: 0 for k in KINDS}
        self._lock = threading.Lock()
        handler = self._make_handler()
        try:
            self._httpd = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise PortUnavailable(f"cannot bind {host}:{port}: {exc}") from exc
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self._httpd.server_address[0]}:{self.port}"

    def start(self) -> "MockServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._httpd.serve_forever()

    def close(self):
        if self._httpd is None:
            return
        if self._thread is not None:
            self._httpd.shutdown()
            self._thread.join(timeout=5)
        self._httpd.server_close()
        self._httpd = None

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def kinds(self) -> List[str]:
        return [r.kind for r in self.requests]

    def _next_entry(self, kind: str, body: bytes, request_id: Optional[str]):
        with self._lock:
            ordinal = self._counts[kind]
            self._counts[kind] += 1
            self.requests.append(RecordedRequest(kind, ordinal, request_id, body))
        entries = self.script.get(kind)
        if not entries:
            return None
        return entries[min(ordinal, len(entries) - 1)]

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug("mock server: " + fmt, *args)

            def _send(self, status: int, payload: bytes):
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                kind = next((k for k, route in ROUTES.items() if route == self.path), None)
                if kind is None:
                    self._send(404, json.dumps({"error": f"no route {self.path}"}).encode())
                    return
                entry = server._next_entry(kind, body, self.headers.get("X-Request-Id"))
                if entry is None:
                    self._send(404, json.dumps({"error": f"no script for {kind}"}).encode())
                    return
                if entry.get("delay"):
                    time.sleep(float(entry["delay"]))
                status = int(entry.get("status", 200))
                if "raw" in entry:
                    payload = str(entry["raw"]).encode()
                elif entry.get("echo"):
                    doc = json.loads(body)
                    payload = json.dumps({"image_png_b64": doc.get("image_png_b64", "")}).encode()
                elif "body" in entry:
                    payload = json.dumps(entry["body"]).encode()
                else:
                    payload = json.dumps({"error": f"scripted status {status}"}).encode()
                try:
                    self._send(status, payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        return Handler


def serve_mock(script: Dict[str, List[Dict[str, Any]]], port: int = 0) -> MockServer:
    """Start a :class:`MockServer` in a background thread."""
    return MockServer(script, port).start()
