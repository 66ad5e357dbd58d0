"""JSON-over-HTTP protocol between a planner and the instrument.

The instrument side is a :class:`LabService` that executes requests one at a
time in arrival order and caches responses by ``(campaign_id,
experiment_id)`` so retransmissions never measure twice. It can be reached
in-process through :class:`LoopbackTransport` or over a socket through
:func:`serve` and :class:`HttpTransport`; both paths carry the same bytes.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
import urllib.error
import urllib.request
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .composition import Electrolyte
from .errors import (
    ClientError,
    DomainError,
    ElectrolyteLoopError,
    InfeasibleDoseError,
    InventoryError,
    ProtocolError,
)
from .virtual_lab import LabConfig, LabState, rinse, run_measurement

log = logging.getLogger(__name__)

STATUSES = ("ok", "infeasible_dose", "inventory_exhausted", "instrument_fault")
_REQUEST_KEYS = {"campaign_id", "experiment_id", "composition", "replicates"}
_COMPOSITION_KEYS = {"w_ec", "w_dmc", "w_emc", "molality_mol_kg"}
_RESPONSE_KEYS = {
    "experiment_id",
    "status",
    "conductivity_ms_cm",
    "density_g_ml",
    "temperature_c",
    "runs",
    "duration_s",
    "reason",
}


@dataclass(frozen=True)
class ExperimentRequest:
    campaign_id: str
    experiment_id: int
    composition: Electrolyte
    replicates: int = 3

    def __post_init__(self):
        if not isinstance(self.campaign_id, str) or not self.campaign_id:
            raise ProtocolError("campaign_id must be a non-empty string")
        if isinstance(self.experiment_id, bool) or not isinstance(self.experiment_id, int) or self.experiment_id < 1:
            raise ProtocolError("experiment_id must be an integer >= 1")
        if isinstance(self.replicates, bool) or not isinstance(self.replicates, int) or self.replicates < 2:
            raise ProtocolError("replicates must be an integer >= 2")

    def to_dict(self) -> dict:
        b = self.composition.blend
        return {
            "campaign_id": self.campaign_id,
            "experiment_id": self.experiment_id,
            "composition": {
                "w_ec": b.w_ec,
                "w_dmc": b.w_dmc,
                "w_emc": b.w_emc,
                "molality_mol_kg": self.composition.molality,
            },
            "replicates": self.replicates,
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentRequest":
        if not isinstance(d, dict):
            raise ProtocolError("request body must be a JSON object")
        missing = {"campaign_id", "experiment_id", "composition"} - d.keys()
        if missing:
            raise ProtocolError(f"missing field(s): {sorted(missing)}")
        extra = d.keys() - _REQUEST_KEYS
        if extra:
            raise ProtocolError(f"unknown field(s): {sorted(extra)}")
        c = d["composition"]
        if not isinstance(c, dict) or c.keys() != _COMPOSITION_KEYS:
            raise ProtocolError(f"composition must have exactly {sorted(_COMPOSITION_KEYS)}")
        values = [c[k] for k in ("w_ec", "w_dmc", "w_emc", "molality_mol_kg")]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            raise ProtocolError("composition values must be numbers")
        composition = Electrolyte.from_fractions(*values)
        return cls(d["campaign_id"], d["experiment_id"], composition, d.get("replicates", 3))


@dataclass(frozen=True)
class ExperimentResponse:
    experiment_id: int
    status: str
    conductivity_ms_cm: float | None = None
    density_g_ml: float | None = None
    temperature_c: float | None = None
    runs: tuple | None = None
    duration_s: float | None = None
    reason: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ProtocolError(f"unknown status {self.status!r}")
        if self.runs is not None:
            object.__setattr__(self, "runs", tuple(float(r) for r in self.runs))
        if self.status == "ok":
            nums = (self.conductivity_ms_cm, self.density_g_ml, self.temperature_c, self.duration_s)
            if any(v is None or not math.isfinite(v) for v in nums):
                raise ProtocolError("ok response with missing or non-finite numeric field")
            if not self.runs or len(self.runs) < 2 or not all(math.isfinite(r) for r in self.runs):
                raise ProtocolError("ok response needs at least 2 finite runs")
            expected = sum(self.runs[1:]) / (len(self.runs) - 1)
            if abs(expected - self.conductivity_ms_cm) > 1e-12 * max(1.0, abs(expected)):
                raise ProtocolError("conductivity_ms_cm must equal the mean of runs after the first")

    def to_dict(self) -> dict:
        d = {
            "experiment_id": self.experiment_id,
            "status": self.status,
            "conductivity_ms_cm": self.conductivity_ms_cm,
            "density_g_ml": self.density_g_ml,
            "temperature_c": self.temperature_c,
            "runs": list(self.runs) if self.runs is not None else None,
            "duration_s": self.duration_s,
        }
        if self.status != "ok":
            d["reason"] = self.reason
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentResponse":
        if not isinstance(d, dict) or "status" not in d or "experiment_id" not in d:
            raise ProtocolError("response must carry experiment_id and status")
        extra = d.keys() - _RESPONSE_KEYS
        if extra:
            raise ProtocolError(f"unknown field(s): {sorted(extra)}")
        return cls(**{k: d.get(k) for k in _RESPONSE_KEYS})


def encode(message) -> bytes:
    return json.dumps(message.to_dict(), sort_keys=True, allow_nan=False).encode("utf-8")


def _loads(body: bytes):
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"body is not valid JSON: {exc}") from None


def decode_request(body: bytes) -> ExperimentRequest:
    try:
        return ExperimentRequest.from_dict(_loads(body))
    except DomainError as exc:
        raise ProtocolError(f"invalid composition: {exc}") from None


def decode_response(body: bytes) -> ExperimentResponse:
    return ExperimentResponse.from_dict(_loads(body))


def _error_body(status: str, reason: str) -> bytes:
    return json.dumps({"status": status, "reason": reason}, sort_keys=True).encode("utf-8")


class LabService:
    """Serial executor in front of a :class:`LabState`.

    Requests are queued and run by a single worker thread, so the order of
    state mutations equals the order of arrival.
    """

    def __init__(self, state: LabState, config: LabConfig = LabConfig(), cache_size: int = 10_000):
        self.state = state
        self.config = config
        self.cache_size = cache_size
        self.measurements = 0
        self._cache: dict[str, OrderedDict] = {}
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._run, name="lab-worker", daemon=True)
        self._worker.start()

    def _run(self):
        while True:
            req, fut = self._queue.get()
            try:
                fut.set_result(self._execute(req))
            except BaseException as exc:  # pragma: no cover - surfaced to the caller
                fut.set_exception(exc)

    def _execute(self, req: ExperimentRequest):
        cache = self._cache.setdefault(req.campaign_id, OrderedDict())
        hit = cache.get(req.experiment_id)
        if hit is not None:
            cached_req, cached_resp = hit
            if cached_req != req:
                return 409, _error_body("conflict", "experiment_id already used with a different request")
            return 200, cached_resp

        start = self.state.clock_s
        try:
            record = run_measurement(req.composition, self.state, self.config, req.replicates)
            rinse(self.state, self.config)
            self.measurements += 1
            resp = ExperimentResponse(
                experiment_id=req.experiment_id,
                status="ok",
                conductivity_ms_cm=record.conductivity,
                density_g_ml=record.density,
                temperature_c=record.temperature,
                runs=record.runs,
                duration_s=self.state.clock_s - start,
            )
        except InfeasibleDoseError as exc:
            resp = ExperimentResponse(req.experiment_id, "infeasible_dose", reason=str(exc))
        except InventoryError as exc:
            resp = ExperimentResponse(req.experiment_id, "inventory_exhausted", reason=str(exc))
        except ElectrolyteLoopError as exc:
            resp = ExperimentResponse(req.experiment_id, "instrument_fault", reason=str(exc))
        body = encode(resp)
        cache[req.experiment_id] = (req, body)
        while len(cache) > self.cache_size:
            cache.popitem(last=False)
        return 200, body

    def post_experiment(self, body: bytes):
        """Handle a raw POST /experiment body; returns (http_status, body)."""
        try:
            req = decode_request(body)
        except ProtocolError as exc:
            return 400, _error_body("invalid_request", str(exc))
        fut: Future = Future()
        self._queue.put((req, fut))
        return fut.result()

    def status(self) -> dict:
        with self.state.lock:
            return {
                "inventories_ml": self.state.inventories,
                "clock_s": self.state.clock_s,
                "residual_conductivity_ms_cm": self.state.residual_conductivity,
                "cell_constant_per_cm": self.state.cell_constant.value,
                "measurements": self.measurements,
                "queued": self._queue.qsize(),
            }

    def route(self, method: str, path: str, body: bytes = b""):
        if method == "POST" and path == "/experiment":
            return self.post_experiment(body)
        if method == "GET" and path == "/status":
            return 200, json.dumps(self.status(), sort_keys=True).encode("utf-8")
        if method == "GET" and path == "/health":
            return 200, b'{"status": "alive"}'
        return 404, _error_body("not_found", f"{method} {path}")


class _Handler(BaseHTTPRequestHandler):
    service: LabService = None
    protocol_version = "HTTP/1.1"

    def _reply(self, code, body):
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        self._reply(*self.service.route("GET", self.path))

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        self._reply(*self.service.route("POST", self.path, body))

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)


@dataclass
class LabServer:
    service: LabService
    httpd: ThreadingHTTPServer
    thread: threading.Thread = field(repr=False)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def shutdown(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(state: LabState, config: LabConfig = LabConfig(), host: str = "127.0.0.1", port: int = 0) -> LabServer:
    """Start the HTTP endpoint in a background thread; ``port=0`` picks a free port."""
    service = state if isinstance(state, LabService) else LabService(state, config)
    handler = type("LabHandler", (_Handler,), {"service": service})
    httpd = ThreadingHTTPServer((host, port), handler)
    httpd.daemon_threads = True
    thread = threading.Thread(target=httpd.serve_forever, name="lab-http", daemon=True)
    thread.start()
    return LabServer(service, httpd, thread)


class LoopbackTransport:
    """Calls a :class:`LabService` directly with the encoded bytes."""

    def __init__(self, service: LabService):
        self.service = service

    def request(self, method: str, path: str, body: bytes = b""):
        return self.service.route(method, path, body)


class HttpTransport:
    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def request(self, method: str, path: str, body: bytes = b""):
        req = urllib.request.Request(
            self.base_url + path,
            data=body if method == "POST" else None,
            method=method,
            headers={"Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()


class ExperimentClient:
    """Blocking client with idempotent retries on transport failure."""

    def __init__(self, transport, retries: int = 3, backoff_s: float = 0.05):
        self.transport = transport
        self.retries = retries
        self.backoff_s = backoff_s

    def _call(self, method, path, body=b""):
        last = None
        for attempt in range(self.retries + 1):
            try:
                return self.transport.request(method, path, body)
            except (OSError, ConnectionError, TimeoutError) as exc:
                last = exc
                log.warning("transport failure on %s %s (attempt %d): %s", method, path, attempt + 1, exc)
                time.sleep(self.backoff_s * (2**attempt))
        raise ClientError(f"{method} {path} failed after {self.retries + 1} attempts: {last}")

    def submit(self, req: ExperimentRequest) -> ExperimentResponse:
        code, body = self._call("POST", "/experiment", encode(req))
        if code != 200:
            payload = _loads(body)
            raise ProtocolError(f"server rejected request ({code}): {payload.get('reason')}")
        return decode_response(body)

    def status(self) -> dict:
        return _loads(self._call("GET", "/status")[1])

    def health(self) -> dict:
        return _loads(self._call("GET", "/health")[1])


def submit_experiment(client: ExperimentClient, req: ExperimentRequest) -> ExperimentResponse:
    return client.submit(req)
