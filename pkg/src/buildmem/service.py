"""JSON-over-HTTP prediction endpoint for a loaded ensemble."""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from buildmem.data import BuildRecord, mb_to_mib, parse_time
from buildmem.ensemble import EnsembleModel
from buildmem.errors import ConsistencyError
from buildmem.features import encode_job

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 1 << 20


class RequestError(Exception):
    def __init__(self, status, message, field=None):
        super().__init__(message)
        self.status = status
        self.field = field

    def body(self) -> dict:
        out = {"error": str(self)}
        if self.field is not None:
            out["field"] = self.field
        return out


def _number(obj, name, where):
    v = obj.get(name)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise RequestError(400, f"{where}.{name} must be a finite number", f"{where}.{name}")
    return float(v)


def _string(obj, name, where):
    v = obj.get(name)
    if not isinstance(v, str):
        raise RequestError(400, f"{where}.{name} must be a string", f"{where}.{name}")
    return v


class Predictor:
    """Turns request payloads into allocations; holds no per-request state."""

    def __init__(self, model: EnsembleModel):
        self.model = model
        self.model_id = model.model_id
        self.started = time.monotonic()
        self._lock = threading.Lock()
        self.n_requests = 0
        self.n_errors = 0

    def count(self, ok: bool) -> None:
        with self._lock:
            self.n_requests += 1
            if not ok:
                self.n_errors += 1

    def feature_row(self, features) -> np.ndarray:
        if not isinstance(features, dict):
            raise RequestError(400, "features must be an object", "features")
        names = self.model.column_names
        missing = [n for n in names if n not in features]
        unknown = sorted(set(features) - set(names))
        if missing or unknown:
            raise RequestError(
                422, f"feature names do not match the model schema "
                     f"(missing {missing[:5]}, unknown {unknown[:5]})", "features")
        return np.array([_number(features, n, "features") for n in names])

    def job_row(self, job) -> np.ndarray:
        if not isinstance(job, dict):
            raise RequestError(400, "job must be an object", "job")
        state = self.model.encoder_state
        if state is None:
            raise RequestError(422, "model carries no encoder state; send features", "job")
        if "time" not in job:
            raise RequestError(400, "job.time is required", "job.time")
        try:
            t = parse_time(job["time"])
        except (TypeError, ValueError) as exc:
            raise RequestError(400, f"job.time: {exc}", "job.time") from exc
        jobs = job.get("jobs")
        if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 0:
            raise RequestError(400, "job.jobs must be a non-negative integer", "job.jobs")
        memreq = _number(job, "memreq_mb", "job")
        if memreq <= 0:
            raise RequestError(400, "job.memreq_mb must be positive", "job.memreq_mb")
        history = job.get("history_max_rss_mib", [])
        if not isinstance(history, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
                for v in history):
            raise RequestError(400, "job.history_max_rss_mib must be a list of positive numbers",
                               "job.history_max_rss_mib")
        record = BuildRecord(
            time=t,
            build_profile=_string(job, "build_profile", "job"),
            make_type=_string(job, "make_type", "job"),
            jobs=jobs,
            branch_id=_string(job, "branch_id", "job"),
            memory_fail_count=0,
            max_rss=1.0,  # unknown at submission time; not a model input
            memreq=mb_to_mib(memreq),
        )
        return encode_job(record, history, state, self.model.feature_schema)

    def handle(self, payload) -> dict:
        if not isinstance(payload, dict):
            raise RequestError(400, "request body must be a JSON object")
        shapes = [k for k in ("features", "job") if k in payload]
        if len(shapes) != 1:
            raise RequestError(400, "request must contain exactly one of 'features' or 'job'")
        row = (self.feature_row(payload["features"]) if shapes[0] == "features"
               else self.job_row(payload["job"]))
        start = time.perf_counter()
        allocation = float(self.model.predict(row))
        latency = time.perf_counter() - start
        return {
            "allocation_mib": allocation,
            "alpha": self.model.alpha,
            "safety_factor": self.model.safety_factor,
            "model_id": self.model_id,
            "latency_seconds": latency,
        }

    def health(self) -> dict:
        return {
            "status": "ok",
            "model_id": self.model_id,
            "uptime_seconds": time.monotonic() - self.started,
            "requests": self.n_requests,
        }


def make_handler(predictor: Predictor):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status, body):
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, predictor.health())
            else:
                self._send(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            if self.path != "/predict":
                self._send(404, {"error": f"no route {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                if length > MAX_BODY_BYTES:
                    raise RequestError(413, "request body too large")
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw)
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise RequestError(400, f"malformed JSON: {exc}") from exc
                body = predictor.handle(payload)
            except RequestError as exc:
                predictor.count(False)
                self._send(exc.status, exc.body())
                return
            except ConsistencyError as exc:
                predictor.count(False)
                self._send(422, {"error": str(exc)})
                return
            except Exception:
                logger.exception("prediction failed")
                predictor.count(False)
                self._send(500, {"error": "internal error"})
                return
            predictor.count(True)
            self._send(200, body)

        def log_message(self, fmt, *args):
            logger.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(model: EnsembleModel, host: str = "127.0.0.1", port: int = 8080):
    server = ThreadingHTTPServer((host, port), make_handler(Predictor(model)))
    server.daemon_threads = True
    return server


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"bind address must look like host:port, got {bind!r}")
    return host or "127.0.0.1", int(port)


def serve(model: EnsembleModel, bind: str = "127.0.0.1:8080") -> None:
    host, port = parse_bind(bind)
    server = make_server(model, host, port)
    logger.info("serving model %s on %s:%d", model.model_id, host, port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
