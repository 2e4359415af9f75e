"""Black-box classification service.

The competition-style contract: ``POST /predict`` takes raw PE bytes as
``application/octet-stream`` and answers ``{"result": 0|1}`` within a hard
deadline, and nothing else -- scores, sources, and timings never leave the
process on this endpoint.  A request that cannot finish in time is answered
fail-closed (result 1): in this threat model a slow-to-classify input is
more likely adversarial than benign.

``GET /stats`` is out-of-band observability and is disabled unless
explicitly enabled; when an API token is configured both endpoints require
it.
"""

from __future__ import annotations

import asyncio
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from starlette.concurrency import run_in_threadpool

from .pipeline import Pipeline

MAX_BODY_BYTES = 2 * 1024 * 1024
HARD_DEADLINE_SECONDS = 5.0
_DEADLINE_MARGIN = 0.4
_LATENCY_RESERVOIR = 20_000


class PredictResponse(BaseModel):
    result: int = Field(ge=0, le=1)


class StatsResponse(BaseModel):
    queries: int
    malware_verdicts: int
    stateful_hits: int
    deadline_hits: int
    sources: Dict[str, int]
    latency_ms_p50: float
    latency_ms_p99: float


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_body_bytes: int = MAX_BODY_BYTES
    deadline_seconds: float = HARD_DEADLINE_SECONDS
    api_token: Optional[str] = None
    stats_enabled: bool = False

    def __post_init__(self):
        if self.deadline_seconds <= 0:
            raise ValueError("deadline must be positive")
        if self.max_body_bytes < 1024:
            raise ValueError("max body size must be at least 1 KiB")


@dataclass
class ServiceCounters:
    queries: int = 0
    malware_verdicts: int = 0
    stateful_hits: int = 0
    deadline_hits: int = 0
    sources: Dict[str, int] = field(default_factory=dict)
    _latencies: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def record(self, result: int, latency_s: float, sources=(),
               deadline_hit: bool = False) -> None:
        with self._lock:
            self.queries += 1
            self.malware_verdicts += result
            self.deadline_hits += deadline_hit
            for source in sources:
                self.sources[source] = self.sources.get(source, 0) + 1
                if source == "stateful":
                    self.stateful_hits += 1
            if len(self._latencies) < _LATENCY_RESERVOIR:
                self._latencies.append(latency_s)

    def snapshot(self) -> StatsResponse:
        with self._lock:
            lat = np.asarray(self._latencies) if self._latencies else np.zeros(1)
            return StatsResponse(
                queries=self.queries,
                malware_verdicts=self.malware_verdicts,
                stateful_hits=self.stateful_hits,
                deadline_hits=self.deadline_hits,
                sources=dict(self.sources),
                latency_ms_p50=float(np.percentile(lat, 50) * 1000),
                latency_ms_p99=float(np.percentile(lat, 99) * 1000),
            )


def _authorized(request: Request, token: Optional[str]) -> bool:
    if token is None:
        return True
    header = request.headers.get("authorization", "")
    return header == f"Bearer {token}"


def create_app(pipeline: Pipeline,
               config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="pedefense", docs_url=None, redoc_url=None,
                  openapi_url=None)
    counters = ServiceCounters()
    app.state.pipeline = pipeline
    app.state.config = config
    app.state.counters = counters

    @app.post("/predict", response_model=PredictResponse)
    async def predict(request: Request) -> Response:
        if not _authorized(request, config.api_token):
            return JSONResponse({"detail": "unauthorized"}, status_code=401)
        declared = request.headers.get("content-length")
        if declared is not None and declared.isdigit() \
                and int(declared) > config.max_body_bytes:
            return JSONResponse({"detail": "body too large"}, status_code=413)
        body = await request.body()
        if len(body) > config.max_body_bytes:
            return JSONResponse({"detail": "body too large"}, status_code=413)
        if not body:
            return JSONResponse({"detail": "empty body"}, status_code=400)

        start = time.perf_counter()
        timeout = max(config.deadline_seconds - _DEADLINE_MARGIN, 0.05)
        deadline_hit = False
        try:
            verdict = await asyncio.wait_for(
                run_in_threadpool(pipeline.classify, body), timeout=timeout)
            result = verdict.result
            sources = verdict.sources
        except asyncio.TimeoutError:
            # fail closed: unanswerable within the deadline means malware
            result = 1
            sources = ("deadline",)
            deadline_hit = True
        counters.record(result, time.perf_counter() - start, sources,
                        deadline_hit)
        return JSONResponse({"result": result})

    @app.get("/stats", response_model=StatsResponse)
    async def stats(request: Request) -> Response:
        if not config.stats_enabled:
            return JSONResponse({"detail": "not found"}, status_code=404)
        if not _authorized(request, config.api_token):
            return JSONResponse({"detail": "unauthorized"}, status_code=401)
        return JSONResponse(counters.snapshot().model_dump())

    return app
