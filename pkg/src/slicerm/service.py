"""HTTP control plane over an :class:`EngineLoop`.

The HTTP layer keeps no state of its own: every handler is one call through
the loop's command channel, so each response reflects a single consistent
engine snapshot.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .engine import DuplicateJob, InfeasibleJob, SliceActive, UnknownJob
from .loop import SIM, EngineLoop
from .model import ParseError, ValidationError, cluster_to_doc, parse_job_spec, to_ms


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status, self.code, self.message, self.detail = status, code, message, detail


def _error_status(exc: Exception) -> ApiError:
    if isinstance(exc, UnknownJob):
        return ApiError(404, "not_found", f"unknown job {exc.args[0]!r}")
    if isinstance(exc, InfeasibleJob):
        return ApiError(422, "infeasible", str(exc), {"constraint": str(exc)})
    if isinstance(exc, (DuplicateJob, SliceActive)):
        return ApiError(409, "conflict", str(exc))
    if isinstance(exc, (ParseError, ValidationError)):
        return ApiError(400, "bad_request", str(exc))
    raise exc


def create_app(loop: EngineLoop) -> FastAPI:
    app = FastAPI(title="slicerm", version="0.1.0")
    app.state.loop = loop

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse({"code": exc.code, "message": exc.message, "detail": exc.detail},
                            status_code=exc.status)

    def call(fn):
        try:
            return loop.call(fn)
        except ApiError:
            raise
        except Exception as e:
            raise _error_status(e) from e

    @app.post("/v1/jobs", status_code=201)
    async def submit(request: Request):
        body = await request.body()
        try:
            job = parse_job_spec(body)
        except (ParseError, ValidationError) as e:
            raise ApiError(400, "bad_request", "malformed job document", str(e)) from e

        def do(eng):
            jid = eng.submit(job)
            return eng.status(jid)

        st = await run_in_threadpool(call, do)
        return {"job_id": st["job_id"], "status": st}

    @app.get("/v1/jobs/{job_id}")
    def status(job_id: str):
        return call(lambda eng: eng.status(job_id))

    @app.get("/v1/jobs/{job_id}/timeline")
    def timeline(job_id: str):
        def do(eng):
            t = eng.timeline_of(job_id)
            return {"job_id": job_id, "phase": eng.slices[job_id].phase.value, "intervals": t.to_doc()}
        return call(do)

    @app.delete("/v1/jobs/{job_id}", status_code=202)
    def cancel(job_id: str):
        def do(eng):
            accepted = eng.cancel(job_id)
            return {"job_id": job_id, "accepted": accepted, "status": eng.status(job_id)}
        return call(do)

    @app.get("/v1/cluster")
    def cluster():
        def do(eng):
            view = eng.cluster_view()
            view["inventory"] = cluster_to_doc(eng.cluster)
            view["mode"] = loop.mode
            return view
        return call(do)

    @app.get("/v1/events")
    def events(since: int = 0, limit: int = 500):
        if since < 0 or limit < 1:
            raise ApiError(400, "bad_request", "since must be >= 0 and limit >= 1")

        def do(eng):
            page = eng.events[since:since + limit]
            return {"events": [dict(seq=e.seq, **e.to_doc()) for e in page],
                    "next": since + len(page), "total": len(eng.events)}
        return call(do)

    @app.get("/v1/clock")
    def clock():
        return call(lambda eng: {"clock_s": eng.clock_ms / 1000, "mode": loop.mode, "idle": eng.idle})

    @app.post("/v1/clock/advance")
    async def advance(request: Request):
        if loop.mode != SIM:
            raise ApiError(409, "wrong_mode", "clock advance is only available in simulated mode")
        try:
            body = await request.json()
            seconds = body["seconds"]
        except Exception as e:
            raise ApiError(400, "bad_request", "body must be {\"seconds\": <number>}", str(e)) from e
        if isinstance(seconds, bool) or not isinstance(seconds, (int, float)) or seconds < 0:
            raise ApiError(400, "bad_request", "seconds must be a nonnegative number")

        def do(eng):
            eng.advance(eng.clock_ms + to_ms(seconds))
            return {"clock_s": eng.clock_ms / 1000, "idle": eng.idle}
        return await run_in_threadpool(call, do)

    return app
