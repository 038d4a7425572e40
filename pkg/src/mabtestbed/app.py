"""HTTP API over :class:`ExperimentService`."""

from __future__ import annotations

from contextlib import asynccontextmanager
from typing import Any

from fastapi import Body, FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from .config import ServiceConfig
from .service import ExperimentService, RefreshScheduler, ServiceError, ValidationError

_RESERVED_QUERY = {"user", "decision_point"}


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"context value {text!r} is not a number") from None


def create_app(config: ServiceConfig, service: ExperimentService | None = None) -> FastAPI:
    """Build the app.  The service is opened here unless one is passed in;
    the refresh scheduler runs for the lifetime of the app and shutdown
    writes a final snapshot."""
    svc = service or ExperimentService(config.data_dir, config.seed, config.snapshot_every)
    scheduler = RefreshScheduler(svc, config.refresh_interval_seconds)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        scheduler.start()
        try:
            yield
        finally:
            scheduler.stop()
            svc.close()

    app = FastAPI(title="mabtestbed personalization service", lifespan=lifespan)
    app.state.service = svc

    @app.exception_handler(ServiceError)
    async def _service_error(request: Request, exc: ServiceError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=exc.status)

    @app.post("/experiments", status_code=201)
    def create(config: dict[str, Any] = Body(...)):
        exp_id = svc.create_experiment(config)
        exp = svc.experiment(exp_id)
        return {
            "experiment_id": exp_id,
            "d": {dp: s.d for dp, s in exp.posteriors.items()},
        }

    @app.get("/experiments/{experiment_id}/assignment")
    def assign_get(experiment_id: str, request: Request):
        q = request.query_params
        ctx = {k: _number(x) for k, x in q.items() if k not in _RESERVED_QUERY}
        return svc.get_assignment(experiment_id, q.get("user", ""), ctx, q.get("decision_point"))

    @app.post("/experiments/{experiment_id}/assignment")
    def assign_post(experiment_id: str, body: dict[str, Any] = Body(...)):
        ctx = body.get("context") or {}
        if not isinstance(ctx, dict):
            raise ValidationError("context must be an object")
        return svc.get_assignment(
            experiment_id, str(body.get("user") or ""), ctx, body.get("decision_point")
        )

    @app.post("/experiments/{experiment_id}/rewards")
    def reward(experiment_id: str, body: dict[str, Any] = Body(...)):
        if "assignment_id" not in body:
            raise ValidationError("assignment_id is required")
        return svc.record_reward(
            experiment_id,
            str(body["assignment_id"]),
            body.get("value"),
            rating=body.get("rating"),
            reward=body.get("reward"),
        )

    @app.post("/experiments/{experiment_id}/context")
    def context(experiment_id: str, body: dict[str, Any] = Body(...)):
        variables = body.get("variables")
        if not isinstance(variables, dict):
            raise ValidationError("variables must be an object")
        return svc.update_context(experiment_id, str(body.get("user") or ""), variables)

    @app.post("/experiments/{experiment_id}/refresh")
    def refresh(experiment_id: str):
        return svc.refresh_posteriors(experiment_id)

    @app.get("/experiments/{experiment_id}/summary")
    def summary(experiment_id: str):
        return svc.experiment_summary(experiment_id)

    @app.get("/experiments/{experiment_id}/log")
    def export(experiment_id: str):
        return PlainTextResponse(svc.export_csv(experiment_id), media_type="text/csv")

    @app.get("/health")
    def health():
        return {"status": "ok", "experiments": len(svc.experiments)}

    return app
