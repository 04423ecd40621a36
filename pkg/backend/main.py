import logging
import os
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware

from harness.checkpoints import discover_models
from routes import captioning, counting

logger = logging.getLogger(__name__)

MODEL_DIR_ENV = "LAT_MODEL_DIR"


def create_app(model_dir: Optional[Union[str, Path]] = None) -> FastAPI:
    """
    Application factory for the frozen-model API.

    Models are read once from `model_dir` (or $LAT_MODEL_DIR): the directory
    itself and each direct subdirectory holding a `train` output. Without a
    directory the model endpoints answer 503.
    """
    app = FastAPI(
        title="Linguistically-aware Attention API",
        version="0.1.0",
        description="Counting and captioning with trained linguistically-aware attention models.",
        docs_url="/docs",
        redoc_url="/redoc",
        openapi_url="/openapi.json",
    )

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    directory = model_dir if model_dir is not None else os.environ.get(MODEL_DIR_ENV)
    app.state.models = discover_models(directory) if directory else None
    if app.state.models is None:
        logger.warning("no model directory configured; model endpoints will answer 503")

    # Health / meta endpoints
    @app.get("/", tags=["meta"])
    async def root():
        return {
            "name": app.title,
            "version": app.version,
            "status": "ok",
            "docs_url": app.docs_url,
            "openapi_url": app.openapi_url,
        }

    @app.get("/health", tags=["meta"])
    async def health():
        return {"status": "healthy"}

    @app.get("/api/models", tags=["meta"])
    async def models(request: Request):
        store = request.app.state.models
        if store is None:
            return {"model_dir": None, "models": []}
        return {
            "model_dir": str(directory),
            "models": [
                {
                    "kind": kind.value,
                    "directory": str(loaded.directory),
                    "fingerprint": loaded.fingerprint,
                    "parameters": loaded.model.num_parameters(),
                }
                for kind, loaded in store.models.items()
            ],
        }

    app.include_router(
        counting.router,
        prefix="/api/counting",
        tags=["counting"],
    )
    app.include_router(
        captioning.router,
        prefix="/api/captioning",
        tags=["captioning"],
    )

    return app


app = create_app()


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=True,
    )
