"""FastAPI service wrapping the core package (``uvicorn tled.service:app``)."""

from .app import app

__all__ = ["app"]
