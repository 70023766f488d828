"""Errors that cross the wire carry a stable string code."""
from __future__ import annotations


class MeshError(Exception):
    """Base error; ``code`` is what travels in ERROR frames and HTTP bodies."""

    code = "ERROR"

    def __init__(self, message: str = "", code: str | None = None):
        super().__init__(message or (code or self.__class__.code))
        if code is not None:
            self.code = code

    def payload(self) -> dict:
        return {"code": self.code, "message": str(self)}


class NotFound(MeshError):
    code = "NOT_FOUND"


class AccessDenied(MeshError):
    code = "ACCESS_DENIED"


class Busy(MeshError):
    code = "BUSY"
