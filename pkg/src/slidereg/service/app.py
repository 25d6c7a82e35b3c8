"""HTTP face of the tile service: deep-zoom style tiles plus offset fixing.

All image math lives in ``slidereg.tileservice``; this module only maps
routes, validation, and status codes onto it.
"""

from __future__ import annotations

import io
from typing import Literal

from fastapi import FastAPI, Response
from PIL import Image
from pydantic import BaseModel, Field

from ..imagery import Rect
from ..tileservice import (
    NoSessionOffsetError,
    PairNotFoundError,
    PairStore,
    TILE_SIZE,
    TileNotFoundError,
    TileServiceError,
    fix_offset,
    mov_tile,
    ref_tile,
    save_offset,
)


class PyramidInfo(BaseModel):
    width: int
    height: int
    levels: int


class PairDescriptor(BaseModel):
    pair_id: str
    status: str
    tile_size: int | None = None
    ref: PyramidInfo | None = None
    mov: PyramidInfo | None = None
    error: str | None = None


class ViewportRect(BaseModel):
    x: int
    y: int
    w: int = Field(gt=0)
    h: int = Field(gt=0)


class FixOffsetRequest(BaseModel):
    level: int | None = None
    viewport_rect: ViewportRect | None = None


class OffsetResponse(BaseModel):
    dx: float
    dy: float
    peak: float
    scope: str
    level: int
    degenerate: bool


class SaveOffsetResponse(BaseModel):
    saved: bool
    path: str


def _png_bytes(tile) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(tile).save(buf, format="PNG")
    return buf.getvalue()


def create_app(pairs_dir, tile_size: int = TILE_SIZE) -> FastAPI:
    store = PairStore(pairs_dir, tile_size)
    app = FastAPI(title="slidereg tile service")
    app.state.store = store

    @app.exception_handler(PairNotFoundError)
    @app.exception_handler(TileNotFoundError)
    async def _not_found(request, exc):
        return Response(status_code=404, content=str(exc))

    @app.exception_handler(NoSessionOffsetError)
    async def _conflict(request, exc):
        return Response(status_code=409, content=str(exc))

    @app.exception_handler(TileServiceError)
    async def _unprocessable(request, exc):
        return Response(status_code=422, content=str(exc))

    @app.get("/pairs", response_model=list[PairDescriptor])
    def list_pairs():
        return store.list_pairs()

    @app.get("/pairs/{pair_id}/{side}/tile/{level}/{x}/{y}")
    def tile(pair_id: str, side: str, level: int, x: int, y: int,
             interp: Literal["nearest", "bilinear"] = "bilinear"):
        if side == "ref":
            data = ref_tile(store, pair_id, level, x, y)
        elif side == "mov":
            data = mov_tile(store, pair_id, level, x, y, interp)
        else:
            raise PairNotFoundError(f"unknown side {side!r}; expected ref or mov")
        return Response(content=_png_bytes(data), media_type="image/png")

    @app.post("/pairs/{pair_id}/fix-offset", response_model=OffsetResponse)
    def fix(pair_id: str, body: FixOffsetRequest):
        viewport = None
        if body.viewport_rect is not None:
            r = body.viewport_rect
            viewport = Rect(r.x, r.y, r.w, r.h)
        off = fix_offset(store, pair_id, body.level, viewport)
        return OffsetResponse(dx=off.dx, dy=off.dy, peak=off.peak, scope=off.scope,
                              level=off.level, degenerate=off.degenerate)

    @app.post("/pairs/{pair_id}/save-offset", response_model=SaveOffsetResponse)
    def save(pair_id: str):
        path = save_offset(store, pair_id)
        return SaveOffsetResponse(saved=True, path=str(path))

    return app
