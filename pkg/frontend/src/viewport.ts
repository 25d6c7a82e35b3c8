/**
 * viewport.ts - Shared-viewport math for the dual-pane viewer.
 *
 * All positions live in reference-image level-0 pixel coordinates ("image
 * coords"); both panes render from one viewport in that frame, which is
 * what keeps them interlinked. `zoom` is screen pixels per level-0 image
 * pixel, so zoom 1 shows the full-resolution image 1:1.
 */

export interface ImagePoint {
  x: number;
  y: number;
}

export interface ScreenPoint {
  x: number;
  y: number;
}

export interface ViewRect {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface Viewport {
  centerX: number;
  centerY: number;
  zoom: number;
}

export interface PaneSize {
  width: number;
  height: number;
}

export const MIN_ZOOM = 1 / 1024;
export const MAX_ZOOM = 16;

export function clampZoom(zoom: number): number {
  return Math.min(Math.max(zoom, MIN_ZOOM), MAX_ZOOM);
}

/** Viewport that fits the whole image inside the pane, centered. */
export function fitViewport(imageW: number, imageH: number, pane: PaneSize): Viewport {
  const zoom = clampZoom(Math.min(pane.width / imageW, pane.height / imageH));
  return { centerX: imageW / 2, centerY: imageH / 2, zoom };
}

/** Image-coordinate rectangle the pane currently displays. */
export function visibleRect(vp: Viewport, pane: PaneSize): ViewRect {
  const w = pane.width / vp.zoom;
  const h = pane.height / vp.zoom;
  return { x: vp.centerX - w / 2, y: vp.centerY - h / 2, w, h };
}

/** Drag by a screen-pixel delta: the content follows the pointer. */
export function panBy(vp: Viewport, dxScreen: number, dyScreen: number): Viewport {
  return {
    centerX: vp.centerX - dxScreen / vp.zoom,
    centerY: vp.centerY - dyScreen / vp.zoom,
    zoom: vp.zoom,
  };
}

export function imageFromScreen(vp: Viewport, pane: PaneSize, p: ScreenPoint): ImagePoint {
  return {
    x: vp.centerX + (p.x - pane.width / 2) / vp.zoom,
    y: vp.centerY + (p.y - pane.height / 2) / vp.zoom,
  };
}

export function screenFromImage(vp: Viewport, pane: PaneSize, p: ImagePoint): ScreenPoint {
  return {
    x: (p.x - vp.centerX) * vp.zoom + pane.width / 2,
    y: (p.y - vp.centerY) * vp.zoom + pane.height / 2,
  };
}

/** Zoom by `factor`, keeping the image point under `anchor` fixed on screen. */
export function zoomAt(vp: Viewport, pane: PaneSize, anchor: ScreenPoint, factor: number): Viewport {
  const pivot = imageFromScreen(vp, pane, anchor);
  const zoom = clampZoom(vp.zoom * factor);
  return {
    centerX: pivot.x - (anchor.x - pane.width / 2) / zoom,
    centerY: pivot.y - (anchor.y - pane.height / 2) / zoom,
    zoom,
  };
}

/**
 * Pyramid level to render at the given zoom: the sharpest level whose
 * pixels are not stretched past 1:1 on screen (standard deep-zoom rule).
 */
export function levelForZoom(zoom: number, levels: number): number {
  const raw = Math.floor(Math.log2(1 / zoom));
  return Math.min(Math.max(raw, 0), levels - 1);
}

export interface TilePlacement {
  level: number;
  x: number;
  y: number;
  /** Pane position of the tile's top-left corner, in CSS pixels. */
  screenX: number;
  screenY: number;
  /** Drawn size of the (square) tile on screen. */
  screenSize: number;
}

export interface ImageGeometry {
  width: number;
  height: number;
  levels: number;
}

/**
 * Tiles needed to cover the viewport on one pane, with their screen
 * placement. Indices are clamped to the tile grid of the reference canvas
 * at the chosen level; both panes are addressed in the reference frame,
 * so the same plan drives both tile streams.
 */
export function tilePlan(
  vp: Viewport,
  pane: PaneSize,
  image: ImageGeometry,
  tileSize: number,
): TilePlacement[] {
  const level = levelForZoom(vp.zoom, image.levels);
  const scale = 2 ** level; // level px -> level-0 px
  const tilesX = Math.ceil(Math.ceil(image.width / scale) / tileSize);
  const tilesY = Math.ceil(Math.ceil(image.height / scale) / tileSize);
  const span = tileSize * scale; // level-0 px covered by one tile
  const rect = visibleRect(vp, pane);
  const x0 = Math.max(Math.floor(rect.x / span), 0);
  const y0 = Math.max(Math.floor(rect.y / span), 0);
  const x1 = Math.min(Math.ceil((rect.x + rect.w) / span), tilesX);
  const y1 = Math.min(Math.ceil((rect.y + rect.h) / span), tilesY);

  const plan: TilePlacement[] = [];
  for (let ty = y0; ty < y1; ty++) {
    for (let tx = x0; tx < x1; tx++) {
      const corner = screenFromImage(vp, pane, { x: tx * span, y: ty * span });
      plan.push({
        level,
        x: tx,
        y: ty,
        screenX: corner.x,
        screenY: corner.y,
        screenSize: span * vp.zoom,
      });
    }
  }
  return plan;
}
