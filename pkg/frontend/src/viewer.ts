/**
 * viewer.ts - State machine behind the split-screen registration viewer.
 *
 * One viewport drives both panes: the reference image on the left and the
 * server-warped moving image on the right, so every interaction keeps the
 * two views locked onto the same reference-frame rectangle. The client
 * does no image math beyond compositing — tiles arrive pre-warped from
 * the service.
 */

import {
  FixOffsetRequest,
  Interp,
  OffsetResponse,
  PairDescriptor,
  PaneSide,
  SaveOffsetResponse,
  TileServiceClient,
  ViewportRectBody,
} from './protocol';
import {
  ImagePoint,
  PaneSize,
  ScreenPoint,
  TilePlacement,
  ViewRect,
  Viewport,
  fitViewport,
  imageFromScreen,
  levelForZoom,
  panBy,
  screenFromImage,
  tilePlan,
  visibleRect,
  zoomAt,
} from './viewport';

export type OverlayMode = 'split' | 'overlay';

export interface PaneTile extends TilePlacement {
  url: string;
}

export interface CursorDot {
  pane: PaneSide;
  color: string;
  image: ImagePoint;
  screen: ScreenPoint;
}

export interface OffsetStatus {
  state: 'idle' | 'fixing' | 'fixed' | 'degenerate' | 'saved';
  dx?: number;
  dy?: number;
  peak?: number;
  message: string;
}

/** Dot colors: one distinct color per pane, as in split-screen reviewers. */
export const CURSOR_COLORS: Record<PaneSide, string> = {
  ref: '#18b66b',
  mov: '#a44fd0',
};

const DEFAULT_TILE_SIZE = 256;

export class ViewerState {
  pair: PairDescriptor | null = null;
  viewport: Viewport = { centerX: 0, centerY: 0, zoom: 1 };
  cursor: ImagePoint | null = null;
  overlayMode: OverlayMode = 'split';
  offsetStatus: OffsetStatus = { state: 'idle', message: '' };
  interp: Interp = 'bilinear';
  /** Cache-busting token appended to moving-pane tile URLs after a fix. */
  movVersion = 0;

  private tileSize = DEFAULT_TILE_SIZE;

  constructor(
    private client: TileServiceClient,
    public pane: PaneSize,
  ) {}

  /** Load a pair from GET /pairs and reset the viewport to fit it. */
  async loadPair(pairId: string): Promise<PairDescriptor> {
    const pairs = await this.client.listPairs();
    const pair = pairs.find((p) => p.pair_id === pairId);
    if (!pair) throw new Error(`unknown pair: ${pairId}`);
    if (pair.status !== 'ok' || !pair.ref) {
      throw new Error(`pair ${pairId} not servable: ${pair.error ?? pair.status}`);
    }
    this.pair = pair;
    this.tileSize = pair.tile_size ?? DEFAULT_TILE_SIZE;
    this.viewport = fitViewport(pair.ref.width, pair.ref.height, this.pane);
    this.cursor = null;
    this.movVersion = 0;
    this.offsetStatus = { state: 'idle', message: '' };
    return pair;
  }

  /** The viewport rectangle both panes display, in reference coords. */
  viewportRect(): ViewRect {
    return visibleRect(this.viewport, this.pane);
  }

  pan(dxScreen: number, dyScreen: number): void {
    this.viewport = panBy(this.viewport, dxScreen, dyScreen);
  }

  zoom(anchor: ScreenPoint, factor: number): void {
    this.viewport = zoomAt(this.viewport, this.pane, anchor, factor);
  }

  /** Tile layout plus URLs for one pane. */
  panePlan(side: PaneSide): PaneTile[] {
    if (!this.pair?.ref) return [];
    const version = side === 'mov' ? this.movVersion : 0;
    return tilePlan(this.viewport, this.pane, this.pair.ref, this.tileSize).map((t) => ({
      ...t,
      url: this.client.tileUrl(this.pair!.pair_id, side, t.level, t.x, t.y, this.interp, version),
    }));
  }

  /**
   * Render description for both panes from the one shared viewport; any
   * pan or zoom on either pane flows through here, so the panes cannot
   * drift apart.
   */
  syncViewports(): { ref: PaneTile[]; mov: PaneTile[] } {
    return { ref: this.panePlan('ref'), mov: this.panePlan('mov') };
  }

  /** Track the mouse inside a pane; positions outside the pane hide the dot. */
  moveCursor(screen: ScreenPoint): void {
    const inside =
      screen.x >= 0 && screen.y >= 0 && screen.x < this.pane.width && screen.y < this.pane.height;
    this.cursor = inside ? imageFromScreen(this.viewport, this.pane, screen) : null;
  }

  leaveCursor(): void {
    this.cursor = null;
  }

  /** Dots for both panes at the cursor's image coordinate; empty when hidden. */
  cursorDots(): CursorDot[] {
    const image = this.cursor;
    if (!image) return [];
    return (['ref', 'mov'] as const).map((pane) => ({
      pane,
      color: CURSOR_COLORS[pane],
      image: { ...image },
      screen: screenFromImage(this.viewport, this.pane, image),
    }));
  }

  /** Current viewport as an integer rect in level-pixel coordinates. */
  fixRequest(): FixOffsetRequest {
    if (!this.pair?.ref) throw new Error('no pair loaded');
    const level = levelForZoom(this.viewport.zoom, this.pair.ref.levels);
    const scale = 2 ** level;
    const levelW = Math.ceil(this.pair.ref.width / scale);
    const levelH = Math.ceil(this.pair.ref.height / scale);
    const rect = this.viewportRect();
    const x = Math.min(Math.max(Math.floor(rect.x / scale), 0), levelW - 1);
    const y = Math.min(Math.max(Math.floor(rect.y / scale), 0), levelH - 1);
    const viewport: ViewportRectBody = {
      x,
      y,
      w: Math.max(Math.min(Math.ceil((rect.x + rect.w) / scale), levelW) - x, 1),
      h: Math.max(Math.min(Math.ceil((rect.y + rect.h) / scale), levelH) - y, 1),
    };
    return { level, viewport_rect: viewport };
  }

  /**
   * Fix Offset button: ask the server to measure the residual shift over
   * the current viewport, then cache-bust the moving pane so its tiles
   * refetch with the corrected session offset. A degenerate or zero
   * measurement leaves the tiles alone.
   */
  async fixOffset(): Promise<OffsetResponse> {
    if (!this.pair) throw new Error('no pair loaded');
    this.offsetStatus = { state: 'fixing', message: 'measuring offset…' };
    const res = await this.client.fixOffset(this.pair.pair_id, this.fixRequest());
    if (res.degenerate) {
      this.offsetStatus = {
        state: 'degenerate',
        message: 'no measurable offset in this view',
      };
    } else {
      if (res.dx !== 0 || res.dy !== 0) this.movVersion += 1;
      this.offsetStatus = {
        state: 'fixed',
        dx: res.dx,
        dy: res.dy,
        peak: res.peak,
        message: `offset ${res.dx.toFixed(1)}, ${res.dy.toFixed(1)} px (peak ${res.peak.toFixed(3)})`,
      };
    }
    return res;
  }

  /**
   * Persist the accumulated session offset into the pair's transform
   * file. Tile content is unchanged by saving (the server folds the same
   * correction into the stored transform), so no refetch is needed.
   */
  async saveOffset(): Promise<SaveOffsetResponse> {
    if (!this.pair) throw new Error('no pair loaded');
    const res = await this.client.saveOffset(this.pair.pair_id);
    this.offsetStatus = { state: 'saved', message: `saved to ${res.path}` };
    return res;
  }
}
