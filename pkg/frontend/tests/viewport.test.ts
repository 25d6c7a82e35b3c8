/**
 * Viewport math: coordinate mapping, pan/zoom, level choice, tile cover.
 */

import { describe, expect, it } from 'vitest';
import {
  MAX_ZOOM,
  MIN_ZOOM,
  PaneSize,
  Viewport,
  fitViewport,
  imageFromScreen,
  levelForZoom,
  panBy,
  screenFromImage,
  tilePlan,
  visibleRect,
  zoomAt,
} from '../src/viewport';

const PANE: PaneSize = { width: 512, height: 384 };

describe('fitViewport', () => {
  it('centers the image and fits the long side', () => {
    const vp = fitViewport(1200, 800, { width: 300, height: 300 });
    expect(vp.centerX).toBe(600);
    expect(vp.centerY).toBe(400);
    expect(vp.zoom).toBeCloseTo(300 / 1200, 12);
  });

  it('never exceeds the zoom bounds', () => {
    expect(fitViewport(4, 4, { width: 4000, height: 4000 }).zoom).toBe(MAX_ZOOM);
    expect(fitViewport(10_000_000, 10_000_000, { width: 100, height: 100 }).zoom).toBe(MIN_ZOOM);
  });
});

describe('coordinate mapping', () => {
  const vp: Viewport = { centerX: 410, centerY: 275, zoom: 1.7 };

  it('round-trips screen -> image -> screen', () => {
    for (const p of [{ x: 0, y: 0 }, { x: 256, y: 192 }, { x: 511, y: 10 }]) {
      const back = screenFromImage(vp, PANE, imageFromScreen(vp, PANE, p));
      expect(back.x).toBeCloseTo(p.x, 9);
      expect(back.y).toBeCloseTo(p.y, 9);
    }
  });

  it('maps the pane center to the viewport center', () => {
    const c = imageFromScreen(vp, PANE, { x: PANE.width / 2, y: PANE.height / 2 });
    expect(c.x).toBeCloseTo(vp.centerX, 12);
    expect(c.y).toBeCloseTo(vp.centerY, 12);
  });

  it('visibleRect spans pane size over zoom, centered', () => {
    const rect = visibleRect(vp, PANE);
    expect(rect.w).toBeCloseTo(PANE.width / vp.zoom, 12);
    expect(rect.h).toBeCloseTo(PANE.height / vp.zoom, 12);
    expect(rect.x + rect.w / 2).toBeCloseTo(vp.centerX, 12);
    expect(rect.y + rect.h / 2).toBeCloseTo(vp.centerY, 12);
  });
});

describe('panBy', () => {
  it('moves content with the pointer (center moves opposite)', () => {
    const vp = panBy({ centerX: 100, centerY: 100, zoom: 2 }, 50, -30);
    expect(vp.centerX).toBe(100 - 25);
    expect(vp.centerY).toBe(100 + 15);
    expect(vp.zoom).toBe(2);
  });
});

describe('zoomAt', () => {
  it('keeps the image point under the anchor fixed', () => {
    const vp: Viewport = { centerX: 320, centerY: 200, zoom: 0.8 };
    const anchor = { x: 100, y: 300 };
    const before = imageFromScreen(vp, PANE, anchor);
    const zoomed = zoomAt(vp, PANE, anchor, 2.0);
    const after = imageFromScreen(zoomed, PANE, anchor);
    expect(zoomed.zoom).toBeCloseTo(1.6, 12);
    expect(after.x).toBeCloseTo(before.x, 9);
    expect(after.y).toBeCloseTo(before.y, 9);
  });

  it('clamps at the zoom bounds', () => {
    const vp: Viewport = { centerX: 0, centerY: 0, zoom: MAX_ZOOM };
    expect(zoomAt(vp, PANE, { x: 0, y: 0 }, 10).zoom).toBe(MAX_ZOOM);
  });
});

describe('levelForZoom', () => {
  it('uses the sharpest level not upscaled past 1:1', () => {
    expect(levelForZoom(1.0, 5)).toBe(0);
    expect(levelForZoom(2.0, 5)).toBe(0);
    expect(levelForZoom(0.5, 5)).toBe(1);
    expect(levelForZoom(0.26, 5)).toBe(1);
    expect(levelForZoom(0.25, 5)).toBe(2);
    expect(levelForZoom(0.01, 5)).toBe(4);
  });

  it('clamps to the deepest available level', () => {
    expect(levelForZoom(0.01, 3)).toBe(2);
  });
});

describe('tilePlan', () => {
  const image = { width: 1600, height: 1200, levels: 3 };

  it('covers the visible rect with clamped tile indices', () => {
    const vp: Viewport = { centerX: 800, centerY: 600, zoom: 1 };
    const plan = tilePlan(vp, PANE, image, 256);
    expect(plan.length).toBeGreaterThan(0);
    const rect = visibleRect(vp, PANE);
    for (const t of plan) {
      expect(t.level).toBe(0);
      expect(t.x).toBeGreaterThanOrEqual(0);
      expect(t.y).toBeGreaterThanOrEqual(0);
      expect(t.x).toBeLessThan(Math.ceil(1600 / 256));
      expect(t.y).toBeLessThan(Math.ceil(1200 / 256));
      // tile overlaps the viewport
      expect((t.x + 1) * 256).toBeGreaterThan(rect.x);
      expect(t.x * 256).toBeLessThan(rect.x + rect.w);
    }
    // every visible image column is under some tile
    const xs = plan.map((t) => t.x);
    const spanX = [Math.min(...xs) * 256, (Math.max(...xs) + 1) * 256];
    expect(spanX[0]).toBeLessThanOrEqual(Math.max(rect.x, 0));
    expect(spanX[1]).toBeGreaterThanOrEqual(Math.min(rect.x + rect.w, 1600));
  });

  it('switches level with zoom and scales tile spans', () => {
    const vp: Viewport = { centerX: 800, centerY: 600, zoom: 0.25 };
    const plan = tilePlan(vp, PANE, image, 256);
    for (const t of plan) expect(t.level).toBe(2);
    // at level 2 one tile covers 1024 level-0 px -> 256 screen px at zoom 0.25
    expect(plan[0].screenSize).toBeCloseTo(256, 9);
  });

  it('places adjacent tiles edge to edge on screen', () => {
    const vp: Viewport = { centerX: 700, centerY: 500, zoom: 0.9 };
    const plan = tilePlan(vp, PANE, image, 256);
    const byPos = new Map(plan.map((t) => [`${t.x},${t.y}`, t]));
    for (const t of plan) {
      const right = byPos.get(`${t.x + 1},${t.y}`);
      if (right) expect(right.screenX).toBeCloseTo(t.screenX + t.screenSize, 9);
      const below = byPos.get(`${t.x},${t.y + 1}`);
      if (below) expect(below.screenY).toBeCloseTo(t.screenY + t.screenSize, 9);
    }
  });

  it('requests nothing outside the canvas when panned past the edge', () => {
    const vp: Viewport = { centerX: -500, centerY: -500, zoom: 1 };
    const plan = tilePlan(vp, PANE, image, 256);
    for (const t of plan) {
      expect(t.x).toBeGreaterThanOrEqual(0);
      expect(t.y).toBeGreaterThanOrEqual(0);
    }
  });
});
