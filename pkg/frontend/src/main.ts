/**
 * main.ts - DOM wiring for the split-screen registration viewer.
 *
 * Two panes share one ViewerState: reference tiles on the left, warped
 * moving tiles on the right. Dragging or wheel-zooming on either pane
 * moves both; the cursor is mirrored as a colored dot at the same image
 * coordinate; the toolbar exposes Fix Offset / Save and the green-purple
 * overlay toggle.
 */

import { PaneSide, TileServiceClient, fetchTransport } from './protocol';
import { ViewerState, PaneTile } from './viewer';
import { additiveOverlay } from './overlay';

const PLACEHOLDER =
  'data:image/svg+xml,' +
  encodeURIComponent('<svg xmlns="http://www.w3.org/2000/svg" width="8" height="8"><rect width="8" height="8" fill="#eee"/></svg>');
const RETRY_MS = 1000;

function paneElement(id: string): HTMLDivElement {
  const el = document.getElementById(id);
  if (!(el instanceof HTMLDivElement)) throw new Error(`missing pane #${id}`);
  return el;
}

/** One retry per failed tile, then a neutral placeholder. */
function tileImage(tile: PaneTile): HTMLImageElement {
  const img = document.createElement('img');
  img.draggable = false;
  let retried = false;
  img.onerror = () => {
    if (!retried) {
      retried = true;
      const sep = tile.url.includes('?') ? '&' : '?';
      setTimeout(() => {
        img.src = `${tile.url}${sep}retry=1`;
      }, RETRY_MS);
    } else {
      img.src = PLACEHOLDER;
    }
  };
  img.src = tile.url;
  img.style.position = 'absolute';
  img.style.left = `${tile.screenX}px`;
  img.style.top = `${tile.screenY}px`;
  img.style.width = `${tile.screenSize}px`;
  img.style.height = `${tile.screenSize}px`;
  img.style.imageRendering = tile.screenSize > 256 ? 'pixelated' : 'auto';
  return img;
}

function loadImage(url: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`tile failed: ${url}`));
    img.src = url;
  });
}

class ViewerDom {
  private state: ViewerState;
  private client: TileServiceClient;
  private panes: Record<PaneSide, HTMLDivElement>;
  private dots: Record<PaneSide, HTMLDivElement>;
  private status: HTMLElement;
  private renderEpoch = 0;

  constructor() {
    this.client = new TileServiceClient(fetchTransport());
    this.panes = { ref: paneElement('pane-ref'), mov: paneElement('pane-mov') };
    const size = {
      width: this.panes.ref.clientWidth,
      height: this.panes.ref.clientHeight,
    };
    this.state = new ViewerState(this.client, size);
    this.dots = { ref: this.makeDot('ref'), mov: this.makeDot('mov') };
    const status = document.getElementById('status');
    if (!status) throw new Error('missing #status');
    this.status = status;
  }

  private makeDot(side: PaneSide): HTMLDivElement {
    const dot = document.createElement('div');
    dot.className = 'cursor-dot';
    dot.style.display = 'none';
    this.panes[side].appendChild(dot);
    return dot;
  }

  async start(): Promise<void> {
    const pairs = await this.client.listPairs();
    const select = document.getElementById('pair-select') as HTMLSelectElement;
    for (const p of pairs) {
      const opt = document.createElement('option');
      opt.value = p.pair_id;
      opt.textContent = p.status === 'ok' ? p.pair_id : `${p.pair_id} (${p.status})`;
      opt.disabled = p.status !== 'ok';
      select.appendChild(opt);
    }
    select.onchange = () => void this.openPair(select.value);
    const servable = pairs.find((p) => p.status === 'ok');
    if (servable) {
      select.value = servable.pair_id;
      await this.openPair(servable.pair_id);
    } else {
      this.toast('no servable pairs');
    }
    this.wireInteractions();
    this.wireToolbar();
  }

  private async openPair(pairId: string): Promise<void> {
    try {
      await this.state.loadPair(pairId);
      this.render();
    } catch (err) {
      this.toast(String(err));
    }
  }

  private wireInteractions(): void {
    for (const side of ['ref', 'mov'] as const) {
      const pane = this.panes[side];
      let dragging = false;
      let last = { x: 0, y: 0 };
      pane.addEventListener('mousedown', (e) => {
        dragging = true;
        last = { x: e.clientX, y: e.clientY };
      });
      window.addEventListener('mouseup', () => {
        dragging = false;
      });
      pane.addEventListener('mousemove', (e) => {
        const box = pane.getBoundingClientRect();
        const local = { x: e.clientX - box.left, y: e.clientY - box.top };
        if (dragging) {
          this.state.pan(e.clientX - last.x, e.clientY - last.y);
          last = { x: e.clientX, y: e.clientY };
          this.render();
        }
        this.state.moveCursor(local);
        this.renderDots();
      });
      pane.addEventListener('mouseleave', () => {
        this.state.leaveCursor();
        this.renderDots();
      });
      pane.addEventListener('wheel', (e) => {
        e.preventDefault();
        const box = pane.getBoundingClientRect();
        const anchor = { x: e.clientX - box.left, y: e.clientY - box.top };
        this.state.zoom(anchor, e.deltaY < 0 ? 1.25 : 0.8);
        this.render();
      });
    }
  }

  private wireToolbar(): void {
    const fix = document.getElementById('fix-offset');
    const save = document.getElementById('save-offset');
    const overlay = document.getElementById('overlay-toggle') as HTMLInputElement | null;
    fix?.addEventListener('click', () => {
      void this.state
        .fixOffset()
        .then(() => {
          this.toast(this.state.offsetStatus.message);
          this.render();
        })
        .catch((err) => this.toast(String(err)));
    });
    save?.addEventListener('click', () => {
      void this.state
        .saveOffset()
        .then(() => this.toast(this.state.offsetStatus.message))
        .catch((err) => this.toast(String(err)));
    });
    overlay?.addEventListener('change', () => {
      this.state.overlayMode = overlay.checked ? 'overlay' : 'split';
      this.render();
    });
  }

  private toast(message: string): void {
    this.status.textContent = message;
  }

  /** Rebuild both panes from the shared viewport. */
  private render(): void {
    const epoch = ++this.renderEpoch;
    const { ref, mov } = this.state.syncViewports();
    this.fillPane('ref', ref);
    if (this.state.overlayMode === 'split') {
      this.fillPane('mov', mov);
    } else {
      void this.fillOverlayPane(ref, mov, epoch);
    }
    this.renderDots();
  }

  private fillPane(side: PaneSide, tiles: PaneTile[]): void {
    const pane = this.panes[side];
    pane.replaceChildren(this.dots[side]);
    for (const tile of tiles) pane.appendChild(tileImage(tile));
  }

  /** Blend ref+mov tiles client-side; stale renders are dropped by epoch. */
  private async fillOverlayPane(ref: PaneTile[], mov: PaneTile[], epoch: number): Promise<void> {
    const pane = this.panes.mov;
    pane.replaceChildren(this.dots.mov);
    await Promise.all(
      ref.map(async (refTile, i) => {
        const movTile = mov[i];
        try {
          const [a, b] = await Promise.all([loadImage(refTile.url), loadImage(movTile.url)]);
          if (epoch !== this.renderEpoch) return; // viewport moved on
          const canvas = document.createElement('canvas');
          canvas.width = a.width;
          canvas.height = a.height;
          const ctx = canvas.getContext('2d');
          if (!ctx) return;
          ctx.drawImage(a, 0, 0);
          const refData = ctx.getImageData(0, 0, canvas.width, canvas.height);
          ctx.drawImage(b, 0, 0);
          const movData = ctx.getImageData(0, 0, canvas.width, canvas.height);
          const blend = ctx.createImageData(canvas.width, canvas.height);
          additiveOverlay(refData.data, movData.data, blend.data);
          ctx.putImageData(blend, 0, 0);
          canvas.style.position = 'absolute';
          canvas.style.left = `${refTile.screenX}px`;
          canvas.style.top = `${refTile.screenY}px`;
          canvas.style.width = `${refTile.screenSize}px`;
          canvas.style.height = `${refTile.screenSize}px`;
          pane.appendChild(canvas);
        } catch {
          // missing tile: leave the slot empty; split mode handles retries
        }
      }),
    );
  }

  private renderDots(): void {
    const dots = this.state.cursorDots();
    for (const side of ['ref', 'mov'] as const) {
      const dot = this.dots[side];
      const placed = dots.find((d) => d.pane === side);
      if (!placed) {
        dot.style.display = 'none';
        continue;
      }
      dot.style.display = 'block';
      dot.style.background = placed.color;
      dot.style.left = `${placed.screen.x}px`;
      dot.style.top = `${placed.screen.y}px`;
    }
  }
}

window.addEventListener('DOMContentLoaded', () => {
  void new ViewerDom().start();
});
