/**
 * protocol.ts - Types and a thin client for the registration tile service.
 *
 * The client only builds URLs and decodes JSON; it never touches pixel
 * data. Every request goes through a Transport seam so tests can stand in
 * a fake server and assert on the exact protocol traffic.
 */

export interface PyramidInfo {
  width: number;
  height: number;
  levels: number;
}

export interface PairDescriptor {
  pair_id: string;
  status: string;
  tile_size?: number | null;
  ref?: PyramidInfo | null;
  mov?: PyramidInfo | null;
  error?: string | null;
}

/** Rectangle in level-pixel coordinates, as the fix-offset endpoint expects. */
export interface ViewportRectBody {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface FixOffsetRequest {
  level?: number | null;
  viewport_rect?: ViewportRectBody | null;
}

export interface OffsetResponse {
  dx: number;
  dy: number;
  peak: number;
  scope: string;
  level: number;
  degenerate: boolean;
}

export interface SaveOffsetResponse {
  saved: boolean;
  path: string;
}

export type PaneSide = 'ref' | 'mov';
export type Interp = 'nearest' | 'bilinear';

/** Minimal HTTP seam: the app passes fetch, tests pass a fake server. */
export interface Transport {
  getJson(path: string): Promise<unknown>;
  postJson(path: string, body: unknown): Promise<unknown>;
}

export class TileServiceClient {
  constructor(private transport: Transport, private baseUrl: string = '') {}

  async listPairs(): Promise<PairDescriptor[]> {
    return (await this.transport.getJson(`${this.baseUrl}/pairs`)) as PairDescriptor[];
  }

  /**
   * Tile URL per the service protocol. `version` is a cache-busting token
   * bumped after a fix-offset so the browser refetches moving-pane tiles;
   * the server ignores query parameters it does not know about.
   */
  tileUrl(
    pairId: string,
    side: PaneSide,
    level: number,
    x: number,
    y: number,
    interp: Interp = 'bilinear',
    version = 0,
  ): string {
    const base = `${this.baseUrl}/pairs/${encodeURIComponent(pairId)}/${side}/tile/${level}/${x}/${y}`;
    return version > 0 ? `${base}?interp=${interp}&v=${version}` : `${base}?interp=${interp}`;
  }

  async fixOffset(pairId: string, body: FixOffsetRequest): Promise<OffsetResponse> {
    const path = `${this.baseUrl}/pairs/${encodeURIComponent(pairId)}/fix-offset`;
    return (await this.transport.postJson(path, body)) as OffsetResponse;
  }

  async saveOffset(pairId: string): Promise<SaveOffsetResponse> {
    const path = `${this.baseUrl}/pairs/${encodeURIComponent(pairId)}/save-offset`;
    return (await this.transport.postJson(path, {})) as SaveOffsetResponse;
  }
}

/** Transport backed by the browser's fetch. */
export function fetchTransport(fetchFn: typeof fetch = fetch): Transport {
  return {
    async getJson(path: string): Promise<unknown> {
      const res = await fetchFn(path);
      if (!res.ok) throw new Error(`GET ${path} failed: ${res.status}`);
      return res.json();
    },
    async postJson(path: string, body: unknown): Promise<unknown> {
      const res = await fetchFn(path, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(body),
      });
      if (!res.ok) throw new Error(`POST ${path} failed: ${res.status}`);
      return res.json();
    },
  };
}
