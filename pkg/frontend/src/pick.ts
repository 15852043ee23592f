/** Point-to-image probing: convert a canvas click into image coordinates,
 * fetch the point-specific heatmap over the counterpart snippet, and keep a
 * session history so prior probes replay without new requests.
 */

import { ApiClient, ApiError, MapPayload, SequenceGate } from "./api.js";
import { Point, ViewState, pointInBounds } from "./state.js";

export interface Probe {
  point: Point;
  cell: [number, number];
  map: MapPayload;
}

export interface PickResult {
  state: ViewState;
  map: MapPayload | null;
  /** inline error text on 422 (state unchanged) */
  error: string | null;
  /** true when the click landed in the same feature cell as the last probe */
  sameCell: boolean;
  fromHistory: boolean;
}

export class PickController {
  readonly history: Probe[] = [];
  private readonly gate = new SequenceGate();

  constructor(
    private readonly api: ApiClient,
    private readonly imageSize: number,
    private readonly stride: number,
  ) {}

  /** Canvas pixel -> image pixel; null when the click is outside the image. */
  canvasToImage(x: number, y: number, canvasSize: number): Point | null {
    const scale = this.imageSize / canvasSize;
    const col = Math.floor(x * scale);
    const row = Math.floor(y * scale);
    if (!pointInBounds({ row, col }, this.imageSize)) {
      return null;
    }
    return { row, col };
  }

  cellOf(point: Point): [number, number] {
    return [Math.floor(point.row / this.stride), Math.floor(point.col / this.stride)];
  }

  findInHistory(point: Point): Probe | undefined {
    const [ci, cj] = this.cellOf(point);
    return this.history.find((p) => p.cell[0] === ci && p.cell[1] === cj);
  }

  /**
   * Handle a click at image coordinates. Clicks outside the image are
   * ignored (no request). Probes in a previously-seen feature cell replay
   * the stored map without a request.
   */
  async pickPoint(state: ViewState, point: Point | null): Promise<PickResult> {
    if (point === null) {
      return { state, map: null, error: null, sameCell: false, fromHistory: false };
    }
    const last = this.history[this.history.length - 1];
    const sameCell =
      last !== undefined &&
      last.cell[0] === this.cellOf(point)[0] &&
      last.cell[1] === this.cellOf(point)[1];

    const cached = this.findInHistory(point);
    if (cached) {
      return {
        state: { ...state, point },
        map: cached.map,
        error: null,
        sameCell,
        fromHistory: true,
      };
    }

    try {
      const map = await this.gate.run("point", () =>
        this.api.pointMap(state.model, state.q, state.r, point.row, point.col),
      );
      if (map === null) {
        // superseded by a newer click; drop silently
        return { state, map: null, error: null, sameCell, fromHistory: false };
      }
      const probe: Probe = { point, cell: map.meta.coarse_cell ?? this.cellOf(point), map };
      this.history.push(probe);
      return { state: { ...state, point }, map, error: null, sameCell, fromHistory: false };
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        return { state, map: null, error: err.message, sameCell, fromHistory: false };
      }
      throw err;
    }
  }
}
