/** View state of the inspector, serializable to the URL fragment. */

export type Technique = "pixelwise" | "overall" | "point";

export interface Point {
  row: number;
  col: number;
}

export interface CurvePoints {
  fractions: number[];
  similarities: number[];
  auc: number;
}

export interface CurveSet {
  sDel: CurvePoints;
  sIns: CurvePoints;
  rDel: CurvePoints[];
  rIns: CurvePoints[];
}

export interface ViewState {
  model: string;
  q: string;
  r: string;
  technique: Technique;
  /** overlay alpha multiplier, clamped to [0, 1] */
  opacity: number;
  colormap: string;
  /** selected probe point in q's pixel coordinates, if any */
  point: Point | null;
  /** latest pair similarity S reported by the API */
  similarity: number | null;
  curves: CurveSet | null;
}

export const COLORMAPS = ["ordered", "red"] as const;

export function clampOpacity(value: number): number {
  if (!Number.isFinite(value)) return 1;
  return Math.min(1, Math.max(0, value));
}

export function defaultState(): ViewState {
  return {
    model: "",
    q: "",
    r: "",
    technique: "pixelwise",
    opacity: 0.6,
    colormap: "ordered",
    point: null,
    similarity: null,
    curves: null,
  };
}

/** Point must lie inside q's bounds; used before accepting any probe. */
export function pointInBounds(point: Point, size: number): boolean {
  return (
    Number.isInteger(point.row) &&
    Number.isInteger(point.col) &&
    point.row >= 0 &&
    point.col >= 0 &&
    point.row < size &&
    point.col < size
  );
}

/**
 * Serialize the shareable part of the state (ids, technique, appearance,
 * probe point) into a URL fragment. Derived data (similarity, curves) is
 * refetched on restore rather than embedded.
 */
export function serializeViewState(state: ViewState): string {
  const params = new URLSearchParams();
  params.set("model", state.model);
  params.set("q", state.q);
  params.set("r", state.r);
  params.set("technique", state.technique);
  params.set("opacity", String(state.opacity));
  params.set("colormap", state.colormap);
  if (state.point) {
    params.set("point", `${state.point.row},${state.point.col}`);
  }
  return "#" + params.toString();
}

export function parseViewState(fragment: string): ViewState {
  const state = defaultState();
  const raw = fragment.startsWith("#") ? fragment.slice(1) : fragment;
  const params = new URLSearchParams(raw);
  state.model = params.get("model") ?? "";
  state.q = params.get("q") ?? "";
  state.r = params.get("r") ?? "";
  const technique = params.get("technique");
  if (technique === "pixelwise" || technique === "overall" || technique === "point") {
    state.technique = technique;
  }
  state.opacity = clampOpacity(Number(params.get("opacity") ?? state.opacity));
  const colormap = params.get("colormap");
  if (colormap && (COLORMAPS as readonly string[]).includes(colormap)) {
    state.colormap = colormap;
  }
  const point = params.get("point");
  if (point) {
    const [row, col] = point.split(",").map(Number);
    if (Number.isInteger(row) && Number.isInteger(col)) {
      state.point = { row, col };
    }
  }
  return state;
}
