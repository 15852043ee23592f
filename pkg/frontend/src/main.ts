/** Browser bootstrap: wires the canvas, controls and curve panel to the
 * API. Pure logic (state, overlay, curves, picking) lives in the sibling
 * modules and is what the tests cover.
 */

import { ApiClient } from "./api.js";
import { showCurves } from "./curves.js";
import { renderOverlay } from "./overlay.js";
import { PickController } from "./pick.js";
import { ViewState, clampOpacity, parseViewState, serializeViewState } from "./state.js";

function decodeMapPng(_base64: string): Promise<{ data: Float64Array; size: number }> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      const canvas = document.createElement("canvas");
      canvas.width = img.width;
      canvas.height = img.height;
      const ctx = canvas.getContext("2d")!;
      ctx.drawImage(img, 0, 0);
      const rgba = ctx.getImageData(0, 0, img.width, img.height).data;
      const data = new Float64Array(img.width * img.height);
      for (let i = 0; i < data.length; i++) {
        data[i] = rgba[4 * i] / 255; // 16-bit PNG decoded to 8-bit channels
      }
      resolve({ data, size: img.width });
    };
    img.onerror = () => reject(new Error("map decode failed"));
    img.src = "data:image/png;base64," + _base64;
  });
}

async function boot(): Promise<void> {
  const api = new ApiClient();
  let state: ViewState = parseViewState(window.location.hash);
  if (!state.model) {
    const { models } = await api.listModels();
    state.model = models[0]?.name ?? "";
  }

  const canvas = document.getElementById("heatmap") as HTMLCanvasElement | null;
  const status = document.getElementById("status");
  if (!canvas || !status) return;

  const pick = new PickController(api, 64, 8);

  const sync = (): void => {
    window.location.hash = serializeViewState(state);
  };

  canvas.addEventListener("click", async (ev) => {
    const rect = canvas.getBoundingClientRect();
    const point = pick.canvasToImage(ev.clientX - rect.left, ev.clientY - rect.top, rect.width);
    const result = await pick.pickPoint(state, point);
    if (result.error) {
      status.textContent = result.error;
      return;
    }
    state = result.state;
    sync();
    if (result.sameCell) {
      status.textContent = "same feature cell";
    }
    if (result.map) {
      const { data, size } = await decodeMapPng(result.map.png_base64);
      const base = new Uint8ClampedArray(size * size).fill(255);
      const rgba = renderOverlay(data, base, size, size, clampOpacity(state.opacity), state.colormap);
      const frame = new Uint8ClampedArray(new ArrayBuffer(rgba.length));
      frame.set(rgba);
      canvas.getContext("2d")?.putImageData(new ImageData(frame, size, size), 0, 0);
    }
  });

  if (state.q && state.model) {
    const score = await api.score(state.model, state.q, state.technique);
    state.curves = null;
    for (const chart of showCurves(score)) {
      status.textContent = `${chart.title}: ${chart.series.map((s) => s.label).join(" vs ")}`;
    }
    // restore the probe saved in the URL fragment, if any
    if (state.point) {
      await pick.pickPoint(state, state.point);
    }
  }
}

if (typeof document !== "undefined" && typeof window !== "undefined") {
  void boot();
}
