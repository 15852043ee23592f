/** Heatmap compositing: map value -> colormap color, alpha = opacity * value,
 * drawn over the grayscale base snippet. All interpolation of the map itself
 * happens server-side; the UI only scales nearest-neighbor when zooming.
 */

export type Rgb = [number, number, number];

/** Perceptually ordered dark-to-bright ramp (monotone luminance). */
function orderedColor(v: number): Rgb {
  return [
    Math.round(255 * Math.min(1, 1.5 * v)),
    Math.round(255 * Math.max(0, 1.5 * v - 0.5)),
    Math.round(255 * Math.max(0, Math.min(1, 4 * v - 3))),
  ];
}

/** Red-highlight mode mimicking forensic overlays. */
function redColor(v: number): Rgb {
  return [255, Math.round(64 * (1 - v)), Math.round(64 * (1 - v))];
}

export function colormapColor(name: string, v: number): Rgb {
  const t = Math.min(1, Math.max(0, v));
  return name === "red" ? redColor(t) : orderedColor(t);
}

/**
 * Composite a saliency map over a grayscale base image.
 *
 * `map` holds values in [0, 1] row-major, `base` grayscale bytes of the
 * same dimensions. Returns RGBA bytes. Opacity 0 (or an all-zero map)
 * reproduces the base exactly.
 */
export function renderOverlay(
  map: Float64Array | number[],
  base: Uint8ClampedArray | number[],
  width: number,
  height: number,
  opacity: number,
  colormap: string,
): Uint8ClampedArray {
  if (map.length !== width * height || base.length !== width * height) {
    throw new Error(
      `overlay dimension mismatch: map ${map.length}, base ${base.length}, expected ${width * height}`,
    );
  }
  const alphaScale = Math.min(1, Math.max(0, opacity));
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    const g = base[i];
    const v = Math.min(1, Math.max(0, map[i]));
    const a = alphaScale * v;
    const [cr, cg, cb] = colormapColor(colormap, v);
    out[4 * i] = Math.round(a * cr + (1 - a) * g);
    out[4 * i + 1] = Math.round(a * cg + (1 - a) * g);
    out[4 * i + 2] = Math.round(a * cb + (1 - a) * g);
    out[4 * i + 3] = 255;
  }
  return out;
}
