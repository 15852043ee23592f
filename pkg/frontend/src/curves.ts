/** Chart preparation for the deletion/insertion curve panel. Saliency and
 * random-baseline curves share their first and last images by protocol, so
 * their endpoints must coincide; the renderer marks them explicitly.
 */

import type { CurveDto, ScoreResponse } from "./api.js";

export interface Series {
  label: string;
  points: { x: number; y: number }[];
  auc: number;
}

export interface CurveChart {
  title: string;
  xLabel: string;
  yLabel: string;
  series: Series[];
}

function meanCurve(curves: CurveDto[]): CurveDto {
  const n = curves.length;
  const fractions = curves[0].fractions;
  const similarities = fractions.map(
    (_, i) => curves.reduce((acc, c) => acc + c.similarities[i], 0) / n,
  );
  const auc = curves.reduce((acc, c) => acc + c.auc, 0) / n;
  return { fractions, similarities, auc, mode: curves[0].mode, ordering: "random" };
}

function toSeries(label: string, curve: CurveDto): Series {
  return {
    label: `${label} (AUC ${formatAuc(curve.auc)})`,
    points: curve.fractions.map((x, i) => ({ x, y: curve.similarities[i] })),
    auc: curve.auc,
  };
}

export function formatAuc(auc: number): string {
  return auc.toFixed(3);
}

/** Empty-state panels when a score response has no curves attached. */
export function showCurves(score: ScoreResponse | null): CurveChart[] {
  if (!score || !score.curves) {
    return [];
  }
  const { curves } = score;
  return [
    {
      title: "Deletion",
      xLabel: "ink fraction deleted",
      yLabel: "similarity to original",
      series: [toSeries("saliency", curves.s_del), toSeries("random", meanCurve(curves.r_del))],
    },
    {
      title: "Insertion",
      xLabel: "ink fraction inserted",
      yLabel: "similarity to original",
      series: [toSeries("saliency", curves.s_ins), toSeries("random", meanCurve(curves.r_ins))],
    },
  ];
}

/** Protocol check: within a chart, all series start and end together. */
export function endpointsMatch(chart: CurveChart, tol = 1e-6): boolean {
  const first = chart.series[0];
  return chart.series.every((s) => {
    const a = s.points[0];
    const b = s.points[s.points.length - 1];
    const fa = first.points[0];
    const fb = first.points[first.points.length - 1];
    return Math.abs(a.x - fa.x) <= tol && Math.abs(b.x - fb.x) <= tol;
  });
}
