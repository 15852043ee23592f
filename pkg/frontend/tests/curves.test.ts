import { describe, expect, it } from "vitest";

import type { CurveDto, ScoreResponse } from "../src/api.js";
import { endpointsMatch, formatAuc, showCurves } from "../src/curves.js";

function curve(mode: string, similarities: number[], auc: number): CurveDto {
  const fractions = similarities.map((_, i) => i / (similarities.length - 1));
  return { fractions, similarities, auc, mode, ordering: "saliency" };
}

function score(): ScoreResponse {
  return {
    snippet_id: "s",
    s_del: 0.4,
    r_del: 0.6,
    s_ins: 0.9,
    r_ins: 0.7,
    curves: {
      s_del: curve("deletion", [1, 0.5, 0.2], 0.4),
      s_ins: curve("insertion", [0.1, 0.8, 1], 0.9),
      r_del: [curve("deletion", [1, 0.8, 0.4], 0.7), curve("deletion", [1, 0.6, 0.4], 0.5)],
      r_ins: [curve("insertion", [0.2, 0.5, 1], 0.6), curve("insertion", [0.2, 0.9, 1], 0.8)],
    },
  };
}

describe("showCurves", () => {
  it("renders deletion and insertion charts with AUC labels", () => {
    const charts = showCurves(score());
    expect(charts.map((c) => c.title)).toEqual(["Deletion", "Insertion"]);
    expect(charts[0].series[0].label).toContain("AUC 0.400");
    expect(charts[0].series[1].label).toContain("random");
  });

  it("averages the random baseline repeats", () => {
    const charts = showCurves(score());
    const random = charts[0].series[1];
    expect(random.auc).toBeCloseTo(0.6, 10);
    expect(random.points[1].y).toBeCloseTo(0.7, 10);
  });

  it("saliency and random series share endpoints", () => {
    for (const chart of showCurves(score())) {
      expect(endpointsMatch(chart)).toBe(true);
      for (const s of chart.series) {
        expect(s.points[0].x).toBe(0);
        expect(s.points[s.points.length - 1].x).toBe(1);
      }
    }
  });

  it("missing curves produce an empty-state panel list", () => {
    expect(showCurves(null)).toEqual([]);
  });

  it("a constant-1 curve is labeled 1.000", () => {
    expect(formatAuc(1)).toBe("1.000");
  });
});
