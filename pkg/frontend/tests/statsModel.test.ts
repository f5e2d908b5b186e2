import { describe, expect, it } from "vitest";

import { actionBars, errorBars, reviewRateGauge, tallestDimension } from "../src/statsModel.js";
import type { ErrorDistribution, Stats } from "../src/types.js";

const tableFixture: Stats = {
  total: 100,
  routes: { cold_start_review: 100 },
  review_rate: 1.0,
  counts: { accept: 63, edit: 29, reject: 8 },
  rates: { accept: 0.63, edit: 0.29, reject: 0.08 },
  resolved: 92,
  rejected: 8,
  pending: 0,
};

describe("stats dashboard view models", () => {
  it("renders the 63/29/8 fixture at those proportions", () => {
    const bars = actionBars(tableFixture);
    expect(bars.map((b) => b.value)).toEqual([0.63, 0.29, 0.08]);
    expect(bars[0]!.proportion).toBeCloseTo(1.0);
    expect(bars[1]!.proportion).toBeCloseTo(0.29 / 0.63);
    expect(bars[2]!.proportion).toBeCloseTo(0.08 / 0.63);
  });

  it("cold start review gauge reads 100%", () => {
    expect(reviewRateGauge(tableFixture)).toEqual({ percent: 100, label: "100%" });
  });

  it("error distribution puts the tallest bar on the weakest dimension", () => {
    const dist: ErrorDistribution = { iteration: 0, e: [0.1, 0.2, 0.7], support_counts: [10, 10, 10] };
    const bars = errorBars(dist);
    expect(tallestDimension(dist)).toBe(2);
    expect(bars[2]!.proportion).toBeCloseTo(1.0);
    expect(bars[0]!.proportion).toBeCloseTo(0.1 / 0.7);
  });
});
