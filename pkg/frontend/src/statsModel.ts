/** View models for the stats dashboard panels. */

import type { ErrorDistribution, Stats } from "./types.js";

export interface Bar {
  label: string;
  value: number;
  /** height fraction in [0, 1] relative to the tallest bar */
  proportion: number;
}

export function actionBars(stats: Stats): Bar[] {
  const entries: [string, number][] = [
    ["accept", stats.rates.accept ?? 0],
    ["edit", stats.rates.edit ?? 0],
    ["reject", stats.rates.reject ?? 0],
  ];
  const top = Math.max(...entries.map(([, v]) => v), 1e-12);
  return entries.map(([label, value]) => ({ label, value, proportion: value / top }));
}

export function reviewRateGauge(stats: Stats): { percent: number; label: string } {
  const percent = Math.round(stats.review_rate * 1000) / 10;
  return { percent, label: `${percent}%` };
}

export function errorBars(dist: ErrorDistribution): Bar[] {
  const top = Math.max(...dist.e, 1e-12);
  return dist.e.map((value, dim) => ({
    label: `dim${dim}`,
    value,
    proportion: value / top,
  }));
}

export function tallestDimension(dist: ErrorDistribution): number {
  let best = 0;
  dist.e.forEach((value, dim) => {
    if (value > (dist.e[best] ?? 0)) best = dim;
  });
  return best;
}
