// Per-category composition bars for both retrieval conditions. Each
// condition's segments sum to at most 100%; the remainder is an explicit
// "unlabeled" segment so the bar always closes.

import type { CompositionRow } from "../api";
import { percentWidth, significanceStars } from "../format";

export interface ConditionBar {
  condition: "control" | "counterfactual";
  segments: { category: string; proportion: string }[];
  unlabeled: number; // remainder in [0, 1]
}

export function buildBars(rows: CompositionRow[]): ConditionBar[] {
  const conditions: ConditionBar[] = [
    { condition: "control", segments: [], unlabeled: 1 },
    { condition: "counterfactual", segments: [], unlabeled: 1 },
  ];
  let controlTotal = 0;
  let cfTotal = 0;
  for (const row of rows) {
    conditions[0].segments.push({
      category: row.category,
      proportion: row.mean_control,
    });
    conditions[1].segments.push({
      category: row.category,
      proportion: row.mean_counterfactual,
    });
    controlTotal += Number(row.mean_control) || 0;
    cfTotal += Number(row.mean_counterfactual) || 0;
  }
  conditions[0].unlabeled = Math.max(0, 1 - controlTotal);
  conditions[1].unlabeled = Math.max(0, 1 - cfTotal);
  return conditions;
}

const CATEGORY_COLORS = [
  "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1",
  "#76b7b2", "#edc948", "#ff9da7", "#9c755f",
];

export function renderComposition(
  container: HTMLElement,
  rows: CompositionRow[],
): void {
  container.replaceChildren();
  const bars = buildBars(rows);
  for (const bar of bars) {
    const label = document.createElement("div");
    label.className = "bar-label";
    label.textContent = bar.condition;
    container.appendChild(label);

    const track = document.createElement("div");
    track.className = "bar-track";
    bar.segments.forEach((segment, i) => {
      const div = document.createElement("div");
      div.className = "bar-segment";
      div.dataset.category = segment.category;
      div.dataset.proportion = segment.proportion;
      div.style.width = percentWidth(segment.proportion);
      div.style.background = CATEGORY_COLORS[i % CATEGORY_COLORS.length];
      div.title = `${segment.category}: ${segment.proportion}`;
      track.appendChild(div);
    });
    const rest = document.createElement("div");
    rest.className = "bar-segment unlabeled";
    rest.dataset.category = "unlabeled";
    rest.style.width = `${bar.unlabeled * 100}%`;
    rest.title = "unlabeled";
    track.appendChild(rest);
    container.appendChild(track);
  }

  const legend = document.createElement("div");
  legend.className = "composition-legend";
  rows.forEach((row, i) => {
    const item = document.createElement("span");
    item.className = "legend-item";
    const stars = significanceStars(row.adjusted_p);
    item.textContent = `${row.category}${stars}`;
    item.style.color = CATEGORY_COLORS[i % CATEGORY_COLORS.length];
    item.title = `adjusted p = ${row.adjusted_p}`;
    legend.appendChild(item);
  });
  container.appendChild(legend);
}
