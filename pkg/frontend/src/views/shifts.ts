// Biomarker shift strip (one pooled group) and the cluster-by-biomarker
// heatmap. Cell text is the service's mean_shift string rendered verbatim;
// significance stars derive from the adjusted p string.

import type { ClusterShiftReport } from "../api";
import { shiftColor, significanceStars } from "../format";

function maxAbsShift(reports: ClusterShiftReport[]): number {
  let out = 0;
  for (const report of reports) {
    for (const entry of report.shifts) {
      const value = Math.abs(Number(entry.mean_shift));
      if (!Number.isNaN(value)) out = Math.max(out, value);
    }
  }
  return out;
}

export function renderShiftStrip(
  container: HTMLElement,
  strip: ClusterShiftReport,
): void {
  container.replaceChildren();
  const scale = maxAbsShift([strip]);
  for (const entry of strip.shifts) {
    const cell = document.createElement("div");
    cell.className = "strip-cell";
    cell.dataset.channel = entry.channel;
    cell.dataset.meanShift = entry.mean_shift;
    cell.style.background = shiftColor(entry.mean_shift, scale);

    const name = document.createElement("span");
    name.className = "strip-channel";
    name.textContent = entry.channel;
    const value = document.createElement("span");
    value.className = "strip-value";
    value.textContent = entry.mean_shift === "" ? "n/a" : entry.mean_shift;
    const badge = document.createElement("span");
    badge.className = "strip-badge";
    badge.textContent = significanceStars(entry.adjusted_p);
    badge.title = `adjusted p = ${entry.adjusted_p}`;

    cell.append(name, value, badge);
    container.appendChild(cell);
  }
}

export function renderClusterHeatmap(
  container: HTMLElement,
  reports: ClusterShiftReport[],
): void {
  container.replaceChildren();
  const usable = reports.filter((r) => r.status === "ok");
  if (usable.length === 0) {
    const placeholder = document.createElement("div");
    placeholder.className = "placeholder";
    placeholder.textContent = "no cluster passed the minimum size; rerun with more queries";
    container.appendChild(placeholder);
    return;
  }
  const channels = usable[0].shifts.map((s) => s.channel);
  const scale = maxAbsShift(usable);

  const table = document.createElement("table");
  table.className = "heatmap";
  const head = table.createTHead().insertRow();
  head.insertCell().textContent = "biomarker";
  for (const report of usable) {
    const cell = head.insertCell();
    cell.textContent = `C${report.cluster} (n=${report.n_queries})`;
  }
  const body = table.createTBody();
  channels.forEach((channel, rowIndex) => {
    const row = body.insertRow();
    row.insertCell().textContent = channel;
    for (const report of usable) {
      const entry = report.shifts[rowIndex];
      const cell = row.insertCell();
      cell.className = "heatmap-cell";
      cell.dataset.cluster = String(report.cluster);
      cell.dataset.channel = entry.channel;
      cell.dataset.meanShift = entry.mean_shift;
      cell.style.background = shiftColor(entry.mean_shift, scale);
      const value = document.createElement("span");
      value.className = "cell-value";
      value.textContent = entry.mean_shift === "" ? "" : entry.mean_shift;
      const stars = document.createElement("sup");
      stars.className = "cell-stars";
      stars.textContent = significanceStars(entry.adjusted_p);
      cell.append(value, stars);
      cell.title = `${entry.channel} in C${report.cluster}: shift ${entry.mean_shift}`
        + ` (${entry.percent_change}%), adjusted p ${entry.adjusted_p}`;
    }
  });
  container.appendChild(table);
}
