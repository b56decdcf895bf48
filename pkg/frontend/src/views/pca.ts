// PC1-PC2 scatter of per-patch shift vectors, one SVG per cluster, with
// hover-to-patch linking through a callback.

import type { PcaInfo } from "../api";

const WIDTH = 320;
const HEIGHT = 240;
const PAD = 24;

function extent(values: number[]): [number, number] {
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  if (lo === hi) {
    lo -= 1;
    hi += 1;
  }
  return [lo, hi];
}

export function renderPcaScatter(
  container: HTMLElement,
  pcaByCluster: Record<string, PcaInfo>,
  onHover: (queryId: string | null) => void,
): void {
  container.replaceChildren();
  const clusters = Object.keys(pcaByCluster).sort();
  for (const cluster of clusters) {
    const info = pcaByCluster[cluster];
    const panel = document.createElement("figure");
    panel.className = "pca-panel";
    const caption = document.createElement("figcaption");
    if (info.status !== "ok" || !info.scores || !info.query_ids) {
      caption.textContent = `C${cluster}: ${info.status}`;
      const retry = document.createElement("button");
      retry.className = "pca-retry";
      retry.textContent = "retry with more queries";
      panel.append(caption, retry);
      container.appendChild(panel);
      continue;
    }
    caption.textContent =
      `C${cluster} shift modes (PC1 ${info.explained?.[0] ?? "?"}, ` +
      `PC2 ${info.explained?.[1] ?? "?"})`;

    const xs = info.scores.map((s) => Number(s[0]));
    const ys = info.scores.map((s) => Number(s[1]));
    const [x0, x1] = extent(xs);
    const [y0, y1] = extent(ys);
    const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
    svg.setAttribute("class", "pca-svg");
    info.scores.forEach((score, i) => {
      const circle = document.createElementNS("http://www.w3.org/2000/svg", "circle");
      const cx = PAD + ((Number(score[0]) - x0) / (x1 - x0)) * (WIDTH - 2 * PAD);
      const cy = HEIGHT - PAD - ((Number(score[1]) - y0) / (y1 - y0)) * (HEIGHT - 2 * PAD);
      circle.setAttribute("cx", String(cx));
      circle.setAttribute("cy", String(cy));
      circle.setAttribute("r", "4");
      circle.setAttribute("class", "pca-point");
      const queryId = info.query_ids![i];
      circle.dataset.queryId = queryId;
      circle.addEventListener("mouseenter", () => onHover(queryId));
      circle.addEventListener("mouseleave", () => onHover(null));
      svg.appendChild(circle);
    });
    panel.append(caption, svg);
    container.appendChild(panel);
  }
}
