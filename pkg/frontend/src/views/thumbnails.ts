// Side-by-side top-K retrieval panels and per-cluster prototype strips.

import type { AtlasClient, RetrievedSets } from "../api";

export function renderRetrievedPanel(
  container: HTMLElement,
  client: AtlasClient,
  sets: RetrievedSets,
  queryIndex: number,
  limit = 10,
): void {
  container.replaceChildren();
  const ids = sets.ids[queryIndex] ?? [];
  const scores = sets.scores[queryIndex] ?? [];
  ids.slice(0, limit).forEach((id, i) => {
    const tile = document.createElement("figure");
    tile.className = "thumb";
    const img = document.createElement("img");
    img.src = client.thumbnailUrl(id);
    img.alt = id;
    img.width = 48;
    img.height = 48;
    const caption = document.createElement("figcaption");
    caption.textContent = `${id} (${scores[i] ?? ""})`;
    tile.append(img, caption);
    container.appendChild(tile);
  });
}

export function renderPrototypes(
  container: HTMLElement,
  client: AtlasClient,
  prototypes: Record<string, string[]>,
  highlight: string | null,
): void {
  container.replaceChildren();
  for (const cluster of Object.keys(prototypes).sort()) {
    const row = document.createElement("div");
    row.className = "prototype-row";
    const label = document.createElement("span");
    label.textContent = `C${cluster}`;
    row.appendChild(label);
    for (const id of prototypes[cluster]) {
      const img = document.createElement("img");
      img.src = client.thumbnailUrl(id);
      img.alt = id;
      img.width = 40;
      img.height = 40;
      img.dataset.queryId = id;
      if (highlight === id) img.classList.add("highlight");
      row.appendChild(img);
    }
    container.appendChild(row);
  }
}
