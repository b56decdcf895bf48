// Application wiring: pick a query patch, edit metadata fields, run the
// original-vs-counterfactual comparison and render every panel. One
// counterfactual request is in flight per session; newer submissions
// abort the stale one so late responses never clobber the view.

import { ApiError, AtlasClient } from "./api";
import type { CounterfactualResponse } from "./api";
import { initialState, METADATA_FIELDS, setAlpha, setEdit, setK } from "./state";
import type { SessionState } from "./state";
import { showToast } from "./toast";
import { renderComposition } from "./views/composition";
import { renderClusterHeatmap, renderShiftStrip } from "./views/shifts";
import { renderPcaScatter } from "./views/pca";
import { renderPrototypes, renderRetrievedPanel } from "./views/thumbnails";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export class App {
  readonly client: AtlasClient;
  readonly state: SessionState;
  private inFlight: AbortController | null = null;

  constructor(baseUrl: string) {
    this.client = new AtlasClient(baseUrl);
    this.state = initialState();
  }

  renderRun(run: CounterfactualResponse): void {
    this.state.lastRun = run;
    el("run-id").textContent = run.run_id;
    const queryIndex = Math.max(0, run.query_ids.indexOf(this.state.queryPatch ?? ""));
    renderRetrievedPanel(el("panel-control"), this.client, run.control, queryIndex);
    renderRetrievedPanel(
      el("panel-counterfactual"), this.client, run.counterfactual, queryIndex);
    renderComposition(el("composition"), run.composition);
    renderShiftStrip(el("shift-strip"), run.shift_strip);
    renderClusterHeatmap(el("heatmap"), run.cluster_shifts);
    renderPcaScatter(el("pca"), run.pca, (queryId) => {
      renderPrototypes(el("prototypes"), this.client, run.prototypes, queryId);
    });
    renderPrototypes(el("prototypes"), this.client, run.prototypes, null);
  }

  async editAndRun(): Promise<CounterfactualResponse | null> {
    if (!this.state.queryPatch) {
      showToast("select a query patch first");
      return null;
    }
    this.inFlight?.abort();
    const controller = new AbortController();
    this.inFlight = controller;
    try {
      const run = await this.client.counterfactual(
        { edits: this.state.edits, alpha: this.state.alpha, k: this.state.k },
        controller.signal,
      );
      if (controller.signal.aborted) return null; // superseded by a newer submission
      this.renderRun(run);
      return run;
    } catch (error) {
      if ((error as Error).name === "AbortError") return null;
      const message =
        error instanceof ApiError ? `service error: ${error.message}` : String(error);
      showToast(message); // session state stays untouched
      return null;
    } finally {
      if (this.inFlight === controller) this.inFlight = null;
    }
  }

  async populatePatchPicker(): Promise<void> {
    const galleries = await this.client.galleries();
    const info = galleries[0];
    this.state.gallery = info.modality;
    el("gallery-info").textContent =
      `${info.modality} gallery: ${info.rows} patches, ` +
      `${info.channels.length} biomarkers`;
    const picker = el<HTMLSelectElement>("query-picker");
    picker.replaceChildren();
    for (let i = 0; i < info.query_patches; i += 1) {
      const option = document.createElement("option");
      option.value = `q${i}`;
      option.textContent = `q${i}`;
      picker.appendChild(option);
    }
    picker.addEventListener("change", () => {
      void this.selectPatch(picker.value);
    });
    if (picker.options.length > 0) {
      await this.selectPatch(picker.options[0].value);
      picker.value = picker.options[0].value;
    }
  }

  async selectPatch(id: string): Promise<void> {
    this.state.queryPatch = id;
    const patch = await this.client.patch(id);
    el("patch-metadata").textContent = patch.metadata_text ?? "";
    el<HTMLImageElement>("patch-thumb").src = this.client.thumbnailUrl(id);
  }

  buildEditForm(): void {
    const form = el("edit-form");
    form.replaceChildren();
    for (const field of METADATA_FIELDS) {
      const row = document.createElement("label");
      row.className = "edit-row";
      row.textContent = field;
      const input = document.createElement("input");
      input.name = field;
      input.placeholder = "(keep)";
      input.addEventListener("input", () => setEdit(this.state, field, input.value));
      row.appendChild(input);
      form.appendChild(row);
    }

    const alpha = el<HTMLInputElement>("alpha-slider");
    alpha.addEventListener("input", () => {
      setAlpha(this.state, Number(alpha.value));
      el("alpha-value").textContent = this.state.alpha.toFixed(2);
    });
    const k = el<HTMLInputElement>("k-input");
    k.addEventListener("input", () => setK(this.state, Number(k.value)));
    el("run-button").addEventListener("click", () => {
      void this.editAndRun();
    });
  }

  async boot(): Promise<void> {
    const health = await this.client.health();
    el("health").textContent = `service ok, ${health.index_rows} rows`;
    this.buildEditForm();
    await this.populatePatchPicker();
  }
}

export function resolveBaseUrl(): string {
  const override = (window as { __ATLAS_API__?: string }).__ATLAS_API__;
  if (override) return override;
  const param = new URLSearchParams(window.location.search).get("api");
  return param ?? "http://127.0.0.1:8620";
}

if (!import.meta.env?.TEST) {
  const app = new App(resolveBaseUrl());
  app.boot().catch((error) => showToast(`service unreachable: ${String(error)}`));
}
