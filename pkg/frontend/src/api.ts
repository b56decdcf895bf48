// Typed client for the /v1 query service. All analysis numbers arrive as
// pre-formatted strings and are rendered verbatim so the UI matches the
// service's CSV reports byte-for-byte ("" means undefined).

export interface GalleryInfo {
  modality: string;
  rows: number;
  dim: number;
  channels: string[];
  label_columns: string[];
  query_patches: number;
}

export interface PatchInfo {
  id: string;
  kind: "query" | "gallery";
  metadata?: Record<string, string | number | boolean | null>;
  metadata_text?: string;
  labels?: Record<string, string | null>;
  abundance?: Record<string, string>;
  thumbnail: string;
}

export interface CompositionRow {
  category: string;
  mean_control: string;
  mean_counterfactual: string;
  adjusted_p: string;
  significant: boolean;
}

export interface ShiftEntry {
  channel: string;
  mean_shift: string;
  percent_change: string;
  adjusted_p: string;
  significant: boolean;
}

export interface ClusterShiftReport {
  cluster: number;
  n_queries: number;
  status: string;
  shifts: ShiftEntry[];
}

export interface RetrievedSets {
  ids: string[][];
  scores: string[][];
}

export interface ClusterInfo {
  assignments: Record<string, number>;
  sizes: Record<string, number>;
}

export interface PcaInfo {
  status: string;
  query_ids?: string[];
  scores?: [string, string][];
  loadings?: Record<string, [string, string]>;
  explained?: string[];
}

export interface CounterfactualResponse {
  run_id: string;
  query_ids: string[];
  control: RetrievedSets;
  counterfactual: RetrievedSets;
  composition: CompositionRow[];
  shift_strip: ClusterShiftReport;
  clusters: ClusterInfo;
  cluster_shifts: ClusterShiftReport[];
  prototypes: Record<string, string[]>;
  pca: Record<string, PcaInfo>;
}

export interface CounterfactualRequest {
  query_ids?: string[];
  edits: Record<string, string>;
  alpha: number;
  k: number;
  clusters?: number;
  label_column?: string;
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = `HTTP ${response.status}`;
    try {
      const body = (await response.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      // keep the status text
    }
    throw new ApiError(detail, response.status);
  }
  return (await response.json()) as T;
}

export class AtlasClient {
  constructor(readonly baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async health(): Promise<{ status: string; index_rows: number }> {
    return asJson(await fetch(this.url("/v1/health")));
  }

  async galleries(): Promise<GalleryInfo[]> {
    return asJson(await fetch(this.url("/v1/galleries")));
  }

  async patch(id: string): Promise<PatchInfo> {
    return asJson(await fetch(this.url(`/v1/patches/${encodeURIComponent(id)}`)));
  }

  thumbnailUrl(id: string): string {
    return this.url(`/v1/patches/${encodeURIComponent(id)}/thumbnail.png`);
  }

  async counterfactual(
    request: CounterfactualRequest,
    signal?: AbortSignal,
  ): Promise<CounterfactualResponse> {
    const response = await fetch(this.url("/v1/counterfactual"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
      signal,
    });
    return asJson(response);
  }

  async shiftsCsv(runId: string): Promise<string> {
    const response = await fetch(
      this.url(`/v1/runs/${encodeURIComponent(runId)}/shifts.csv`),
    );
    if (!response.ok) throw new ApiError(`HTTP ${response.status}`, response.status);
    return await response.text();
  }
}
