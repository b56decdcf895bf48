// Session state for the counterfactual workflow: one selected gallery and
// query patch, a validated metadata edit set, bounded alpha/K controls and
// the last run's results. The state never holds server-side mutables; a
// refresh plus the same run id reproduces the identical view.

import type { CounterfactualResponse } from "./api";

export const METADATA_FIELDS = [
  "organ_type",
  "disease",
  "tissue_type",
  "t_stage",
  "n_stage",
  "m_stage",
  "grade",
  "survival_status",
  "survival_months",
  "treatment_response",
  "annotation",
] as const;

export type MetadataField = (typeof METADATA_FIELDS)[number];

export interface SessionState {
  gallery: string | null;
  queryPatch: string | null;
  edits: Record<string, string>;
  alpha: number;
  k: number;
  lastRun: CounterfactualResponse | null;
}

export function initialState(): SessionState {
  return {
    gallery: null,
    queryPatch: null,
    edits: {},
    alpha: 0.6,
    k: 50,
    lastRun: null,
  };
}

export function isMetadataField(name: string): name is MetadataField {
  return (METADATA_FIELDS as readonly string[]).includes(name);
}

export function setEdit(state: SessionState, field: string, value: string): void {
  if (!isMetadataField(field)) {
    throw new Error(`unknown metadata field: ${field}`);
  }
  if (value === "") {
    delete state.edits[field];
  } else {
    state.edits[field] = value;
  }
}

export function setAlpha(state: SessionState, alpha: number): void {
  state.alpha = Math.min(1, Math.max(0, alpha));
}

export function setK(state: SessionState, k: number): void {
  state.k = Math.max(1, Math.round(k));
}
