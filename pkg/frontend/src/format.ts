// Value rendering rules. Service numbers are pre-formatted strings and
// must be displayed verbatim (the CSV cross-check depends on it); these
// helpers only derive presentation extras, never reformat the value.

export function significanceStars(adjustedP: string): string {
  if (adjustedP === "") return "";
  const p = Number(adjustedP);
  if (Number.isNaN(p)) return "";
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

// symmetric diverging color around zero shift
export function shiftColor(meanShift: string, maxAbs: number): string {
  const value = meanShift === "" ? 0 : Number(meanShift);
  if (Number.isNaN(value) || maxAbs <= 0) return "rgb(245,245,245)";
  const t = Math.max(-1, Math.min(1, value / maxAbs));
  const intensity = Math.round(Math.abs(t) * 160);
  return t >= 0
    ? `rgb(${245 - intensity},${245 - Math.round(intensity * 0.45)},245)`
    : `rgb(245,${245 - Math.round(intensity * 0.45)},${245 - intensity})`;
}

export function percentWidth(proportion: string): string {
  const value = proportion === "" ? 0 : Number(proportion);
  if (Number.isNaN(value)) return "0%";
  return `${Math.max(0, Math.min(1, value)) * 100}%`;
}
