import type { GenerateRequest } from "./api.js";

export interface FieldDiff {
  field: keyof GenerateRequest;
  before: unknown;
  after: unknown;
}

const COMPARED: (keyof GenerateRequest)[] = [
  "shape_id",
  "prompt_template",
  "lambda",
  "strategy",
  "seed",
  "steps",
];

export function requestDiff(a: GenerateRequest, b: GenerateRequest): FieldDiff[] {
  const diffs: FieldDiff[] = [];
  for (const field of COMPARED) {
    if (a[field] !== b[field]) {
      diffs.push({ field, before: a[field], after: b[field] });
    }
  }
  return diffs;
}

export function describeDiff(diffs: FieldDiff[]): string {
  if (diffs.length === 0) {
    return "no differences";
  }
  return diffs.map((d) => `${d.field}: ${String(d.before)} vs ${String(d.after)}`).join("; ");
}
