// Thin typed client for the generation service. No model logic lives here;
// every method maps onto exactly one endpoint.

export interface ShapeInfo {
  shape_id: string;
  category: string;
}

export interface LayoutInfo {
  shape_span: [number, number];
  eos_index: number;
}

export interface GenerateRequest {
  shape_id: string;
  prompt_template: string;
  lambda: number;
  strategy: string;
  seed: number;
  steps: number;
}

export interface GenerateResponse {
  run_id: string;
  image: string;
  timing_ms: number;
  layout: LayoutInfo;
  metrics: { clip: number };
}

export interface SweepRequest {
  shape_id: string;
  prompt_template: string;
  lambdas: number[];
  strategy: string;
  seed: number;
  steps: number;
}

export interface SweepResponse {
  run_id: string;
  images: string[];
  lambdas: number[];
  timing_ms: number;
  layout: LayoutInfo;
}

export interface RunRecord {
  run_id: string;
  request?: Record<string, unknown>;
  metrics?: Record<string, unknown>;
  images: string[];
}

export interface FieldError {
  field: string;
  message: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly errors: FieldError[] = []
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly fetchImpl: FetchLike;

  constructor(readonly baseUrl: string, fetchImpl?: FetchLike) {
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  async health(): Promise<{ status: string; backend: string | null }> {
    const res = await this.fetchImpl(`${this.baseUrl}/health`);
    return res.json();
  }

  async listShapes(): Promise<ShapeInfo[]> {
    const body = await this.request<{ shapes: ShapeInfo[] }>("GET", "/shapes");
    return body.shapes;
  }

  generate(req: GenerateRequest): Promise<GenerateResponse> {
    return this.request("POST", "/generate", req);
  }

  sweep(req: SweepRequest): Promise<SweepResponse> {
    return this.request("POST", "/sweep", req);
  }

  run(runId: string): Promise<RunRecord> {
    return this.request("GET", `/runs/${encodeURIComponent(runId)}`);
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!res.ok) {
      throw await toApiError(res);
    }
    return res.json() as Promise<T>;
  }
}

async function toApiError(res: Response): Promise<ApiError> {
  let detail = `request failed with status ${res.status}`;
  let errors: FieldError[] = [];
  try {
    const body = await res.json();
    if (typeof body.detail === "string") {
      detail = body.detail;
    }
    if (Array.isArray(body.errors)) {
      errors = body.errors;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(res.status, detail, errors);
}

export function imageUrl(base64Png: string): string {
  return `data:image/png;base64,${base64Png}`;
}
