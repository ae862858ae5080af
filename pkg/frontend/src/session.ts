import type { GenerateRequest, GenerateResponse } from "./api.js";

export const STRATEGIES = [
  "all_tokens",
  "object_only",
  "eos_only",
  "object_and_eos",
] as const;

export interface HistoryEntry {
  id: number;
  request: GenerateRequest;
  runId: string;
  image: string;
  timestamp: number;
}

function clamp01(value: number): number {
  return Math.min(1, Math.max(0, value));
}

export class Session {
  shapeId: string | null = null;
  promptTemplate = "a photograph of a [SHAPE-ID]";
  strategy: string = "object_and_eos";
  seed = 0;
  steps = 20;

  private lambdaValue = 1.0;
  private readonly entries: HistoryEntry[] = [];
  private nextEntryId = 1;

  get lambda(): number {
    return this.lambdaValue;
  }

  // Single choke point for the guidance strength: whatever the slider or
  // numeric field hands over, values stay inside [0, 1] and requests built
  // from the session can never carry an out-of-range lambda.
  setLambda(value: number): number {
    if (Number.isFinite(value)) {
      this.lambdaValue = clamp01(value);
    }
    return this.lambdaValue;
  }

  buildRequest(): GenerateRequest {
    if (this.shapeId === null) {
      throw new Error("select a shape first");
    }
    return {
      shape_id: this.shapeId,
      prompt_template: this.promptTemplate,
      lambda: this.lambdaValue,
      strategy: this.strategy,
      seed: this.seed,
      steps: this.steps,
    };
  }

  record(request: GenerateRequest, response: GenerateResponse): HistoryEntry {
    const entry: HistoryEntry = {
      id: this.nextEntryId++,
      request: { ...request },
      runId: response.run_id,
      image: response.image,
      timestamp: Date.now(),
    };
    this.entries.push(entry);
    return entry;
  }

  history(): readonly HistoryEntry[] {
    return this.entries.slice();
  }
}

// At most one sweep runs at a time. Requests submitted meanwhile queue
// client-side, but only the newest queued one survives, and a response is
// applied only if its submission id is still the latest: anything slower
// than a newer submission is dropped on arrival.
export class SweepQueue {
  private latestId = 0;
  private running = false;
  private pending: (() => void) | null = null;

  submit<T>(
    work: () => Promise<T>,
    apply: (result: T, stale: boolean) => void,
    onError: (error: unknown, stale: boolean) => void = () => {}
  ): number {
    const id = ++this.latestId;
    const job = async () => {
      let result: T | undefined;
      let failure: unknown = null;
      let failed = false;
      try {
        result = await work();
      } catch (err) {
        failure = err;
        failed = true;
      }
      this.running = false;
      const next = this.pending;
      this.pending = null;
      if (next !== null) {
        next();
      }
      const stale = id !== this.latestId;
      if (failed) {
        onError(failure, stale);
      } else {
        apply(result as T, stale);
      }
    };
    if (this.running) {
      this.pending = () => {
        this.running = true;
        void job();
      };
    } else {
      this.running = true;
      void job();
    }
    return id;
  }

  get busy(): boolean {
    return this.running;
  }
}
