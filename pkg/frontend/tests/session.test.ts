import { describe, expect, it } from "vitest";

import type { GenerateResponse } from "../src/api.js";
import { Session, SweepQueue } from "../src/session.js";

function response(runId: string): GenerateResponse {
  return {
    run_id: runId,
    image: "aW1n",
    timing_ms: 1.0,
    layout: { shape_span: [5, 5], eos_index: 6 },
    metrics: { clip: 12.0 },
  };
}

describe("Session lambda", () => {
  it("clamps values into [0, 1]", () => {
    const session = new Session();
    expect(session.setLambda(1.7)).toBe(1);
    expect(session.setLambda(-0.4)).toBe(0);
    expect(session.setLambda(0.33)).toBe(0.33);
  });

  it("ignores non-finite input", () => {
    const session = new Session();
    session.setLambda(0.5);
    expect(session.setLambda(Number.NaN)).toBe(0.5);
    expect(session.setLambda(Number.POSITIVE_INFINITY)).toBe(0.5);
  });

  it("never builds an out-of-range request", () => {
    const session = new Session();
    session.shapeId = "ball_01";
    for (const hostile of [9.5, -3, Number.NaN, 1.0000001]) {
      session.setLambda(hostile);
      const req = session.buildRequest();
      expect(req.lambda).toBeGreaterThanOrEqual(0);
      expect(req.lambda).toBeLessThanOrEqual(1);
    }
  });

  it("requires a selected shape", () => {
    expect(() => new Session().buildRequest()).toThrow("select a shape");
  });
});

describe("Session history", () => {
  it("appends entries in order with increasing ids", () => {
    const session = new Session();
    session.shapeId = "ball_01";
    const first = session.record(session.buildRequest(), response("r1"));
    session.setLambda(0.2);
    const second = session.record(session.buildRequest(), response("r2"));
    expect(session.history().map((e) => e.id)).toEqual([first.id, second.id]);
    expect(second.id).toBeGreaterThan(first.id);
  });

  it("snapshots the request at record time", () => {
    const session = new Session();
    session.shapeId = "ball_01";
    session.setLambda(0.4);
    const entry = session.record(session.buildRequest(), response("r1"));
    session.setLambda(0.9);
    expect(entry.request.lambda).toBe(0.4);
  });

  it("hands out copies, so the stored history cannot be mutated", () => {
    const session = new Session();
    session.shapeId = "ball_01";
    session.record(session.buildRequest(), response("r1"));
    const view = session.history() as unknown as unknown[];
    view.pop();
    expect(session.history()).toHaveLength(1);
  });
});

describe("SweepQueue", () => {
  function deferred<T>() {
    let resolve!: (value: T) => void;
    let reject!: (reason?: unknown) => void;
    const promise = new Promise<T>((res, rej) => {
      resolve = res;
      reject = rej;
    });
    return { promise, resolve, reject };
  }

  async function settle(): Promise<void> {
    for (let i = 0; i < 5; i++) {
      await Promise.resolve();
    }
  }

  it("marks a response stale when a newer submission exists", async () => {
    const queue = new SweepQueue();
    const slow = deferred<string>();
    const applied: Array<[string, boolean]> = [];
    queue.submit(() => slow.promise, (r, stale) => applied.push([r, stale]));
    const fast = deferred<string>();
    queue.submit(() => fast.promise, (r, stale) => applied.push([r, stale]));
    slow.resolve("old");
    await settle();
    fast.resolve("new");
    await settle();
    expect(applied).toEqual([
      ["old", true],
      ["new", false],
    ]);
  });

  it("runs one sweep at a time and keeps only the newest queued request", async () => {
    const queue = new SweepQueue();
    const first = deferred<string>();
    const started: string[] = [];
    const applied: Array<[string, boolean]> = [];
    queue.submit(
      () => {
        started.push("a");
        return first.promise;
      },
      (r, stale) => applied.push([r, stale])
    );
    queue.submit(
      () => {
        started.push("b");
        return Promise.resolve("b");
      },
      (r, stale) => applied.push([r, stale])
    );
    queue.submit(
      () => {
        started.push("c");
        return Promise.resolve("c");
      },
      (r, stale) => applied.push([r, stale])
    );
    expect(started).toEqual(["a"]);
    expect(queue.busy).toBe(true);
    first.resolve("a");
    await settle();
    expect(started).toEqual(["a", "c"]);
    expect(applied).toEqual([
      ["a", true],
      ["c", false],
    ]);
  });

  it("routes failures to the error callback with staleness", async () => {
    const queue = new SweepQueue();
    const errors: Array<[unknown, boolean]> = [];
    queue.submit(
      () => Promise.reject(new Error("boom")),
      () => {
        throw new Error("apply must not run");
      },
      (err, stale) => errors.push([err, stale])
    );
    await settle();
    expect(errors).toHaveLength(1);
    expect((errors[0][0] as Error).message).toBe("boom");
    expect(errors[0][1]).toBe(false);
    expect(queue.busy).toBe(false);
  });
});
