// DOM panels over the service client. Everything here is plain elements and
// event listeners; state lives in the Session, traffic goes through the
// client, and tests drive the panels with stub clients.

import type { ApiClient, GenerateRequest } from "./api.js";
import { ApiError, imageUrl } from "./api.js";
import { requestDiff } from "./diff.js";
import type { HistoryEntry } from "./session.js";
import { Session, STRATEGIES, SweepQueue } from "./session.js";

type ShapesApi = Pick<ApiClient, "listShapes">;
type GenerateApi = Pick<ApiClient, "generate">;
type SweepApi = Pick<ApiClient, "sweep">;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export interface ShapeBrowser {
  refresh(): Promise<void>;
}

export function shapeBrowser(
  root: HTMLElement,
  client: ShapesApi,
  session: Session,
  onSelect?: (shapeId: string) => void
): ShapeBrowser {
  const refresh = async (): Promise<void> => {
    root.replaceChildren();
    let shapes;
    try {
      shapes = await client.listShapes();
    } catch {
      const banner = el("div", "banner", "service unreachable");
      const retry = el("button", "retry", "retry");
      retry.addEventListener("click", () => void refresh());
      banner.append(retry);
      root.append(banner);
      return;
    }
    if (shapes.length === 0) {
      root.append(el("div", "empty-state", "no shapes available"));
      return;
    }
    const list = el("ul", "shape-list");
    for (const shape of shapes) {
      const item = el("li", "shape-entry");
      const button = el("button", undefined, `${shape.shape_id} (${shape.category})`);
      button.addEventListener("click", () => {
        session.shapeId = shape.shape_id;
        for (const other of list.querySelectorAll(".selected")) {
          other.classList.remove("selected");
        }
        item.classList.add("selected");
        if (onSelect) {
          onSelect(shape.shape_id);
        }
      });
      item.append(button);
      list.append(item);
    }
    root.append(list);
  };
  void refresh();
  return { refresh };
}

export interface ControlPanel {
  slider: HTMLInputElement;
  numberField: HTMLInputElement;
  setLambda(value: number): void;
  generate(): Promise<HistoryEntry | null>;
}

export function controlPanel(
  root: HTMLElement,
  client: GenerateApi,
  session: Session,
  onEntry?: (entry: HistoryEntry) => void
): ControlPanel {
  const prompt = el("input", "prompt-field");
  prompt.value = session.promptTemplate;
  prompt.addEventListener("change", () => {
    session.promptTemplate = prompt.value;
  });

  const slider = el("input", "lambda-slider");
  slider.type = "range";
  slider.min = "0";
  slider.max = "1";
  slider.step = "0.01";
  const numberField = el("input", "lambda-field");
  numberField.type = "number";
  numberField.min = "0";
  numberField.max = "1";
  numberField.step = "0.01";

  const sync = () => {
    slider.value = String(session.lambda);
    numberField.value = String(session.lambda);
  };
  const setLambda = (value: number) => {
    session.setLambda(value);
    sync();
  };
  slider.addEventListener("input", () => setLambda(Number(slider.value)));
  numberField.addEventListener("change", () => setLambda(Number(numberField.value)));
  sync();

  const strategy = el("select", "strategy-select");
  for (const name of STRATEGIES) {
    const option = el("option", undefined, name);
    option.value = name;
    strategy.append(option);
  }
  strategy.value = session.strategy;
  strategy.addEventListener("change", () => {
    session.strategy = strategy.value;
  });

  const seed = el("input", "seed-field");
  seed.type = "number";
  seed.value = String(session.seed);
  seed.addEventListener("change", () => {
    const parsed = Number(seed.value);
    if (Number.isInteger(parsed)) {
      session.seed = parsed;
    }
    seed.value = String(session.seed);
  });

  const button = el("button", "generate-button", "generate");
  const message = el("div", "message");
  const output = el("div", "generate-output");

  const generate = async (): Promise<HistoryEntry | null> => {
    message.textContent = "";
    let request: GenerateRequest;
    try {
      request = session.buildRequest();
    } catch (err) {
      message.textContent = err instanceof Error ? err.message : String(err);
      return null;
    }
    try {
      const response = await client.generate(request);
      const entry = session.record(request, response);
      output.replaceChildren();
      const img = el("img", "generated-image");
      img.src = imageUrl(response.image);
      img.dataset.entryId = String(entry.id);
      output.append(img);
      if (onEntry) {
        onEntry(entry);
      }
      return entry;
    } catch (err) {
      message.textContent = err instanceof ApiError ? err.message : "generation failed";
      return null;
    }
  };
  button.addEventListener("click", () => void generate());

  root.append(prompt, slider, numberField, strategy, seed, button, message, output);
  return { slider, numberField, setLambda, generate };
}

export interface SweepPanel {
  input: HTMLInputElement;
  button: HTMLButtonElement;
  grid: HTMLElement;
  message: HTMLElement;
  runSweep(): number | null;
}

function parseLambdas(text: string): number[] | null {
  const parts = text.split(",").map((part) => part.trim()).filter((part) => part !== "");
  if (parts.length === 0) {
    return null;
  }
  const values = parts.map(Number);
  if (values.some((v) => !Number.isFinite(v))) {
    return null;
  }
  return values;
}

export function sweepPanel(
  root: HTMLElement,
  client: SweepApi,
  session: Session,
  queue: SweepQueue = new SweepQueue(),
  onPromote?: (lambda: number) => void
): SweepPanel {
  const input = el("input", "lambda-list");
  input.value = "0, 0.33, 0.67, 1.0";
  const button = el("button", "sweep-button", "sweep");
  const message = el("div", "validation-message");
  const grid = el("div", "sweep-grid");

  const renderGrid = (lambdas: number[], images: string[]) => {
    grid.replaceChildren();
    lambdas.forEach((lambda, i) => {
      const cell = el("figure", "sweep-cell");
      const image = images[i];
      if (image === undefined) {
        cell.append(el("div", "error-tile", "failed"));
      } else {
        const img = el("img");
        img.src = imageUrl(image);
        img.addEventListener("click", () => {
          if (onPromote) {
            onPromote(lambda);
          } else {
            session.setLambda(lambda);
          }
        });
        cell.append(img);
      }
      cell.append(el("figcaption", "cell-caption", `λ = ${lambda}`));
      grid.append(cell);
    });
  };

  const runSweep = (): number | null => {
    message.textContent = "";
    const lambdas = parseLambdas(input.value);
    if (lambdas === null) {
      message.textContent = "enter a comma-separated list of guidance strengths";
      return null;
    }
    if (lambdas.some((v) => v < 0 || v > 1)) {
      message.textContent = "guidance strengths must lie in [0, 1]";
      return null;
    }
    let base: GenerateRequest;
    try {
      base = session.buildRequest();
    } catch (err) {
      message.textContent = err instanceof Error ? err.message : String(err);
      return null;
    }
    return queue.submit(
      () =>
        client.sweep({
          shape_id: base.shape_id,
          prompt_template: base.prompt_template,
          lambdas,
          strategy: base.strategy,
          seed: base.seed,
          steps: base.steps,
        }),
      (response, stale) => {
        if (stale) {
          return;
        }
        renderGrid(response.lambdas, response.images);
      },
      (error, stale) => {
        if (stale) {
          return;
        }
        grid.replaceChildren();
        if (error instanceof ApiError) {
          const parts = error.errors.map((e) => `${e.field}: ${e.message}`);
          message.textContent = parts.length > 0 ? `${error.message}: ${parts.join("; ")}` : error.message;
        } else {
          message.textContent = "sweep failed";
        }
      }
    );
  };
  button.addEventListener("click", () => {
    runSweep();
  });

  root.append(input, button, message, grid);
  return { input, button, grid, message, runSweep };
}

export interface HistoryPanel {
  refresh(): void;
  compare(firstId: number, secondId: number): void;
}

const HIGHLIGHTED_FIELDS = new Set(["lambda", "strategy", "seed", "shape_id"]);

export function historyPanel(root: HTMLElement, session: Session): HistoryPanel {
  const list = el("ul", "history-list");
  const compareView = el("div", "compare-view");
  root.append(list, compareView);
  const selected: number[] = [];

  const compare = (firstId: number, secondId: number) => {
    const entries = session.history();
    const a = entries.find((e) => e.id === firstId);
    const b = entries.find((e) => e.id === secondId);
    if (a === undefined || b === undefined) {
      return;
    }
    compareView.replaceChildren();
    for (const entry of [a, b]) {
      const figure = el("figure", "compare-side");
      const img = el("img");
      img.src = imageUrl(entry.image);
      figure.append(img, el("figcaption", undefined, `run ${entry.runId}`));
      compareView.append(figure);
    }
    const diffs = requestDiff(a.request, b.request);
    const diffList = el("ul", "diff-list");
    if (diffs.length === 0) {
      diffList.append(el("li", "no-diff", "no differences"));
    }
    for (const diff of diffs) {
      const row = el(
        "li",
        "diff-row",
        `${diff.field}: ${String(diff.before)} vs ${String(diff.after)}`
      );
      row.dataset.field = diff.field;
      if (HIGHLIGHTED_FIELDS.has(diff.field)) {
        row.classList.add("highlight");
      }
      diffList.append(row);
    }
    compareView.append(diffList);
  };

  const refresh = () => {
    list.replaceChildren();
    for (const entry of session.history()) {
      const item = el("li", "history-entry");
      const label = `#${entry.id} ${entry.request.shape_id} λ=${entry.request.lambda} seed=${entry.request.seed}`;
      const button = el("button", undefined, label);
      button.addEventListener("click", () => {
        selected.push(entry.id);
        while (selected.length > 2) {
          selected.shift();
        }
        if (selected.length === 2) {
          compare(selected[0], selected[1]);
        }
      });
      item.append(button);
      list.append(item);
    }
  };

  refresh();
  return { refresh, compare };
}
