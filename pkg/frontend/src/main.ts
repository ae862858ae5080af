import { ApiClient } from "./api.js";
import { controlPanel, historyPanel, shapeBrowser, sweepPanel } from "./panels.js";
import { Session, SweepQueue } from "./session.js";

function container(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing container #${id}`);
  }
  return node;
}

const baseUrl = document.body.dataset.api ?? window.location.origin;
const client = new ApiClient(baseUrl);
const session = new Session();

const history = historyPanel(container("history"), session);
const controls = controlPanel(container("controls"), client, session, () => history.refresh());
shapeBrowser(container("shapes"), client, session);
sweepPanel(container("sweep"), client, session, new SweepQueue(), (lambda) =>
  controls.setLambda(lambda)
);

const healthBanner = container("health");
async function pollHealth(): Promise<void> {
  try {
    const status = await client.health();
    healthBanner.textContent =
      status.status === "ok" ? `backend: ${status.backend}` : "backends loading...";
  } catch {
    healthBanner.textContent = "service unreachable";
  }
}
void pollHealth();
window.setInterval(() => void pollHealth(), 5000);
