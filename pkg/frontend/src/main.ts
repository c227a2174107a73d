/** Browser entry point: wires the editor canvas, palette, docks, and the
 * session dashboard to the HTTP API and the live event stream. */

import { ApiClient, ApiError, CatalogEntry, NetView, SessionView } from "./api.js";
import { enabledActions, SessionAction, stateBadge } from "./dashboard.js";
import { EventStream, pumpEvents } from "./events.js";
import { renderSvg } from "./graph.js";
import { dropLayer, filterPalette } from "./palette.js";
import { MetricAppended, PlotPanel } from "./plots.js";

const api = new ApiClient();
const stream = new EventStream();
const plots = new PlotPanel();

let catalog: CatalogEntry[] = [];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function notify(message: string): void {
  const bar = el<HTMLElement>("notice");
  bar.textContent = message;
  setTimeout(() => {
    if (bar.textContent === message) bar.textContent = "";
  }, 5000);
}

async function guarded<T>(work: () => Promise<T>): Promise<T | undefined> {
  try {
    return await work();
  } catch (error) {
    notify(error instanceof ApiError ? error.message : String(error));
    return undefined;
  }
}

// ---- canvas ----------------------------------------------------------------

function drawNet(updated: NetView): void {
  el<HTMLElement>("canvas").innerHTML = renderSvg(updated, catalog);
}

async function refreshNet(): Promise<void> {
  const updated = await guarded(() => api.getNet());
  if (updated) drawNet(updated);
}

// ---- palette ---------------------------------------------------------------

function drawPalette(query: string): void {
  const list = el<HTMLElement>("palette");
  list.innerHTML = "";
  for (const entry of filterPalette(catalog, query)) {
    const item = document.createElement("li");
    item.textContent = entry.typeName;
    item.draggable = true;
    item.addEventListener("dragstart", (event) => {
      event.dataTransfer?.setData("text/plain", entry.typeName);
    });
    item.addEventListener("dblclick", async () => {
      const updated = await guarded(() => dropLayer(api, entry.typeName, [20, 20]));
      if (updated) drawNet(updated);
    });
    list.appendChild(item);
  }
}

function wireCanvasDrop(): void {
  const canvas = el<HTMLElement>("canvas");
  canvas.addEventListener("dragover", (event) => event.preventDefault());
  canvas.addEventListener("drop", async (event) => {
    event.preventDefault();
    const typeName = event.dataTransfer?.getData("text/plain");
    if (!typeName) return;
    const updated = await guarded(() =>
      dropLayer(api, typeName, [event.offsetX, event.offsetY]),
    );
    if (updated) drawNet(updated);
  });
}

// ---- docks -----------------------------------------------------------------

async function drawPhaseDropdown(): Promise<void> {
  const choices = await guarded(() =>
    api.catalogChoices("caffe.NetStateRule", "phase"),
  );
  if (!choices) return;
  const select = el<HTMLSelectElement>("phase");
  select.innerHTML = "";
  for (const choice of choices.choices) {
    const option = document.createElement("option");
    option.value = choice;
    option.textContent = choice;
    select.appendChild(option);
  }
}

// ---- dashboard ---------------------------------------------------------------

function sessionRow(session: SessionView): HTMLTableRowElement {
  const row = document.createElement("tr");
  const info = document.createElement("td");
  info.textContent =
    `#${session.id} ${stateBadge(session)} ` +
    `${session.iteration}/${session.maxIter}`;
  row.appendChild(info);

  const controls = document.createElement("td");
  for (const action of enabledActions(session.state)) {
    const button = document.createElement("button");
    button.textContent = action;
    button.addEventListener("click", async () => {
      await guarded(() =>
        action === "delete"
          ? api.deleteSession(session.id)
          : api.sessionAction(session.id, action as Exclude<SessionAction, "delete">),
      );
      await refreshSessions();
    });
    controls.appendChild(button);
  }
  row.appendChild(controls);
  return row;
}

async function refreshSessions(): Promise<void> {
  const sessions = await guarded(() => api.sessions());
  if (!sessions) return;
  const table = el<HTMLElement>("sessions");
  table.innerHTML = "";
  for (const session of sessions) table.appendChild(sessionRow(session));
}

// ---- plot ---------------------------------------------------------------------

function drawPlot(): void {
  const svg = el<HTMLElement>("plot");
  const parts: string[] = [];
  const colors = ["crimson", "royalblue", "seagreen", "darkorange"];
  let colorIndex = 0;
  for (const sessionId of plots.selectedSessions) {
    for (const key of plots.selectedKeys) {
      const points = plots.displayPoints(sessionId, key);
      if (!points.length) continue;
      const maxIter = points[points.length - 1][0] || 1;
      const maxValue = Math.max(...points.map((p) => p[1]), 1e-9);
      const path = points
        .map(([i, v]) => `${(i / maxIter) * 600},${200 - (v / maxValue) * 190}`)
        .join(" ");
      parts.push(
        `<polyline fill="none" stroke="${colors[colorIndex++ % colors.length]}" ` +
          `points="${path}"/>`,
      );
    }
  }
  svg.innerHTML = parts.join("");
}

// ---- event stream -----------------------------------------------------------

function onStreamEvent(event: { id: number; event: string; data: unknown }): void {
  if (event.event === "MetricAppended") {
    const metric = event.data as MetricAppended;
    if (!plots.selectedSessions.includes(metric.sessionId)) {
      plots.selectedSessions.push(metric.sessionId);
    }
    if (!plots.selectedKeys.includes(metric.key)) {
      plots.selectedKeys.push(metric.key);
    }
    plots.ingest(metric, event.id);
    drawPlot();
  } else if (event.event === "SessionStateChanged") {
    void refreshSessions();
  } else if (event.event === "ValidationChanged" || event.event === "ProjectSaved") {
    void refreshNet();
  }
}

// ---- boot --------------------------------------------------------------------

export async function boot(): Promise<void> {
  catalog = (await guarded(() => api.catalogLayers())) ?? [];
  drawPalette("");
  el<HTMLInputElement>("palette-search").addEventListener("input", (event) => {
    drawPalette((event.target as HTMLInputElement).value);
  });
  wireCanvasDrop();
  await refreshNet();
  await drawPhaseDropdown();
  await refreshSessions();
  el<HTMLElement>("new-session").addEventListener("click", async () => {
    await guarded(() => api.createSession());
    await refreshSessions();
  });
  void pumpEvents(stream, onStreamEvent);
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  void boot();
}
