import { ApiClient } from "./api.js";
import { defaultOrbit, normalizePositions, rotateOrbit, zoomOrbit } from "./camera.js";
import { NO_LABEL_COLOR, RGB } from "./palette.js";
import { DEFAULT_OPTIONS, drawPoints } from "./render.js";
import { LocalHistoryStore, ViewerSession } from "./session.js";

const baseUrl = new URLSearchParams(location.search).get("api") ?? "http://127.0.0.1:8731";
const api = new ApiClient(baseUrl);
const session = new ViewerSession(api, new LocalHistoryStore());

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;
const objectSelect = document.getElementById("object") as HTMLSelectElement;
const queryInput = document.getElementById("queries") as HTMLInputElement;
const submitBtn = document.getElementById("submit") as HTMLButtonElement;
const exportBtn = document.getElementById("export") as HTMLButtonElement;
const modeSelect = document.getElementById("mode") as HTMLSelectElement;
const sizeSlider = document.getElementById("size") as HTMLInputElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const statusLine = document.getElementById("status") as HTMLDivElement;
const historyList = document.getElementById("history") as HTMLUListElement;

let positions: number[][] = [];
let baseColors: RGB[] = [];
let orbit = defaultOrbit();

function showError(message: string) {
  banner.textContent = message;
  banner.style.display = "block";
}

function clearError() {
  banner.style.display = "none";
}

function parseQueries(): string[] {
  return queryInput.value
    .split(",")
    .map((q) => q.trim())
    .filter((q) => q.length > 0);
}

function currentColors(): RGB[] {
  return session.pointColors() ?? baseColors;
}

function redraw() {
  const options = { ...DEFAULT_OPTIONS, pointSize: Number(sizeSlider.value) };
  const drawn = drawPoints(ctx, positions, currentColors(), orbit, options);
  statusLine.textContent = session.current
    ? `queries: ${session.current.result.queries.join(" | ")} (${drawn} points drawn)`
    : `${positions.length} points loaded (${drawn} drawn)`;
}

function refreshControls() {
  submitBtn.disabled = !session.canSubmit(parseQueries());
  exportBtn.disabled = !session.canExport;
  const queries = session.current?.result.queries ?? [];
  modeSelect.innerHTML = "";
  const argmax = document.createElement("option");
  argmax.value = "argmax";
  argmax.textContent = "argmax (gray = no label)";
  modeSelect.appendChild(argmax);
  queries.forEach((q, i) => {
    const opt = document.createElement("option");
    opt.value = `heatmap:${i}`;
    opt.textContent = `heatmap: ${q}`;
    modeSelect.appendChild(opt);
  });
  modeSelect.value =
    session.mode.kind === "argmax" ? "argmax" : `heatmap:${session.mode.queryIndex}`;
  historyList.innerHTML = "";
  for (const entry of session.history.slice(-12).reverse()) {
    const li = document.createElement("li");
    li.textContent = entry.join(", ");
    li.onclick = () => {
      queryInput.value = entry.join(", ");
      refreshControls();
    };
    historyList.appendChild(li);
  }
}

async function loadObject(id: string) {
  clearError();
  try {
    const data = await api.getPoints(id);
    session.selectObject(id);
    positions = normalizePositions(data.positions);
    baseColors = data.colors as RGB[];
    orbit = defaultOrbit();
    refreshControls();
    redraw();
  } catch (err) {
    showError(`failed to load object ${id}: ${err}`);
  }
}

async function boot() {
  try {
    const objects = await api.listObjects();
    if (objects.length === 0) {
      showError("the service reports an empty dataset");
      return;
    }
    for (const obj of objects) {
      const opt = document.createElement("option");
      opt.value = obj.id;
      opt.textContent = `${obj.id} (${obj.category}, ${obj.n_points} pts)`;
      objectSelect.appendChild(opt);
    }
    objectSelect.onchange = () => void loadObject(objectSelect.value);
    await loadObject(objects[0].id);
  } catch (err) {
    showError(`cannot reach the service at ${baseUrl}: ${err}`);
  }
}

submitBtn.onclick = async () => {
  clearError();
  const queries = parseQueries();
  if (!session.canSubmit(queries)) return;
  refreshControls();
  try {
    await session.submitQueries(queries);
    session.setMode({ kind: "argmax" });
  } catch (err) {
    showError(`query failed: ${err}`);
  }
  refreshControls();
  redraw();
};

exportBtn.onclick = () => {
  if (!session.canExport) return;
  const blob = new Blob([session.exportView()], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = `${session.objectId ?? "result"}.query.json`;
  a.click();
  URL.revokeObjectURL(a.href);
};

modeSelect.onchange = () => {
  // heatmap switching re-colors purely from the cached scores: no request
  if (modeSelect.value === "argmax") session.setMode({ kind: "argmax" });
  else session.setMode({ kind: "heatmap", queryIndex: Number(modeSelect.value.split(":")[1]) });
  redraw();
};

sizeSlider.oninput = () => redraw();
queryInput.oninput = () => refreshControls();

let dragging = false;
let lastX = 0;
let lastY = 0;
canvas.onmousedown = (e) => {
  dragging = true;
  lastX = e.clientX;
  lastY = e.clientY;
};
window.onmouseup = () => (dragging = false);
window.onmousemove = (e) => {
  if (!dragging) return;
  orbit = rotateOrbit(orbit, -(e.clientX - lastX) * 0.008, (e.clientY - lastY) * 0.008);
  lastX = e.clientX;
  lastY = e.clientY;
  redraw();
};
canvas.onwheel = (e) => {
  e.preventDefault();
  orbit = zoomOrbit(orbit, e.deltaY > 0 ? 1.1 : 0.9);
  redraw();
};

document.getElementById("nolabel-swatch")!.style.background =
  `rgb(${NO_LABEL_COLOR.map((v) => Math.round(v * 255)).join(",")})`;

void boot();
