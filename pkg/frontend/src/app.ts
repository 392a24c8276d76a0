// The annotation console: parameter panel, candidate grid with progress
// checkmarks, click workspace, and the START/CONFIRM/NEXT/FINE-TUNE flow.
// The server is the source of truth; the app re-renders from polled state.

import { api, CandidateBody, CandidatesBody, StatusBody } from "./api";
import { attentionToRgba, Palette } from "./palette";
import {
  WorkspaceState,
  addPositivePoint,
  buildPayload,
  clearMarks,
  emptyWorkspace,
  hasMarks,
  loadCandidate,
  regionAt,
  toggleNegativeRegion,
} from "./state";

const DISPLAY = 256;

export interface App {
  root: HTMLElement;
  refresh(): Promise<void>;
  workspace: WorkspaceState;
  /** Per-image pending payload flags, keyed by image id (local confirm marks). */
  confirmed: Set<string>;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className: string,
  parent?: HTMLElement,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (parent) parent.appendChild(node);
  return node;
}

export function createApp(root: HTMLElement, palette: Palette): App {
  root.innerHTML = "";
  const banner = el("div", "banner", root);
  const panel = el("div", "panel", root);
  const grid = el("div", "candidate-grid", root);
  const work = el("div", "workspace", root);
  const canvas = el("canvas", "easel", work);
  canvas.width = DISPLAY;
  canvas.height = DISPLAY;
  const controls = el("div", "controls", root);
  const metricsView = el("div", "metrics", root);

  const startBtn = el("button", "start", controls);
  startBtn.textContent = "START";
  const confirmBtn = el("button", "confirm", controls);
  confirmBtn.textContent = "CONFIRM";
  const nextBtn = el("button", "next", controls);
  nextBtn.textContent = "NEXT";
  const clearBtn = el("button", "clear", controls);
  clearBtn.textContent = "CLEAR";

  const strategyInput = el("select", "strategy", panel);
  for (const s of ["attention", "random", "entropy", "diversity"]) {
    const opt = document.createElement("option");
    opt.value = s;
    opt.textContent = s;
    strategyInput.appendChild(opt);
  }
  const modeToggle = el("button", "mode-toggle", panel);
  modeToggle.textContent = "mode: test";
  let metricMode: "train" | "test" = "test";

  const workspace = emptyWorkspace([DISPLAY, DISPLAY]);
  const confirmed = new Set<string>();
  let status: StatusBody = { phase: "idle", error: null };
  let candidates: CandidatesBody | null = null;

  function renderBanner(): void {
    if (status.error) {
      banner.textContent = `error in round ${status.error.round}: ${status.error.message}`;
      banner.dataset.kind = "error";
    } else if (status.phase === "training") {
      banner.textContent = `training (round ${status.round})`;
      banner.dataset.kind = "busy";
    } else {
      banner.textContent = status.phase;
      banner.dataset.kind = "ok";
    }
  }

  function renderGrid(): void {
    grid.innerHTML = "";
    if (!candidates) return;
    for (const cand of candidates.candidates) {
      const cell = el("div", "candidate", grid);
      cell.dataset.imageId = cand.image_id;
      const img = el("img", "thumb", cell);
      img.src = cand.image_url;
      const check = el("span", "check", cell);
      const done = cand.annotated || confirmed.has(cand.image_id);
      check.textContent = done ? "✓" : "";
      cell.classList.toggle("done", done);
      cell.addEventListener("click", () => {
        loadCandidate(workspace, cand);
        renderWorkspace();
      });
    }
  }

  function renderWorkspace(): void {
    const ctx = canvas.getContext("2d");
    if (!ctx || !workspace.candidate) return;
    ctx.clearRect(0, 0, DISPLAY, DISPLAY);
    const overlay = attentionToRgba(workspace.candidate.attention, palette);
    // draw at grid resolution, then scale to the display
    const off = document.createElement("canvas");
    off.width = overlay.width;
    off.height = overlay.height;
    off
      .getContext("2d")
      ?.putImageData(new ImageData(overlay.data, overlay.width, overlay.height), 0, 0);
    ctx.globalAlpha = workspace.overlayOpacity;
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, DISPLAY, DISPLAY);
    ctx.globalAlpha = 1.0;
    // bare cross markers for positive clicks
    ctx.strokeStyle = "#00ff66";
    for (const [x, y] of workspace.positivePoints) {
      ctx.beginPath();
      ctx.moveTo(x - 5, y);
      ctx.lineTo(x + 5, y);
      ctx.moveTo(x, y - 5);
      ctx.lineTo(x, y + 5);
      ctx.stroke();
    }
  }

  function allLabeled(): boolean {
    if (!candidates || candidates.candidates.length === 0) return false;
    return candidates.candidates.every((c) => c.annotated || confirmed.has(c.image_id));
  }

  function renderControls(): void {
    const busy = status.phase === "training";
    startBtn.textContent = status.phase === "idle" ? "START" : "STOP";
    startBtn.disabled = busy;
    confirmBtn.disabled = busy || status.phase === "idle";
    clearBtn.disabled = busy || status.phase === "idle";
    // NEXT becomes FINE-TUNE once every shown candidate is labeled
    nextBtn.textContent = allLabeled() ? "FINE-TUNE" : "NEXT";
    nextBtn.disabled = busy || status.phase === "idle";
  }

  function renderMetrics(rows: { round: number; [k: string]: number | undefined }[]): void {
    metricsView.innerHTML = "";
    const accKey = metricMode === "test" ? "accuracy_decorrelated" : "accuracy_biased";
    for (const row of rows) {
      const line = el("div", "metric-row", metricsView);
      const att = row.attention_in_target;
      line.textContent =
        `round ${row.round}: acc ${(row[accKey] ?? 0).toFixed(4)}` +
        (att === undefined ? "" : `, att-in-target ${att.toFixed(3)}`);
    }
  }

  async function refresh(): Promise<void> {
    status = await api.status();
    if (status.phase !== "idle") {
      try {
        candidates = await api.candidates();
        const m = await api.metrics();
        renderMetrics(m.metric_history);
      } catch {
        candidates = null;
      }
    } else {
      candidates = null;
      metricsView.innerHTML = "";
    }
    renderBanner();
    renderGrid();
    renderControls();
  }

  canvas.addEventListener("mousedown", (ev: MouseEvent) => {
    const rect = canvas.getBoundingClientRect();
    const point: [number, number] = [ev.clientX - rect.left, ev.clientY - rect.top];
    if (ev.button === 0) addPositivePoint(workspace, point);
    else if (ev.button === 2) toggleNegativeRegion(workspace, point);
    else if (ev.button === 1) clearMarks(workspace);
    renderWorkspace();
    ev.preventDefault();
  });
  canvas.addEventListener("contextmenu", (ev) => ev.preventDefault());

  clearBtn.addEventListener("click", () => {
    clearMarks(workspace);
    renderWorkspace();
  });

  startBtn.addEventListener("click", async () => {
    if (status.phase === "idle") {
      await api.startSession({ strategy: strategyInput.value });
    } else {
      await api.stopSession();
      confirmed.clear();
    }
    await refresh();
  });

  confirmBtn.addEventListener("click", async () => {
    if (!workspace.candidate || !hasMarks(workspace)) return;
    const payload = buildPayload(workspace, Date.now() / 1000);
    const out = await api.annotations([payload]);
    for (const id of out.accepted) confirmed.add(id);
    await refresh();
  });

  nextBtn.addEventListener("click", async () => {
    if (allLabeled()) {
      try {
        await api.finetune();
        confirmed.clear();
      } catch {
        // conflict: already training — the banner shows it on next poll
      }
    } else {
      await api.next();
    }
    await refresh();
  });

  strategyInput.addEventListener("change", async () => {
    try {
      await api.patchConfig({ strategy: strategyInput.value });
    } catch {
      // rejected while training; next poll restores the view
    }
  });

  modeToggle.addEventListener("click", async () => {
    metricMode = metricMode === "test" ? "train" : "test";
    modeToggle.textContent = `mode: ${metricMode}`;
    await refresh();
  });

  return { root, refresh, workspace, confirmed };
}

export function startPolling(app: App, intervalMs = 1500): number {
  return window.setInterval(() => void app.refresh(), intervalMs);
}

// Exported for tests that need the public hit-test on the live workspace.
export { regionAt };
