// Canvas rendering of the workspace: corridors, goal discs, start disc, the
// effector trail, an optional visitation heatmap overlay and a phase banner
// during takeovers. Drawing goes through a plain 2D-context interface so
// tests can record the calls.

import type { EnvConfigDoc, HeatmapMsg, StateMsg } from "./protocol.js";

export type Ctx2D = {
  canvas: { width: number; height: number };
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  globalAlpha: number;
  lineWidth: number;
  font: string;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
};

export type UiState = {
  config: EnvConfigDoc | null;
  latest: StateMsg | null;
  trail: [number, number][];
  heatmaps: Map<number, HeatmapMsg>;
  overlays: { heatmap: boolean; corridors: boolean; trail: boolean };
  clutch: boolean;
  connected: boolean;
};

export function newUiState(): UiState {
  return {
    config: null,
    latest: null,
    trail: [],
    heatmaps: new Map(),
    overlays: { heatmap: false, corridors: true, trail: true },
    clutch: false,
    connected: false,
  };
}

export function pushState(ui: UiState, msg: StateMsg, trailLimit = 600): void {
  if (ui.latest && msg.episode !== ui.latest.episode) {
    ui.trail = [];
  }
  ui.latest = msg;
  ui.trail.push([msg.pos[0], msg.pos[1]]);
  if (ui.trail.length > trailLimit) ui.trail.shift();
}

const STAGE_COLORS = ["#3a7bd5", "#7b52ab", "#2f9e68", "#d5823a", "#b03a48", "#3aa7b0"];

export function renderFrame(ctx: Ctx2D, ui: UiState): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  const X = (x: number) => x * w;
  const Y = (y: number) => (1 - y) * h; // workspace y up, canvas y down
  ctx.clearRect(0, 0, w, h);
  ctx.globalAlpha = 1;
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, w, h);
  const cfg = ui.config;
  if (!cfg) {
    ctx.fillStyle = "#ccc";
    ctx.fillText("waiting for config...", w / 2 - 50, h / 2);
    return;
  }

  if (ui.overlays.heatmap && ui.latest) {
    const hm = ui.heatmaps.get(Math.min(ui.latest.stage, cfg.num_stages - 1));
    if (hm) drawHeatmap(ctx, hm, X, Y, w, h);
  }

  // start disc
  ctx.globalAlpha = 0.25;
  ctx.fillStyle = "#4e5d78";
  ctx.beginPath();
  ctx.arc(X(cfg.start_center[0]), Y(cfg.start_center[1]), cfg.start_radius * w, 0, Math.PI * 2);
  ctx.fill();
  ctx.globalAlpha = 1;

  if (ui.overlays.corridors) {
    for (let i = 0; i < cfg.num_stages; i++) {
      const [ex, ey] = cfg.entries[i];
      const [gx, gy] = cfg.goals[i];
      ctx.strokeStyle = STAGE_COLORS[i % STAGE_COLORS.length];
      ctx.globalAlpha = 0.55;
      ctx.lineWidth = 2 * cfg.corridor_halfwidth * w;
      ctx.beginPath();
      ctx.moveTo(X(ex), Y(ey));
      ctx.lineTo(X(gx), Y(gy));
      ctx.stroke();
      ctx.globalAlpha = 1;
      ctx.lineWidth = 1;
      // goal disc
      ctx.fillStyle = STAGE_COLORS[i % STAGE_COLORS.length];
      ctx.beginPath();
      ctx.arc(X(gx), Y(gy), cfg.goal_radius * w, 0, Math.PI * 2);
      ctx.fill();
    }
  }

  if (ui.overlays.trail && ui.trail.length > 1) {
    ctx.strokeStyle = "#e8e8e8";
    ctx.globalAlpha = 0.8;
    ctx.beginPath();
    ctx.moveTo(X(ui.trail[0][0]), Y(ui.trail[0][1]));
    for (const [x, y] of ui.trail.slice(1)) ctx.lineTo(X(x), Y(y));
    ctx.stroke();
    ctx.globalAlpha = 1;
  }

  const st = ui.latest;
  if (st) {
    ctx.fillStyle = ui.clutch ? "#ffd23f" : "#ffffff";
    ctx.beginPath();
    ctx.arc(X(st.pos[0]), Y(st.pos[1]), 5, 0, Math.PI * 2);
    ctx.fill();
    if (st.phase === "recovery" || st.phase === "correction") {
      ctx.fillStyle = st.phase === "recovery" ? "#ff9f43" : "#2ecc71";
      ctx.fillRect(0, 0, w, 22);
      ctx.fillStyle = "#0b0e14";
      ctx.fillText(`takeover: ${st.phase}`, 8, 15);
    }
    if (st.status !== "running") {
      ctx.fillStyle = st.status === "success" ? "#2ecc71" : "#e74c3c";
      ctx.fillRect(0, h / 2 - 14, w, 28);
      ctx.fillStyle = "#0b0e14";
      ctx.fillText(st.status === "success" ? "success" : `failed (${st.event})`, w / 2 - 30, h / 2 + 4);
    }
  }
  if (!ui.connected) {
    ctx.fillStyle = "#e74c3c";
    ctx.fillRect(0, h - 20, w, 20);
    ctx.fillStyle = "#fff";
    ctx.fillText("disconnected - retrying...", 8, h - 6);
  }
}

function drawHeatmap(
  ctx: Ctx2D,
  hm: HeatmapMsg,
  X: (x: number) => number,
  Y: (y: number) => number,
  w: number,
  h: number,
): void {
  const res = hm.resolution;
  let peak = 1;
  for (const row of hm.counts) for (const c of row) peak = Math.max(peak, c);
  const cw = w / res;
  const ch = h / res;
  for (let r = 0; r < res; r++) {
    for (let c = 0; c < res; c++) {
      const n = hm.counts[r][c];
      if (n <= 0) continue;
      ctx.globalAlpha = Math.min(0.65, 0.12 + 0.5 * (n / peak));
      ctx.fillStyle = "#28d7c4";
      // row r covers workspace y in [r/res, (r+1)/res)
      ctx.fillRect(c * cw, h - (r + 1) * ch, cw, ch);
    }
  }
  ctx.globalAlpha = 1;
}
