// Operator console entry point: wires the socket, the input loop, the canvas
// renderer and the dashboard charts together. Runs in the browser only; the
// logic worth testing lives in the imported modules.

import { InputLoop } from "./input.js";
import { newUiState, pushState, renderFrame } from "./render.js";
import { parseServerMsg } from "./protocol.js";
import { drawLineChart, drawScatter, numericColumn, parseCsv, scalingSeries } from "./charts.js";

function main(): void {
  const canvas = document.getElementById("workspace") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  const scalingCanvas = document.getElementById("scaling") as HTMLCanvasElement | null;
  const testtimeCanvas = document.getElementById("testtime") as HTMLCanvasElement | null;
  const statusEl = document.getElementById("status")!;

  const ui = newUiState();
  const input = new InputLoop();
  let socket: WebSocket | null = null;

  function connect(): void {
    socket = new WebSocket(`ws://${location.host}/ws`);
    socket.onopen = () => {
      ui.connected = true;
      statusEl.textContent = "connected";
    };
    socket.onclose = () => {
      ui.connected = false;
      statusEl.textContent = "disconnected - retrying";
      setTimeout(connect, 1000);
    };
    socket.onmessage = (ev) => {
      const msg = parseServerMsg(String(ev.data));
      if (!msg) return;
      if (msg.type === "state") {
        pushState(ui, msg);
        statusEl.textContent =
          `ep ${msg.episode}  t ${msg.t}  stage ${msg.stage}  ${msg.status}` +
          (msg.phase !== "auto" ? `  [${msg.phase}]` : "");
      } else if (msg.type === "config") {
        ui.config = msg.env;
      } else if (msg.type === "heatmap") {
        ui.heatmaps.set(msg.stage, msg);
      } else if (msg.type === "error") {
        console.warn("server:", msg.msg);
      }
    };
  }
  connect();

  window.addEventListener("keydown", (e) => {
    if (e.repeat) return;
    if (e.code === "Space") {
      e.preventDefault();
      input.clutchDown();
      ui.clutch = true;
    } else if (e.code === "KeyH") {
      ui.overlays.heatmap = !ui.overlays.heatmap;
      const stage = ui.latest?.stage ?? 0;
      if (ui.overlays.heatmap && !ui.heatmaps.has(stage) && socket?.readyState === WebSocket.OPEN) {
        socket.send(JSON.stringify({ type: "get_heatmap", stage }));
      }
    } else if (e.code === "KeyR") {
      input.requestReset();
    } else if (e.code === "KeyM") {
      input.markRecoveryDone();
    } else if (e.code === "KeyT") {
      ui.overlays.trail = !ui.overlays.trail;
    } else if (e.code === "KeyC") {
      ui.overlays.corridors = !ui.overlays.corridors;
    }
  });
  window.addEventListener("keyup", (e) => {
    if (e.code === "Space") {
      input.clutchUp();
      ui.clutch = false;
    }
  });
  canvas.addEventListener("mousemove", (e) => {
    input.mouseMove(e.movementX, e.movementY);
  });

  function frame(): void {
    if (socket && socket.readyState === WebSocket.OPEN) {
      for (const msg of input.flush()) {
        socket.send(JSON.stringify(msg));
      }
    }
    renderFrame(ctx as never, ui);
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);

  async function loadCharts(): Promise<void> {
    if (!scalingCanvas && !testtimeCanvas) return;
    try {
      if (scalingCanvas) {
        const res = await fetch("/csv/scaling");
        if (res.ok) {
          const table = parseCsv(await res.text());
          drawLineChart(scalingCanvas.getContext("2d")! as never, scalingSeries(table), {
            title: "success rate vs charged frames",
            yMax: 1,
          });
        }
      }
      if (testtimeCanvas) {
        const res = await fetch("/csv/testtime");
        if (res.ok) {
          const table = parseCsv(await res.text());
          const xs = numericColumn(table, "mean_recovery_events_successful");
          const ys = numericColumn(table, "success_rate");
          const rCol = table.header.includes("pearson_r") ? numericColumn(table, "pearson_r") : [];
          drawScatter(testtimeCanvas.getContext("2d")! as never, xs, ys, {
            title: "recovery events vs success",
            r: rCol.length ? rCol[0] : null,
          });
        }
      }
    } catch (err) {
      console.warn("charts unavailable:", err);
    }
  }
  void loadCharts();
  setInterval(loadCharts, 15000);
}

window.addEventListener("DOMContentLoaded", main);
