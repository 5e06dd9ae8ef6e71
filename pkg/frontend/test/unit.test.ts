import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { describe, expect, it } from "vitest";

import { InputLoop, SENSITIVITY } from "../src/input.js";
import { makeClientValidator, type WireSchema } from "../src/schemaCheck.js";
import { column, numericColumn, parseCsv, scalingSeries, drawLineChart, drawScatter } from "../src/charts.js";
import { newUiState, pushState, renderFrame, type Ctx2D } from "../src/render.js";
import type { ClientMsg, StateMsg } from "../src/protocol.js";

const here = dirname(fileURLToPath(import.meta.url));
const schemaDoc = JSON.parse(
  readFileSync(join(here, "..", "..", "schema", "ws_messages.schema.json"), "utf-8"),
) as WireSchema;
const isValidClientMsg = makeClientValidator(schemaDoc);

describe("outbound message schema conformance", () => {
  it("accepts every message the input loop can emit", () => {
    const loop = new InputLoop();
    loop.clutchDown();
    loop.mouseMove(10, -4);
    loop.markRecoveryDone();
    loop.requestReset();
    const msgs = loop.flush();
    loop.clutchUp();
    msgs.push(...loop.flush());
    msgs.push({ type: "get_heatmap", stage: 2 });
    expect(msgs.length).toBeGreaterThanOrEqual(5);
    for (const m of msgs) {
      expect(isValidClientMsg(m), JSON.stringify(m)).toBe(true);
    }
  });

  it("rejects malformed messages", () => {
    expect(isValidClientMsg({ type: "move", dx: 1 })).toBe(false);
    expect(isValidClientMsg({ type: "clutch", engaged: "yes" })).toBe(false);
    expect(isValidClientMsg({ type: "teleport", x: 1 })).toBe(false);
    expect(isValidClientMsg({ type: "get_heatmap", stage: -1 })).toBe(false);
  });
});

describe("input loop", () => {
  it("emits clutch true exactly once while held and false once on release", () => {
    const loop = new InputLoop();
    loop.clutchDown();
    loop.clutchDown();
    const first = loop.flush();
    expect(first.filter((m) => m.type === "clutch")).toEqual([{ type: "clutch", engaged: true }]);
    expect(loop.flush()).toEqual([]); // held with no motion: nothing to say
    loop.clutchUp();
    loop.clutchUp();
    const last = loop.flush();
    expect(last).toEqual([{ type: "clutch", engaged: false }]);
  });

  it("suppresses zero-delta move messages", () => {
    const loop = new InputLoop();
    loop.clutchDown();
    loop.flush();
    loop.mouseMove(0, 0);
    expect(loop.flush().filter((m) => m.type === "move")).toEqual([]);
  });

  it("scales a 10-pixel drag to 0.02 total dx across messages", () => {
    const loop = new InputLoop();
    loop.clutchDown();
    loop.flush();
    let total = 0;
    for (const px of [3, 4, 3]) {
      loop.mouseMove(px, 0);
      for (const m of loop.flush()) {
        if (m.type === "move") total += m.dx;
      }
    }
    expect(total).toBeCloseTo(10 * SENSITIVITY, 10);
    expect(10 * SENSITIVITY).toBeCloseTo(0.02, 10);
  });

  it("ignores motion while disengaged", () => {
    const loop = new InputLoop();
    loop.mouseMove(50, 50);
    expect(loop.flush()).toEqual([]);
  });
});

describe("csv parsing and chart mapping", () => {
  const csv = [
    "protocol,round,frames_charged_cum,success_rate,wilson_lo,wilson_hi,progress_mean",
    "rac,0,5000,0.2,0.1,0.3,2.0",
    "rac,1,10000,0.5,0.4,0.6,3.0",
    "batched,0,5000,0.2,0.1,0.3,2.0",
    "batched,1,10000,0.25,0.15,0.35,2.2",
  ].join("\n");

  it("parses columns", () => {
    const table = parseCsv(csv);
    expect(table.header[0]).toBe("protocol");
    expect(table.rows).toHaveLength(4);
    expect(column(table, "protocol")).toEqual(["rac", "rac", "batched", "batched"]);
    expect(numericColumn(table, "success_rate")).toEqual([0.2, 0.5, 0.2, 0.25]);
  });

  it("groups scaling series by protocol", () => {
    const series = scalingSeries(parseCsv(csv));
    expect(series.map((s) => s.label).sort()).toEqual(["batched", "rac"]);
    const rac = series.find((s) => s.label === "rac")!;
    expect(rac.xs).toEqual([5000, 10000]);
    expect(rac.ys).toEqual([0.2, 0.5]);
  });

  it("handles empty tables", () => {
    expect(parseCsv("").rows).toEqual([]);
  });
});

type Op = { op: string; args: unknown[] };

function fakeCtx(width = 200, height = 200): { ctx: Ctx2D; ops: Op[] } {
  const ops: Op[] = [];
  const rec =
    (op: string) =>
    (...args: unknown[]) => {
      ops.push({ op, args });
    };
  const ctx = {
    canvas: { width, height },
    fillStyle: "",
    strokeStyle: "",
    globalAlpha: 1,
    lineWidth: 1,
    font: "",
    beginPath: rec("beginPath"),
    moveTo: rec("moveTo"),
    lineTo: rec("lineTo"),
    arc: rec("arc"),
    stroke: rec("stroke"),
    fill: rec("fill"),
    fillRect: rec("fillRect"),
    clearRect: rec("clearRect"),
    fillText: rec("fillText"),
  } as unknown as Ctx2D;
  return { ctx, ops };
}

const config = {
  num_stages: 4,
  entries: [
    [0.2, 0.2],
    [0.25, 0.8],
    [0.6, 0.8],
    [0.85, 0.75],
  ],
  goals: [
    [0.2, 0.8],
    [0.55, 0.8],
    [0.85, 0.8],
    [0.85, 0.2],
  ],
  corridor_halfwidth: 0.06,
  goal_radius: 0.03,
  start_center: [0.1, 0.1],
  start_radius: 0.15,
} as never;

function stateMsg(over: Partial<StateMsg> = {}): StateMsg {
  return {
    type: "state",
    t: 1,
    pos: [0.3, 0.4],
    stage: 0,
    status: "running",
    event: "none",
    phase: "auto",
    episode: 0,
    ...over,
  };
}

describe("render", () => {
  it("draws one corridor stroke per stage at the configured coordinates", () => {
    const ui = newUiState();
    ui.config = config;
    pushState(ui, stateMsg());
    const { ctx, ops } = fakeCtx();
    renderFrame(ctx, ui);
    const moves = ops.filter((o) => o.op === "moveTo");
    // trail also moves once; corridors contribute num_stages moveTo calls
    expect(moves.length).toBeGreaterThanOrEqual(4);
    const corridorMove = moves.find(
      (o) => Math.abs((o.args[0] as number) - 0.2 * 200) < 1e-9,
    );
    expect(corridorMove).toBeTruthy();
  });

  it("shows a phase banner during takeovers", () => {
    const ui = newUiState();
    ui.config = config;
    pushState(ui, stateMsg({ phase: "recovery" }));
    const { ctx, ops } = fakeCtx();
    renderFrame(ctx, ui);
    const texts = ops.filter((o) => o.op === "fillText").map((o) => String(o.args[0]));
    expect(texts.some((t) => t.includes("recovery"))).toBe(true);
  });

  it("draws the heatmap overlay from the cached grid without any request", () => {
    const ui = newUiState();
    ui.config = config;
    ui.overlays.heatmap = true;
    ui.heatmaps.set(0, { type: "heatmap", resolution: 2, stage: 0, counts: [[0, 3], [1, 0]] });
    pushState(ui, stateMsg());
    const { ctx, ops } = fakeCtx();
    renderFrame(ctx, ui);
    // two nonzero cells drawn as rects on top of background + banner rects
    const rects = ops.filter((o) => o.op === "fillRect");
    expect(rects.length).toBeGreaterThanOrEqual(3);
  });

  it("announces success and disconnection", () => {
    const ui = newUiState();
    ui.config = config;
    ui.connected = false;
    pushState(ui, stateMsg({ status: "success" }));
    const { ctx, ops } = fakeCtx();
    renderFrame(ctx, ui);
    const texts = ops.filter((o) => o.op === "fillText").map((o) => String(o.args[0]));
    expect(texts.some((t) => t.includes("success"))).toBe(true);
    expect(texts.some((t) => t.includes("disconnected"))).toBe(true);
  });

  it("trail resets between episodes", () => {
    const ui = newUiState();
    ui.config = config;
    pushState(ui, stateMsg({ episode: 0 }));
    pushState(ui, stateMsg({ episode: 0, t: 2 }));
    expect(ui.trail).toHaveLength(2);
    pushState(ui, stateMsg({ episode: 1, t: 0 }));
    expect(ui.trail).toHaveLength(1);
  });
});

describe("charts draw without error", () => {
  it("line chart and scatter handle data and empty input", () => {
    const { ctx } = fakeCtx();
    drawLineChart(ctx, scalingSeries(parseCsv("protocol,round,frames_charged_cum,success_rate,wilson_lo,wilson_hi,progress_mean\nrac,0,5000,0.5,0.4,0.6,2")), { title: "t", yMax: 1 });
    drawLineChart(ctx, [], { title: "empty" });
    drawScatter(ctx, [1, 2], [0.1, 0.4], { title: "s", r: 0.9 });
    drawScatter(ctx, [], [], { title: "empty" });
  });
});
