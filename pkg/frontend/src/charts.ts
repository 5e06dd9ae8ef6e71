// Dashboard charts: the analyses arrive as CSV from the server (single
// source of truth; nothing is recomputed client-side) and are drawn as
// simple canvas line/scatter plots.

import type { Ctx2D } from "./render.js";

export type CsvTable = { header: string[]; rows: string[][] };

export function parseCsv(text: string): CsvTable {
  const lines = text.trim().split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) return { header: [], rows: [] };
  const header = lines[0].split(",");
  const rows = lines.slice(1).map((l) => l.split(","));
  return { header, rows };
}

export function column(table: CsvTable, name: string): string[] {
  const idx = table.header.indexOf(name);
  if (idx < 0) throw new Error(`csv column ${name} missing`);
  return table.rows.map((r) => r[idx]);
}

export function numericColumn(table: CsvTable, name: string): number[] {
  return column(table, name).map((v) => Number(v));
}

export type Series = { label: string; xs: number[]; ys: number[]; color: string };

export function scalingSeries(table: CsvTable): Series[] {
  const protos = column(table, "protocol");
  const xs = numericColumn(table, "frames_charged_cum");
  const ys = numericColumn(table, "success_rate");
  const colors: Record<string, string> = {
    rac: "#2ecc71",
    rule2only: "#3a7bd5",
    hgdagger: "#d5823a",
    batched: "#b03a48",
  };
  const byProto = new Map<string, Series>();
  protos.forEach((p, i) => {
    if (!byProto.has(p)) byProto.set(p, { label: p, xs: [], ys: [], color: colors[p] ?? "#ccc" });
    const s = byProto.get(p)!;
    s.xs.push(xs[i]);
    s.ys.push(ys[i]);
  });
  return [...byProto.values()];
}

export function drawLineChart(
  ctx: Ctx2D,
  series: Series[],
  opts: { title: string; yMax?: number } = { title: "" },
): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  const pad = 34;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, w, h);
  const xsAll = series.flatMap((s) => s.xs);
  const ysAll = series.flatMap((s) => s.ys);
  if (xsAll.length === 0) {
    ctx.fillStyle = "#ccc";
    ctx.fillText("no data", w / 2 - 20, h / 2);
    return;
  }
  const xMin = Math.min(...xsAll);
  const xMax = Math.max(...xsAll, xMin + 1e-9);
  const yMax = opts.yMax ?? Math.max(...ysAll, 1e-9);
  const X = (x: number) => pad + ((x - xMin) / (xMax - xMin)) * (w - 2 * pad);
  const Y = (y: number) => h - pad - (y / yMax) * (h - 2 * pad);
  ctx.strokeStyle = "#39414f";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.xs.forEach((x, i) => {
      if (i === 0) ctx.moveTo(X(x), Y(s.ys[i]));
      else ctx.lineTo(X(x), Y(s.ys[i]));
    });
    ctx.stroke();
    for (let i = 0; i < s.xs.length; i++) {
      ctx.fillStyle = s.color;
      ctx.beginPath();
      ctx.arc(X(s.xs[i]), Y(s.ys[i]), 3, 0, Math.PI * 2);
      ctx.fill();
    }
  }
  ctx.fillStyle = "#e8e8e8";
  ctx.fillText(opts.title, pad, 16);
  let lx = pad + 4;
  for (const s of series) {
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, lx, 28);
    lx += 9 * s.label.length;
  }
}

export function drawScatter(
  ctx: Ctx2D,
  xs: number[],
  ys: number[],
  opts: { title: string; r?: number | null } = { title: "" },
): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  const pad = 34;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#10141c";
  ctx.fillRect(0, 0, w, h);
  if (xs.length === 0) {
    ctx.fillStyle = "#ccc";
    ctx.fillText("no data", w / 2 - 20, h / 2);
    return;
  }
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs, xMin + 1e-9);
  const yMin = 0;
  const yMax = Math.max(...ys, 1e-9);
  const X = (x: number) => pad + ((x - xMin) / (xMax - xMin)) * (w - 2 * pad);
  const Y = (y: number) => h - pad - ((y - yMin) / (yMax - yMin)) * (h - 2 * pad);
  ctx.strokeStyle = "#39414f";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#28d7c4";
  for (let i = 0; i < xs.length; i++) {
    ctx.beginPath();
    ctx.arc(X(xs[i]), Y(ys[i]), 4, 0, Math.PI * 2);
    ctx.fill();
  }
  ctx.fillStyle = "#e8e8e8";
  const rTxt = opts.r === null || opts.r === undefined ? "" : `  r=${opts.r.toFixed(3)}`;
  ctx.fillText(opts.title + rTxt, pad, 16);
}
