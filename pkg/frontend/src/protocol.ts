// Message types shared with the simulation server. The authoritative wire
// contract lives in schema/ws_messages.schema.json; these types mirror it.

export type ClutchMsg = { type: "clutch"; engaged: boolean };
export type MoveMsg = { type: "move"; dx: number; dy: number };
export type ResetMsg = { type: "reset" };
export type MarkMsg = { type: "mark"; what: "recovery_done" };
export type GetHeatmapMsg = { type: "get_heatmap"; stage: number };
export type ClientMsg = ClutchMsg | MoveMsg | ResetMsg | MarkMsg | GetHeatmapMsg;

export type StateMsg = {
  type: "state";
  t: number;
  pos: [number, number];
  stage: number;
  status: "running" | "success" | "failed";
  event: string;
  phase: "auto" | "recovery" | "correction";
  episode: number;
};

export type HeatmapMsg = {
  type: "heatmap";
  resolution: number;
  stage: number;
  counts: number[][];
};

export type EnvConfigDoc = {
  num_stages: number;
  entries: [number, number][];
  goals: [number, number][];
  corridor_halfwidth: number;
  goal_radius: number;
  start_center: [number, number];
  start_radius: number;
  [k: string]: unknown;
};

export type ConfigMsg = {
  type: "config";
  env: EnvConfigDoc;
  mode?: string;
  protocol?: string;
};

export type ReportMsg = { type: "report"; [k: string]: unknown };
export type ErrorMsg = { type: "error"; msg: string };
export type ServerMsg = StateMsg | HeatmapMsg | ConfigMsg | ReportMsg | ErrorMsg;

export function parseServerMsg(raw: string): ServerMsg | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof doc !== "object" || doc === null || !("type" in doc)) return null;
  return doc as ServerMsg;
}
