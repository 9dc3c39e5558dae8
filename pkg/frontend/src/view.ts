// Top-down skeleton view. Rendering is a pure function of the view model and
// an interpolation clock, so tests drive it with a recording 2D context.

import type { FrameMessage, FrameState } from "./protocol.js";

export interface ViewModel {
  connection: "connecting" | "live" | "lost";
  frame: FrameMessage | null;
  prevFrame: FrameMessage | null;
  frameReceivedAt: number; // ms clock time when `frame` arrived
  activeDb: string;
  commandedGoal: { vx: number; vy: number };
  latencyMs: number;
  databases: string[];
}

export function emptyViewModel(): ViewModel {
  return {
    connection: "connecting",
    frame: null,
    prevFrame: null,
    frameReceivedAt: 0,
    activeDb: "",
    commandedGoal: { vx: 0, vy: 0 },
    latencyMs: 0,
    databases: [],
  };
}

const TICK_MS = 1000 / 30;

// Character tint keyed by the active database, echoing the convention of
// coloring the character by its expert style source.
const DB_TINTS: Record<string, string> = {
  walk: "#b9bdc4",
  run: "#7fa8d6",
  turn: "#86c7a5",
  skip: "#d6a87f",
  zombie: "#c9d67f",
  cartwheel: "#a5682a",
};

export function dbTint(name: string): string {
  if (name in DB_TINTS) return DB_TINTS[name];
  let h = 0;
  for (let i = 0; i < name.length; i++) h = (h * 31 + name.charCodeAt(i)) % 360;
  return `hsl(${h}, 45%, 62%)`;
}

export function yawOf(state: FrameState): number {
  const [w, x, y, z] = state.q;
  return Math.atan2(2 * (x * y + w * z), 1 - 2 * (y * y + z * z));
}

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

/** World position of the root interpolated between the two latest frames. */
export function interpolatedRoot(vm: ViewModel, now: number): [number, number] {
  const f = vm.frame!;
  if (!vm.prevFrame) return [f.state.p[0], f.state.p[1]];
  const t = Math.min(1, Math.max(0, (now - vm.frameReceivedAt) / TICK_MS));
  const p = vm.prevFrame.state.p;
  return [lerp(p[0], f.state.p[0], t), lerp(p[1], f.state.p[1], t)];
}

// The drawing surface: the subset of CanvasRenderingContext2D the view needs,
// which keeps tests free of a real canvas.
export interface Draw2D {
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
}

const PX_PER_M = 60;

function drawCharacter(
  ctx: Draw2D,
  state: FrameState,
  cx: number,
  cy: number,
  originX: number,
  originY: number,
  tint: string,
  ghost: boolean,
): void {
  const toScreen = (wx: number, wy: number): [number, number] => [
    cx + (wx - originX) * PX_PER_M,
    cy - (wy - originY) * PX_PER_M,
  ];
  const yaw = yawOf(state);
  const [rx, ry] = toScreen(state.p[0], state.p[1]);
  ctx.strokeStyle = tint;
  ctx.fillStyle = tint;
  ctx.lineWidth = ghost ? 1 : 2;
  // limbs: root to each end effector, rotated from the yaw-local frame
  for (const ee of state.ee) {
    const wx = state.p[0] + ee[0] * Math.cos(yaw) - ee[1] * Math.sin(yaw);
    const wy = state.p[1] + ee[0] * Math.sin(yaw) + ee[1] * Math.cos(yaw);
    const [ex, ey] = toScreen(wx, wy);
    ctx.beginPath();
    ctx.moveTo(rx, ry);
    ctx.lineTo(ex, ey);
    ctx.stroke();
    ctx.beginPath();
    ctx.arc(ex, ey, ghost ? 2 : 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  // root marker with a heading tick
  ctx.beginPath();
  ctx.arc(rx, ry, ghost ? 4 : 6, 0, 2 * Math.PI);
  ctx.fill();
  ctx.beginPath();
  ctx.moveTo(rx, ry);
  ctx.lineTo(rx + 14 * Math.cos(yaw), ry - 14 * Math.sin(yaw));
  ctx.stroke();
}

export function render(ctx: Draw2D, vm: ViewModel, width: number, height: number, now: number): void {
  ctx.clearRect(0, 0, width, height);
  const cx = width / 2;
  const cy = height / 2;
  if (vm.connection !== "live" || vm.frame === null) {
    ctx.fillStyle = "#888888";
    ctx.font = "16px sans-serif";
    ctx.fillText(vm.connection === "lost" ? "connection lost - retrying" : "connecting...", 20, 30);
    return;
  }
  const frame = vm.frame;
  const [ox, oy] = interpolatedRoot(vm, now);

  // ground grid around the character
  ctx.strokeStyle = "#2c2f36";
  ctx.lineWidth = 1;
  const span = Math.max(width, height) / PX_PER_M / 2 + 1;
  for (let gx = Math.floor(ox - span); gx <= ox + span; gx++) {
    ctx.beginPath();
    ctx.moveTo(cx + (gx - ox) * PX_PER_M, 0);
    ctx.lineTo(cx + (gx - ox) * PX_PER_M, height);
    ctx.stroke();
  }
  for (let gy = Math.floor(oy - span); gy <= oy + span; gy++) {
    ctx.beginPath();
    ctx.moveTo(0, cy - (gy - oy) * PX_PER_M);
    ctx.lineTo(width, cy - (gy - oy) * PX_PER_M);
    ctx.stroke();
  }

  // retrieved reference as a ghost overlay, always shown when present
  drawCharacter(ctx, frame.ref_state, cx, cy, ox, oy, "#5a5f6a", true);
  drawCharacter(ctx, frame.state, cx, cy, ox, oy, dbTint(frame.db), false);

  // commanded goal arrow
  const goal = vm.commandedGoal;
  if (Math.hypot(goal.vx, goal.vy) > 1e-6) {
    ctx.strokeStyle = "#4f9dff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + goal.vx * PX_PER_M * 0.5, cy - goal.vy * PX_PER_M * 0.5);
    ctx.stroke();
  }

  ctx.fillStyle = "#c8ccd4";
  ctx.font = "13px monospace";
  ctx.fillText(
    `db ${frame.db}  tick ${frame.tick}  latency ~${vm.latencyMs.toFixed(0)}ms`,
    12,
    height - 14,
  );
}
