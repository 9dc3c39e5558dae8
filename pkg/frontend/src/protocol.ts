// Wire protocol shared with the steering server.
//
// Server -> client: frame messages at 30 Hz plus gap markers after drops.
// Client -> server: set_goal / switch_db / reset, answered with ack or error.

export interface FrameState {
  t: number;
  p: [number, number, number];
  q: [number, number, number, number];
  v: [number, number, number];
  w: [number, number, number];
  ee: number[][];
  eev: number[][];
}

export interface FrameMessage {
  type: "frame";
  tick: number;
  state: FrameState;
  ref_state: FrameState;
  db: string;
  goal: { vx: number; vy: number; facing: number | null };
}

export interface GapMessage {
  type: "gap";
  from: number;
  to: number;
}

export interface AckMessage {
  type: "ack";
  of: string;
}

export interface ErrorMessage {
  type: "error";
  detail: string;
}

export type ServerMessage = FrameMessage | GapMessage | AckMessage | ErrorMessage;

export type ClientMessage =
  | { type: "set_goal"; vx: number; vy: number; facing?: number }
  | { type: "switch_db"; name: string }
  | { type: "reset" };

export const DEFAULT_V_MAX = 8.0;

function isVec(x: unknown, n: number): boolean {
  return Array.isArray(x) && x.length === n && x.every((v) => typeof v === "number" && isFinite(v));
}

function isState(x: unknown): x is FrameState {
  if (typeof x !== "object" || x === null) return false;
  const s = x as Record<string, unknown>;
  return (
    typeof s.t === "number" &&
    isVec(s.p, 3) &&
    isVec(s.q, 4) &&
    isVec(s.v, 3) &&
    isVec(s.w, 3) &&
    Array.isArray(s.ee) &&
    (s.ee as unknown[]).every((row) => isVec(row, 3)) &&
    Array.isArray(s.eev) &&
    (s.eev as unknown[]).every((row) => isVec(row, 3))
  );
}

/** Strict schema check; the view renders only frames that pass. */
export function parseServerMessage(text: string): ServerMessage | null {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    return null;
  }
  if (typeof raw !== "object" || raw === null) return null;
  const m = raw as Record<string, unknown>;
  switch (m.type) {
    case "frame": {
      const goal = m.goal as Record<string, unknown> | undefined;
      if (
        typeof m.tick === "number" &&
        typeof m.db === "string" &&
        isState(m.state) &&
        isState(m.ref_state) &&
        goal !== undefined &&
        typeof goal.vx === "number" &&
        typeof goal.vy === "number"
      ) {
        return m as unknown as FrameMessage;
      }
      return null;
    }
    case "gap":
      return typeof m.from === "number" && typeof m.to === "number"
        ? (m as unknown as GapMessage)
        : null;
    case "ack":
      return typeof m.of === "string" ? (m as unknown as AckMessage) : null;
    case "error":
      return typeof m.detail === "string" ? (m as unknown as ErrorMessage) : null;
    default:
      return null;
  }
}

/** Scale a goal down to the speed limit; outbound goals never exceed vMax. */
export function clampGoal(vx: number, vy: number, vMax: number = DEFAULT_V_MAX): { vx: number; vy: number } {
  const speed = Math.hypot(vx, vy);
  if (speed <= vMax || speed === 0) return { vx, vy };
  const k = vMax / speed;
  return { vx: vx * k, vy: vy * k };
}
