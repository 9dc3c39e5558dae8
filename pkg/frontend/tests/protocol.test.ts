import { describe, expect, it } from "vitest";

import { clampGoal, parseServerMessage } from "../src/protocol.js";

function validState() {
  return {
    t: 12,
    p: [0.1, -0.2, 0.9],
    q: [1, 0, 0, 0],
    v: [1.0, 0, 0],
    w: [0, 0, 0.1],
    ee: [
      [0.1, 0.3, -0.2],
      [0.1, -0.3, -0.2],
      [0.0, 0.1, -0.9],
      [0.0, -0.1, -0.9],
    ],
    eev: [
      [0, 0, 0],
      [0, 0, 0],
      [0, 0, 0],
      [0, 0, 0],
    ],
  };
}

function validFrame() {
  return {
    type: "frame",
    tick: 42,
    state: validState(),
    ref_state: validState(),
    db: "walk",
    goal: { vx: 1.0, vy: 0.0, facing: null },
  };
}

describe("parseServerMessage", () => {
  it("accepts a schema-valid frame", () => {
    const msg = parseServerMessage(JSON.stringify(validFrame()));
    expect(msg).not.toBeNull();
    expect(msg!.type).toBe("frame");
  });

  it("rejects frames with missing or malformed fields", () => {
    const noTick = validFrame() as Record<string, unknown>;
    delete noTick.tick;
    expect(parseServerMessage(JSON.stringify(noTick))).toBeNull();

    const badQuat = validFrame();
    badQuat.state.q = [1, 0, 0] as unknown as [number, number, number, number];
    expect(parseServerMessage(JSON.stringify(badQuat))).toBeNull();

    const nanPos = validFrame();
    (nanPos.state.p as unknown[])[0] = "oops";
    expect(parseServerMessage(JSON.stringify(nanPos))).toBeNull();
  });

  it("rejects junk and unknown types", () => {
    expect(parseServerMessage("{not json")).toBeNull();
    expect(parseServerMessage('"just a string"')).toBeNull();
    expect(parseServerMessage(JSON.stringify({ type: "dance" }))).toBeNull();
  });

  it("accepts gap, ack and error messages", () => {
    expect(parseServerMessage(JSON.stringify({ type: "gap", from: 3, to: 7 }))!.type).toBe("gap");
    expect(parseServerMessage(JSON.stringify({ type: "ack", of: "set_goal" }))!.type).toBe("ack");
    expect(parseServerMessage(JSON.stringify({ type: "error", detail: "x" }))!.type).toBe("error");
  });
});

describe("clampGoal", () => {
  it("passes goals under the limit through untouched", () => {
    expect(clampGoal(1.5, -2.0, 8)).toEqual({ vx: 1.5, vy: -2.0 });
  });

  it("rescales goals over the limit onto the limit circle", () => {
    const clamped = clampGoal(30, 40, 8);
    expect(Math.hypot(clamped.vx, clamped.vy)).toBeCloseTo(8, 9);
    expect(clamped.vy / clamped.vx).toBeCloseTo(40 / 30, 9);
  });
});
