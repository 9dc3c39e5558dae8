// Goal input: virtual joystick (pointer), keyboard presets, and the outbound
// rate limiter. The stick maps radially: direction is preserved, deflection
// magnitude scales speed up to vMax, with a small deadzone at the center.

import { clampGoal } from "./protocol.js";

export const DEADZONE = 0.05;
export const SEND_HZ = 20;

export interface GoalVector {
  vx: number;
  vy: number;
}

/**
 * Map a stick deflection (dx, dy in [-1, 1], screen axes: +y down) to a world
 * goal velocity. World x is screen right, world y is screen up.
 */
export function stickToGoal(dx: number, dy: number, vMax: number): GoalVector {
  let mag = Math.hypot(dx, dy);
  if (mag < DEADZONE) return { vx: 0, vy: 0 };
  if (mag > 1) {
    dx /= mag;
    dy /= mag;
    mag = 1;
  }
  // rescale so speed covers (0, vMax] smoothly outside the deadzone
  const speed = (vMax * (mag - DEADZONE)) / (1 - DEADZONE);
  const heading = Math.atan2(-dy, dx);
  return clampGoal(speed * Math.cos(heading), speed * Math.sin(heading), vMax);
}

/** Arrow-key presets: fixed-speed goals in the four world directions. */
export function keyToGoal(key: string, vMax: number): GoalVector | null {
  const speed = vMax / 4;
  switch (key) {
    case "ArrowUp":
      return { vx: 0, vy: speed };
    case "ArrowDown":
      return { vx: 0, vy: -speed };
    case "ArrowLeft":
      return { vx: -speed, vy: 0 };
    case "ArrowRight":
      return { vx: speed, vy: 0 };
    case " ":
      return { vx: 0, vy: 0 };
    default:
      return null;
  }
}

/** Drops calls closer together than the interval; latest value wins later. */
export class RateLimiter {
  private lastSent = -Infinity;
  constructor(private readonly hz: number = SEND_HZ, private readonly clock: () => number = () => performance.now()) {}

  ready(): boolean {
    const now = this.clock();
    if (now - this.lastSent >= 1000 / this.hz) {
      this.lastSent = now;
      return true;
    }
    return false;
  }
}

export class VirtualJoystick {
  readonly element: HTMLDivElement;
  private knob: HTMLDivElement;
  private pointerId: number | null = null;
  private radius = 60;

  constructor(private readonly onChange: (dx: number, dy: number) => void) {
    this.element = document.createElement("div");
    this.element.className = "joystick-base";
    this.knob = document.createElement("div");
    this.knob.className = "joystick-knob";
    this.element.appendChild(this.knob);
    this.element.addEventListener("pointerdown", (e) => this.start(e));
    this.element.addEventListener("pointermove", (e) => this.move(e));
    this.element.addEventListener("pointerup", (e) => this.end(e));
    this.element.addEventListener("pointercancel", (e) => this.end(e));
  }

  private start(e: PointerEvent): void {
    if (this.pointerId !== null) return;
    this.pointerId = e.pointerId;
    this.element.setPointerCapture(e.pointerId);
    const rect = this.element.getBoundingClientRect();
    this.radius = rect.width / 2;
    this.move(e);
  }

  private move(e: PointerEvent): void {
    if (this.pointerId !== e.pointerId) return;
    const rect = this.element.getBoundingClientRect();
    const dx = (e.clientX - rect.left - rect.width / 2) / this.radius;
    const dy = (e.clientY - rect.top - rect.height / 2) / this.radius;
    const mag = Math.hypot(dx, dy);
    const cx = mag > 1 ? dx / mag : dx;
    const cy = mag > 1 ? dy / mag : dy;
    this.knob.style.transform = `translate(${cx * this.radius * 0.6}px, ${cy * this.radius * 0.6}px)`;
    this.onChange(cx, cy);
  }

  private end(e: PointerEvent): void {
    if (this.pointerId !== e.pointerId) return;
    this.pointerId = null;
    this.knob.style.transform = "translate(0px, 0px)";
    this.onChange(0, 0);
  }
}
