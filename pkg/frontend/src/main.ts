// Wires the client together: canvas view, joystick + keyboard input,
// database selector, and the steering connection. Server picked by
// ?server=http://host:port (default port 8090 on the page host).

import { RateLimiter, VirtualJoystick, keyToGoal, stickToGoal } from "./input.js";
import { SteeringClient } from "./net.js";
import { clampGoal, DEFAULT_V_MAX, ServerMessage } from "./protocol.js";
import { dbTint, emptyViewModel, render } from "./view.js";

const params = new URLSearchParams(location.search);
const server = params.get("server") ?? `http://${location.hostname || "127.0.0.1"}:8090`;
const vMax = Number(params.get("vmax") ?? DEFAULT_V_MAX);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const banner = document.getElementById("banner")!;
const dbBar = document.getElementById("dbs")!;

const vm = emptyViewModel();
const limiter = new RateLimiter();
let pendingGoal: { vx: number; vy: number } | null = null;
let frameTimes: number[] = [];

const client = new SteeringClient(server, {
  onMessage(msg: ServerMessage) {
    if (msg.type === "frame") {
      vm.prevFrame = vm.frame;
      vm.frame = msg;
      vm.frameReceivedAt = performance.now();
      vm.activeDb = msg.db;
      frameTimes.push(vm.frameReceivedAt);
      if (frameTimes.length > 30) frameTimes.shift();
      if (frameTimes.length > 1) {
        const spans = frameTimes.slice(1).map((t, i) => t - frameTimes[i]);
        const mean = spans.reduce((a, b) => a + b, 0) / spans.length;
        vm.latencyMs = Math.max(0, mean - 1000 / 30);
      }
      refreshDbBar();
    } else if (msg.type === "gap") {
      vm.prevFrame = null; // jump, do not interpolate across the gap
    } else if (msg.type === "error") {
      flashBanner(msg.detail);
    }
  },
  onStateChange(state) {
    vm.connection = state;
    banner.textContent = state === "lost" ? "connection lost - retrying" : "";
    banner.style.display = state === "lost" ? "block" : "none";
  },
});

function setGoal(vx: number, vy: number): void {
  const clamped = clampGoal(vx, vy, vMax);
  vm.commandedGoal = clamped;
  pendingGoal = clamped;
}

function pumpGoal(): void {
  if (pendingGoal !== null && limiter.ready()) {
    client.send({ type: "set_goal", vx: pendingGoal.vx, vy: pendingGoal.vy });
    pendingGoal = null;
  }
}

function flashBanner(text: string): void {
  banner.textContent = text;
  banner.style.display = "block";
  setTimeout(() => {
    if (vm.connection === "live") banner.style.display = "none";
  }, 2500);
}

function refreshDbBar(): void {
  for (const child of Array.from(dbBar.children) as HTMLButtonElement[]) {
    child.style.borderColor = child.dataset.db === vm.activeDb ? dbTint(vm.activeDb) : "#444";
  }
}

async function buildDbBar(): Promise<void> {
  const names = await client.listDatabases();
  vm.databases = names;
  for (const name of names) {
    const button = document.createElement("button");
    button.textContent = name;
    button.dataset.db = name;
    button.style.background = dbTint(name);
    button.addEventListener("click", () => {
      if (name !== vm.activeDb) client.send({ type: "switch_db", name });
    });
    dbBar.appendChild(button);
  }
}

const joystick = new VirtualJoystick((dx, dy) => {
  const goal = stickToGoal(dx, dy, vMax);
  setGoal(goal.vx, goal.vy);
});
document.getElementById("joystick-slot")!.appendChild(joystick.element);

window.addEventListener("keydown", (e) => {
  const goal = keyToGoal(e.key, vMax);
  if (goal !== null) {
    setGoal(goal.vx, goal.vy);
    e.preventDefault();
  }
});

function frameLoop(): void {
  pumpGoal();
  render(ctx, vm, canvas.width, canvas.height, performance.now());
  requestAnimationFrame(frameLoop);
}

(async () => {
  try {
    await buildDbBar();
    await client.connect();
  } catch (err) {
    vm.connection = "lost";
    banner.textContent = `cannot reach ${server}: ${err}`;
    banner.style.display = "block";
    setTimeout(() => location.reload(), 4000);
  }
  frameLoop();
})();
