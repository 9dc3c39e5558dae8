// Session lifecycle and the live message channel.

import {
  ClientMessage,
  ServerMessage,
  parseServerMessage,
} from "./protocol.js";

export interface SteeringEvents {
  onMessage(msg: ServerMessage): void;
  onStateChange(state: "connecting" | "live" | "lost"): void;
}

export class SteeringClient {
  private ws: WebSocket | null = null;
  private sessionId: string | null = null;
  private closed = false;

  constructor(private readonly serverUrl: string, private readonly events: SteeringEvents) {}

  get session(): string | null {
    return this.sessionId;
  }

  async listDatabases(): Promise<string[]> {
    const res = await fetch(`${this.serverUrl}/v1/databases`);
    if (!res.ok) throw new Error(`databases: HTTP ${res.status}`);
    return (await res.json()).databases as string[];
  }

  async connect(db?: string): Promise<void> {
    this.events.onStateChange("connecting");
    const res = await fetch(`${this.serverUrl}/v1/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(db ? { db } : {}),
    });
    if (!res.ok) throw new Error(`session create failed: HTTP ${res.status}`);
    this.sessionId = (await res.json()).session_id as string;
    this.openChannel();
  }

  private openChannel(): void {
    const wsUrl = this.serverUrl.replace(/^http/, "ws");
    const ws = new WebSocket(`${wsUrl}/v1/sessions/${this.sessionId}/channel`);
    this.ws = ws;
    ws.addEventListener("open", () => this.events.onStateChange("live"));
    ws.addEventListener("message", (event) => {
      const msg = parseServerMessage(String(event.data));
      if (msg !== null) this.events.onMessage(msg);
    });
    ws.addEventListener("close", () => {
      if (this.closed) return;
      this.events.onStateChange("lost");
      setTimeout(() => {
        if (!this.closed && this.sessionId !== null) this.openChannel();
      }, 1000);
    });
    ws.addEventListener("error", () => ws.close());
  }

  send(message: ClientMessage): boolean {
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) return false;
    this.ws.send(JSON.stringify(message));
    return true;
  }

  async close(): Promise<void> {
    this.closed = true;
    this.ws?.close();
    if (this.sessionId !== null) {
      await fetch(`${this.serverUrl}/v1/sessions/${this.sessionId}`, { method: "DELETE" }).catch(
        () => undefined,
      );
    }
  }
}
