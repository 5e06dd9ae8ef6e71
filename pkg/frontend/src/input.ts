// Clutch + relative-motion input: holding the clutch key hands control to the
// operator; mouse deltas accumulate between animation frames and are emitted
// as one scaled move message per frame. Deltas are relative, so no alignment
// between cursor and end effector is ever needed.

import type { ClientMsg } from "./protocol.js";

export const SENSITIVITY = 0.002; // workspace units per pixel

export class InputLoop {
  private engaged = false;
  private accX = 0;
  private accY = 0;
  private queue: ClientMsg[] = [];

  clutchDown(): void {
    if (!this.engaged) {
      this.engaged = true;
      this.queue.push({ type: "clutch", engaged: true });
    }
  }

  clutchUp(): void {
    if (this.engaged) {
      this.engaged = false;
      this.queue.push({ type: "clutch", engaged: false });
    }
  }

  isEngaged(): boolean {
    return this.engaged;
  }

  mouseMove(dxPixels: number, dyPixels: number): void {
    if (this.engaged) {
      this.accX += dxPixels;
      this.accY += dyPixels;
    }
  }

  markRecoveryDone(): void {
    this.queue.push({ type: "mark", what: "recovery_done" });
  }

  requestReset(): void {
    this.queue.push({ type: "reset" });
  }

  /** Messages to send this animation frame. Zero-delta moves are suppressed. */
  flush(): ClientMsg[] {
    const out = this.queue;
    this.queue = [];
    if (this.engaged && (this.accX !== 0 || this.accY !== 0)) {
      // screen y grows downward; workspace y grows upward
      out.push({ type: "move", dx: this.accX * SENSITIVITY, dy: -this.accY * SENSITIVITY });
    }
    this.accX = 0;
    this.accY = 0;
    return out;
  }
}
