// WebSocket client: binary frames in, JSON stats in, camera messages out.
// Reconnects with exponential backoff (capped at 5 s); the latest camera
// survives a reconnect and is re-sent once the socket reopens.

import { CameraMsg, Frame, StatsMsg, isStats, parseFrame } from './protocol';

export interface ConnectionEvents {
  onFrame?: (f: Frame) => void;
  onStats?: (s: StatsMsg) => void;
  onStatus?: (connected: boolean) => void;
  onError?: (message: string) => void;
}

export class FlyConnection {
  private ws: WebSocket | null = null;
  private backoffMs = 250;
  private pendingCamera: CameraMsg | null = null;
  private closed = false;
  connected = false;

  constructor(private url: string, private events: ConnectionEvents = {},
              private wsFactory: (url: string) => WebSocket =
                (u) => new WebSocket(u)) {}

  open(): void {
    this.closed = false;
    this.connect();
  }

  private connect(): void {
    const ws = this.wsFactory(this.url);
    ws.binaryType = 'arraybuffer';
    this.ws = ws;
    ws.onopen = () => {
      this.connected = true;
      this.backoffMs = 250;
      this.events.onStatus?.(true);
      if (this.pendingCamera) {
        ws.send(JSON.stringify(this.pendingCamera));
        this.pendingCamera = null;
      }
    };
    ws.onmessage = (ev: MessageEvent) => {
      if (ev.data instanceof ArrayBuffer) {
        try {
          this.events.onFrame?.(parseFrame(ev.data));
        } catch (e) {
          console.warn('dropped malformed frame:', e);
        }
        return;
      }
      try {
        const msg = JSON.parse(ev.data as string);
        if (isStats(msg)) this.events.onStats?.(msg);
        else if (msg.type === 'error') this.events.onError?.(msg.message);
      } catch {
        console.warn('dropped non-JSON text message');
      }
    };
    ws.onclose = () => {
      this.connected = false;
      this.events.onStatus?.(false);
      if (!this.closed) {
        setTimeout(() => this.connect(), this.backoffMs);
        this.backoffMs = Math.min(this.backoffMs * 2, 5000);
      }
    };
    ws.onerror = () => ws.close();
  }

  send(msg: CameraMsg | { type: 'config'; quality: number; embedding_id: number | null }): void {
    if (this.connected && this.ws) {
      this.ws.send(JSON.stringify(msg));
    } else if (msg.type === 'camera') {
      this.pendingCamera = msg;  // buffer the latest until reconnect
    }
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
