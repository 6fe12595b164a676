// Fixed-size history ring for the stats overlay sparklines.

export class StatsRing {
  private buf: number[];
  private head = 0;
  private count = 0;

  constructor(public capacity = 120) {
    this.buf = new Array(capacity).fill(0);
  }

  push(v: number): void {
    this.buf[this.head] = v;
    this.head = (this.head + 1) % this.capacity;
    this.count = Math.min(this.count + 1, this.capacity);
  }

  /** Oldest-first values currently held. */
  values(): number[] {
    const out: number[] = [];
    const start = (this.head - this.count + this.capacity) % this.capacity;
    for (let i = 0; i < this.count; i++) {
      out.push(this.buf[(start + i) % this.capacity]);
    }
    return out;
  }

  get latest(): number | null {
    if (this.count === 0) return null;
    return this.buf[(this.head - 1 + this.capacity) % this.capacity];
  }
}

export function drawSparkline(ctx: CanvasRenderingContext2D, ring: StatsRing,
                              x: number, y: number, w: number, h: number,
                              color: string): void {
  const vals = ring.values();
  if (vals.length < 2) return;
  const max = Math.max(...vals, 1e-9);
  ctx.strokeStyle = color;
  ctx.beginPath();
  vals.forEach((v, i) => {
    const px = x + (i / (vals.length - 1)) * w;
    const py = y + h - (v / max) * h;
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
}
