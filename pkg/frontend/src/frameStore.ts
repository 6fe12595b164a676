// Latest-frame slot with a monotone display guarantee: the shown
// (seq, level) pair never regresses lexicographically, no matter how
// frames arrive. Stale sequences are dropped on receipt.

import { Frame } from './protocol';

export class FrameStore {
  private current: Frame | null = null;
  private changed = false;

  /** Returns true when the frame became the displayed one. */
  offer(frame: Frame): boolean {
    const cur = this.current;
    if (cur !== null) {
      if (frame.seq < cur.seq) return false;                    // stale sequence
      if (frame.seq === cur.seq && frame.quality <= cur.quality) return false;
    }
    this.current = frame;
    this.changed = true;
    return true;
  }

  get displayed(): Frame | null {
    return this.current;
  }

  /** The (seq, level) pair being displayed, for monitoring/tests. */
  get displayedKey(): [number, number] | null {
    return this.current ? [this.current.seq, this.current.quality] : null;
  }

  /** True once since the last takeChanged call; drives repaints. */
  takeChanged(): boolean {
    const c = this.changed;
    this.changed = false;
    return c;
  }
}
