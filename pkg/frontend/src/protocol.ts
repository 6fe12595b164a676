// Wire protocol shared with the render service.
//
// Binary frames: 12-byte little-endian header
//   seq u32 | quality u8 | pad u8[3] | width u16 | height u16
// followed by width*height*3 RGB8 bytes, row-major.

export interface FrameHeader {
  seq: number;
  quality: number;
  width: number;
  height: number;
}

export interface Frame extends FrameHeader {
  rgb: Uint8Array;
}

export interface StatsMsg {
  type: 'stats';
  seq: number;
  level: number;
  render_ms: number;
  mlp_queries: number;
  cache_nodes: number;
}

export interface CameraMsg {
  type: 'camera';
  seq: number;
  pos: [number, number, number];
  quat: [number, number, number, number];
  fov_deg: number;
  width: number;
  height: number;
}

export const HEADER_BYTES = 12;

export function parseFrame(data: ArrayBuffer): Frame {
  if (data.byteLength < HEADER_BYTES) {
    throw new Error(`frame too short: ${data.byteLength} bytes`);
  }
  const dv = new DataView(data);
  const seq = dv.getUint32(0, true);
  const quality = dv.getUint8(4);
  const width = dv.getUint16(8, true);
  const height = dv.getUint16(10, true);
  const expected = HEADER_BYTES + width * height * 3;
  if (data.byteLength !== expected) {
    throw new Error(`frame size mismatch: got ${data.byteLength}, want ${expected}`);
  }
  return { seq, quality, width, height, rgb: new Uint8Array(data, HEADER_BYTES) };
}

export function packFrame(h: FrameHeader, rgb: Uint8Array): ArrayBuffer {
  const buf = new ArrayBuffer(HEADER_BYTES + rgb.length);
  const dv = new DataView(buf);
  dv.setUint32(0, h.seq, true);
  dv.setUint8(4, h.quality);
  dv.setUint16(8, h.width, true);
  dv.setUint16(10, h.height, true);
  new Uint8Array(buf, HEADER_BYTES).set(rgb);
  return buf;
}

export function isStats(msg: unknown): msg is StatsMsg {
  return typeof msg === 'object' && msg !== null
    && (msg as { type?: string }).type === 'stats';
}
