// First-person fly camera. World up is +z; the camera looks along -z of
// its own frame with x right and y down in the image, matching the
// renderer's pinhole convention.

export type Vec3 = [number, number, number];
export type Quat = [number, number, number, number]; // (w, x, y, z)

const DEG = Math.PI / 180;

function cross(a: Vec3, b: Vec3): Vec3 {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function norm(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]) || 1;
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** Camera-to-world rotation columns (x_cam, y_cam, z_cam) as a quaternion. */
export function lookQuat(forward: Vec3): Quat {
  const f = norm(forward);
  let up: Vec3 = [0, 0, 1];
  if (Math.abs(f[0] * up[0] + f[1] * up[1] + f[2] * up[2]) > 0.999) up = [0, 1, 0];
  const xc = norm(cross(f, up));
  const zc: Vec3 = [-f[0], -f[1], -f[2]];
  const yc = cross(zc, xc);
  // column-major rotation -> quaternion (Shepperd)
  const m00 = xc[0], m01 = yc[0], m02 = zc[0];
  const m10 = xc[1], m11 = yc[1], m12 = zc[1];
  const m20 = xc[2], m21 = yc[2], m22 = zc[2];
  const tr = m00 + m11 + m22;
  let w: number, x: number, y: number, z: number;
  if (tr > 0) {
    const s = Math.sqrt(tr + 1) * 2;
    w = s / 4; x = (m21 - m12) / s; y = (m02 - m20) / s; z = (m10 - m01) / s;
  } else if (m00 > m11 && m00 > m22) {
    const s = Math.sqrt(1 + m00 - m11 - m22) * 2;
    w = (m21 - m12) / s; x = s / 4; y = (m01 + m10) / s; z = (m02 + m20) / s;
  } else if (m11 > m22) {
    const s = Math.sqrt(1 + m11 - m00 - m22) * 2;
    w = (m02 - m20) / s; x = (m01 + m10) / s; y = s / 4; z = (m12 + m21) / s;
  } else {
    const s = Math.sqrt(1 + m22 - m00 - m11) * 2;
    w = (m10 - m01) / s; x = (m02 + m20) / s; y = (m12 + m21) / s; z = s / 4;
  }
  return [w, x, y, z];
}

export function rotateByQuat(q: Quat, v: Vec3): Vec3 {
  const [w, x, y, z] = q;
  // v' = v + 2w(u x v) + 2(u x (u x v)) with u = (x,y,z)
  const u: Vec3 = [x, y, z];
  const uv = cross(u, v);
  const uuv = cross(u, uv);
  return [
    v[0] + 2 * (w * uv[0] + uuv[0]),
    v[1] + 2 * (w * uv[1] + uuv[1]),
    v[2] + 2 * (w * uv[2] + uuv[2]),
  ];
}

export interface KeyState {
  forward?: boolean;  // W
  back?: boolean;     // S
  left?: boolean;     // A
  right?: boolean;    // D
  up?: boolean;       // R / Space
  down?: boolean;     // F / Shift
}

export class FlyCamera {
  position: Vec3;
  yawDeg: number;    // about world +z, 0 = +x
  pitchDeg: number;  // 0 = level, negative = down
  speed = 5.0;       // m/s
  fovDeg = 60;

  constructor(position: Vec3 = [0, 0, 12], yawDeg = 0, pitchDeg = -55) {
    this.position = position;
    this.yawDeg = yawDeg;
    this.pitchDeg = pitchDeg;
  }

  get forward(): Vec3 {
    const cy = Math.cos(this.yawDeg * DEG), sy = Math.sin(this.yawDeg * DEG);
    const cp = Math.cos(this.pitchDeg * DEG), sp = Math.sin(this.pitchDeg * DEG);
    return [cp * cy, cp * sy, sp];
  }

  get quat(): Quat {
    return lookQuat(this.forward);
  }

  /** WASD translation in the camera frame; returns true when moved. */
  update(dt: number, keys: KeyState): boolean {
    const f = this.forward;
    const right = norm(cross(f, [0, 0, 1]));
    let d: Vec3 = [0, 0, 0];
    const add = (v: Vec3, s: number) => { d = [d[0] + v[0] * s, d[1] + v[1] * s, d[2] + v[2] * s]; };
    if (keys.forward) add(f, 1);
    if (keys.back) add(f, -1);
    if (keys.right) add(right, 1);
    if (keys.left) add(right, -1);
    if (keys.up) add([0, 0, 1], 1);
    if (keys.down) add([0, 0, 1], -1);
    if (d[0] === 0 && d[1] === 0 && d[2] === 0) return false;
    const n = Math.hypot(d[0], d[1], d[2]);
    const s = (this.speed * dt) / n;
    this.position = [this.position[0] + d[0] * s, this.position[1] + d[1] * s,
                     this.position[2] + d[2] * s];
    return true;
  }

  /** Mouse drag: dx yaws about world up, dy pitches (clamped). */
  drag(dxPixels: number, dyPixels: number, degPerPixel = 0.25): void {
    this.yawDeg -= dxPixels * degPerPixel;
    this.pitchDeg = Math.max(-89, Math.min(89, this.pitchDeg - dyPixels * degPerPixel));
  }

  /** Scroll wheel scales flight speed. */
  zoomSpeed(deltaY: number): void {
    this.speed = Math.max(0.2, Math.min(100, this.speed * Math.pow(1.1, -deltaY / 100)));
  }
}

/** Rate-limited camera message source with strictly increasing sequence numbers. */
export class CameraEmitter {
  private seq = 0;
  private lastSent = -Infinity;
  private dirty = true;

  constructor(public camera: FlyCamera, public width = 320, public height = 180,
              public maxHz = 30) {}

  markDirty(): void {
    this.dirty = true;
  }

  /** A message when due (camera changed and the rate limit allows), else null. */
  poll(nowMs: number): import('./protocol').CameraMsg | null {
    if (!this.dirty) return null;
    if (nowMs - this.lastSent < 1000 / this.maxHz) return null;
    this.lastSent = nowMs;
    this.dirty = false;
    this.seq += 1;
    return {
      type: 'camera',
      seq: this.seq,
      pos: [...this.camera.position] as Vec3,
      quat: [...this.camera.quat] as Quat,
      fov_deg: this.camera.fovDeg,
      width: this.width,
      height: this.height,
    };
  }
}
