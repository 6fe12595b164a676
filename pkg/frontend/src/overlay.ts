// Screen-space overlays: grid-cell wireframe and projection helpers.

import { FlyCamera, Vec3, rotateByQuat } from './camera';

export interface LayoutInfo {
  nx: number;
  ny: number;
  centroids: number[][];
  cell_half_extents: [number, number];
}

export interface BoundsInfo {
  center: number[];
  radii: number[];
  ground_z: number;
}

/** World point to pixel coordinates under the viewer camera (or null if behind). */
export function project(cam: FlyCamera, width: number, height: number,
                        p: Vec3): [number, number] | null {
  const q = cam.quat;
  // world -> camera: apply inverse rotation (conjugate)
  const conj: [number, number, number, number] = [q[0], -q[1], -q[2], -q[3]];
  const rel: Vec3 = [p[0] - cam.position[0], p[1] - cam.position[1], p[2] - cam.position[2]];
  const c = rotateByQuat(conj, rel);
  if (c[2] >= -1e-6) return null;  // camera looks along -z
  const f = (width / 2) / Math.tan((cam.fovDeg * Math.PI) / 360);
  return [width / 2 + (c[0] / -c[2]) * f, height / 2 + (c[1] / -c[2]) * f];
}

/** Draw the top-down cell boundaries at ground height. */
export function drawCellWireframe(ctx: CanvasRenderingContext2D, cam: FlyCamera,
                                  width: number, height: number,
                                  layout: LayoutInfo, bounds: BoundsInfo): void {
  const [hx, hy] = layout.cell_half_extents;
  const z = bounds.ground_z;
  ctx.strokeStyle = 'rgba(255,255,0,0.5)';
  ctx.lineWidth = 1;
  for (const c of layout.centroids) {
    const corners: Vec3[] = [
      [c[0] - hx, c[1] - hy, z], [c[0] + hx, c[1] - hy, z],
      [c[0] + hx, c[1] + hy, z], [c[0] - hx, c[1] + hy, z],
    ];
    const pts = corners.map((p) => project(cam, width, height, p));
    if (pts.some((p) => p === null)) continue;
    ctx.beginPath();
    pts.forEach((p, i) => {
      if (i === 0) ctx.moveTo(p![0], p![1]);
      else ctx.lineTo(p![0], p![1]);
    });
    ctx.closePath();
    ctx.stroke();
  }
}
