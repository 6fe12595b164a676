// Browser entry point: connects to the fly service, paints progressive
// frames, and maps keyboard/mouse input onto the camera.

import { CameraEmitter, FlyCamera, KeyState } from './camera';
import { FlyConnection } from './connection';
import { FrameStore } from './frameStore';
import { BoundsInfo, LayoutInfo, drawCellWireframe } from './overlay';
import { Frame } from './protocol';
import { StatsRing, drawSparkline } from './stats';

const params = new URLSearchParams(window.location.search);
const host = params.get('host') ?? window.location.host;
const quality = parseInt(params.get('quality') ?? '2', 10);

const canvas = document.getElementById('view') as HTMLCanvasElement;
const hud = document.getElementById('hud') as HTMLDivElement;
const ctx = canvas.getContext('2d')!;

const camera = new FlyCamera([0, 0, 12], 0, -55);
const emitter = new CameraEmitter(camera, 320, 180);
const store = new FrameStore();
const msRing = new StatsRing();
const queryRing = new StatsRing();
let layout: LayoutInfo | null = null;
let bounds: BoundsInfo | null = null;
let showWireframe = params.get('cells') === '1';
let cacheNodes = 0;

fetch(`http://${host}/healthz`).then((r) => r.json()).then((h) => {
  layout = h.layout;
  bounds = h.bounds;
}).catch(() => undefined);

const conn = new FlyConnection(`ws://${host}/fly`, {
  onFrame: (f: Frame) => store.offer(f),
  onStats: (s) => {
    msRing.push(s.render_ms);
    queryRing.push(s.mlp_queries);
    cacheNodes = s.cache_nodes;
  },
  onStatus: (ok) => { hud.dataset.connected = String(ok); },
  onError: (m) => console.warn('server error:', m),
});
conn.open();
conn.send({ type: 'config', quality, embedding_id: null });

const keys: KeyState = {};
const keymap: Record<string, keyof KeyState> = {
  KeyW: 'forward', KeyS: 'back', KeyA: 'left', KeyD: 'right',
  KeyR: 'up', KeyF: 'down', Space: 'up', ShiftLeft: 'down',
};
window.addEventListener('keydown', (e) => {
  const k = keymap[e.code];
  if (k) { keys[k] = true; e.preventDefault(); }
});
window.addEventListener('keyup', (e) => {
  const k = keymap[e.code];
  if (k) keys[k] = false;
});

let dragging = false;
canvas.addEventListener('mousedown', () => { dragging = true; });
window.addEventListener('mouseup', () => { dragging = false; });
window.addEventListener('mousemove', (e) => {
  if (dragging) {
    camera.drag(e.movementX, e.movementY);
    emitter.markDirty();
  }
});
canvas.addEventListener('wheel', (e) => {
  camera.zoomSpeed(e.deltaY);
  e.preventDefault();
});

let scratch: ImageData | null = null;

function paint(frame: Frame): void {
  if (canvas.width !== frame.width || canvas.height !== frame.height) {
    canvas.width = frame.width;
    canvas.height = frame.height;
    scratch = null;
  }
  if (!scratch) scratch = ctx.createImageData(frame.width, frame.height);
  const rgba = scratch.data;
  const rgb = frame.rgb;
  for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
    rgba[j] = rgb[i];
    rgba[j + 1] = rgb[i + 1];
    rgba[j + 2] = rgb[i + 2];
    rgba[j + 3] = 255;
  }
  ctx.putImageData(scratch, 0, 0);
  if (showWireframe && layout && bounds) {
    drawCellWireframe(ctx, camera, frame.width, frame.height, layout, bounds);
  }
  drawSparkline(ctx, msRing, 4, 4, 60, 16, 'rgba(0,255,128,0.9)');
  drawSparkline(ctx, queryRing, 4, 24, 60, 16, 'rgba(0,160,255,0.9)');
}

let lastT = performance.now();

function tick(now: number): void {
  const dt = Math.min((now - lastT) / 1000, 0.1);
  lastT = now;
  if (camera.update(dt, keys)) emitter.markDirty();
  const msg = emitter.poll(now);
  if (msg) conn.send(msg);
  if (store.takeChanged() && store.displayed) {
    paint(store.displayed);
    const key = store.displayedKey!;
    hud.textContent = `seq ${key[0]} L${key[1]} | ${msRing.latest?.toFixed(0) ?? '-'} ms | `
      + `${queryRing.latest ?? 0} queries | ${cacheNodes} nodes | speed ${camera.speed.toFixed(1)}`;
  }
  requestAnimationFrame(tick);
}
requestAnimationFrame(tick);

window.addEventListener('keydown', (e) => {
  if (e.code === 'KeyC') showWireframe = !showWireframe;
});

