import init, { Demo } from "./pkg/conesplat_web.js";

const SIZE = 64;
const $ = (id) => document.getElementById(id);

let demo;
let picked = null;

function blit(canvas, rgba) {
  canvas.width = SIZE;
  canvas.height = SIZE;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), SIZE, SIZE), 0, 0);
  if (picked) {
    ctx.strokeStyle = "#ff0";
    ctx.strokeRect(picked.u - 1.5, picked.v - 1.5, 4, 4);
  }
}

function angles() {
  return [Number($("az").value), Number($("el").value)];
}

function draw() {
  const [az, el] = angles();
  $("azv").textContent = az;
  $("elv").textContent = el;
  blit($("splats"), demo.render_splats(az, el));
  if ($("showField").checked) {
    blit($("field"), demo.render_field(az, el, 128));
  }
}

function plotProfile(p) {
  const c = $("profile");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (p.t.length === 0) {
    $("median").textContent = "ray misses the scene bounds";
    return;
  }
  const t0 = p.t[0], t1 = p.t[p.t.length - 1];
  const x = (t) => 30 + ((t - t0) / (t1 - t0 || 1)) * (c.width - 40);
  const y = (v) => c.height - 20 - v * (c.height - 30);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(30, y(0.5));
  ctx.lineTo(c.width - 10, y(0.5));
  ctx.stroke();
  ctx.strokeStyle = "#1a5fb4";
  ctx.beginPath();
  p.t.forEach((t, i) => (i ? ctx.lineTo(x(t), y(p.transmittance[i])) : ctx.moveTo(x(t), y(p.transmittance[i]))));
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.fillText("1", 12, y(1) + 4);
  ctx.fillText("0", 12, y(0) + 4);
  ctx.fillText(t0.toFixed(2), 26, c.height - 4);
  ctx.fillText(t1.toFixed(2), c.width - 40, c.height - 4);
  if (p.median_depth !== null) {
    ctx.strokeStyle = "#c01c28";
    ctx.beginPath();
    ctx.moveTo(x(p.median_depth), 10);
    ctx.lineTo(x(p.median_depth), c.height - 20);
    ctx.stroke();
    $("median").textContent = `median depth ${p.median_depth.toFixed(4)}`;
  } else {
    $("median").textContent = "transmittance never drops to 0.5: no median depth";
  }
}

function inspect() {
  if (!picked) return;
  const [az, el] = angles();
  plotProfile(JSON.parse(demo.ray_profile(az, el, picked.u, picked.v, 256)));
}

function compare() {
  if (!picked) return;
  const [az, el] = angles();
  const segments = Math.max(1, Math.min(512, Number($("segments").value) | 0));
  try {
    const rep = JSON.parse(demo.equivalence(az, el, picked.u, picked.v, segments, $("lowpass").checked));
    const px = rep.pixels[0];
    $("report").textContent =
      `pixel (${px.u}, ${px.v}), ${rep.n_segments} segments\n` +
      `splat  ${px.splat.map((v) => v.toFixed(12)).join("  ")}\n` +
      `march  ${px.march.map((v) => v.toFixed(12)).join("  ")}\n` +
      `max |diff| = ${rep.max_abs_diff.toExponential(3)}  (${rep.passed ? "equal" : "differs"} at tolerance ${rep.tolerance})`;
  } catch (e) {
    $("report").textContent = String(e);
  }
}

function pick(ev) {
  const r = ev.target.getBoundingClientRect();
  picked = {
    u: Math.min(SIZE - 1, Math.floor(((ev.clientX - r.left) / r.width) * SIZE)),
    v: Math.min(SIZE - 1, Math.floor(((ev.clientY - r.top) / r.height) * SIZE)),
  };
  draw();
  inspect();
  compare();
}

async function main() {
  await init();
  demo = new Demo(SIZE, 3000, 1);
  $("count").textContent = demo.primitive_count();
  $("status").textContent = "";
  for (const id of ["az", "el", "showField"]) {
    $(id).addEventListener("input", () => {
      draw();
      inspect();
    });
  }
  $("splats").addEventListener("click", pick);
  $("field").addEventListener("click", pick);
  $("check").addEventListener("click", compare);
  draw();
}

main().catch((e) => {
  $("status").textContent = `failed to start: ${e}`;
});
