import init, { Phantom, momentum_curve } from "./pkg/modalign_demo.js";

const $ = (id) => document.getElementById(id);
let phantom = null;

function paint(canvas, rgba, side) {
  const img = new ImageData(new Uint8ClampedArray(rgba), side, side);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function buildSliceCanvases() {
  const box = $("modalities");
  box.replaceChildren();
  Phantom.modality_names().forEach((name, i) => {
    const fig = document.createElement("figure");
    const c = document.createElement("canvas");
    c.width = c.height = 64;
    c.style.width = c.style.height = "192px";
    c.dataset.modality = i;
    const cap = document.createElement("figcaption");
    cap.textContent = name;
    fig.append(c, cap);
    box.append(fig);
  });
}

function drawSlices() {
  if (!phantom) return;
  const z = Number($("z").value);
  for (const c of $("modalities").querySelectorAll("canvas")) {
    paint(c, phantom.slice(Number(c.dataset.modality), z, $("overlay").checked), phantom.side());
  }
  drawMasked();
}

function drawMasked() {
  if (!phantom) return;
  const ratio = Number($("ratio").value);
  $("ratio-val").textContent = ratio.toFixed(2);
  const rgba = phantom.masked_slice(0, Number($("z").value), ratio, Number($("mask-seed").value));
  paint($("masked"), rgba, phantom.side());
}

function regenerate() {
  $("status").textContent = "Generating phantom...";
  // let the status text render before the synchronous work
  setTimeout(() => {
    try {
      phantom?.free();
      phantom = new Phantom(Number($("seed").value), $("lesions").checked);
      $("status").textContent = "";
      drawSlices();
    } catch (e) {
      $("status").textContent = String(e);
    }
  }, 10);
}

function drawCurve() {
  const total = Math.max(1, Number($("steps").value));
  const ys = momentum_curve(total, 200);
  const c = $("curve");
  const ctx = c.getContext("2d");
  const [w, h, pad] = [c.width, c.height, 40];
  const lo = 0.9955, hi = 0.9995;
  const x = (i) => pad + (i / (ys.length - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((v - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.font = "12px system-ui";
  for (const v of [0.996, 0.997, 0.998, 0.999]) ctx.fillText(v.toFixed(3), 2, y(v) + 4);
  ctx.fillText("0", pad, h - pad + 16);
  ctx.fillText(String(total), w - pad - 30, h - pad + 16);
  ctx.strokeStyle = "#1f5fa8";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ys.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
  ctx.stroke();
}

await init();
buildSliceCanvases();
for (const id of ["seed", "lesions"]) $(id).addEventListener("change", regenerate);
for (const id of ["z", "overlay"]) $(id).addEventListener("input", drawSlices);
for (const id of ["ratio", "mask-seed"]) $(id).addEventListener("input", drawMasked);
$("steps").addEventListener("input", drawCurve);
drawCurve();
regenerate();
