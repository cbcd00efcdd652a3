import init, { distortionMap, aamErrorMap, updateCurve } from "./pkg/xbar_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const status = (msg) => { $("status").textContent = msg; };

// white -> dark red
function heat(t) {
  const x = Math.max(0, Math.min(1, t));
  return [255, Math.round(255 * (1 - x)), Math.round(255 * (1 - x) * (1 - x))];
}

function drawMap(values, size, label) {
  const canvas = $("map");
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(size, size);
  let max = 0, sum = 0;
  for (const v of values) { max = Math.max(max, v); sum += v; }
  values.forEach((v, i) => {
    const [r, g, b] = heat(max > 0 ? v / max : 0);
    img.data.set([r, g, b, 255], 4 * i);
  });
  const off = new OffscreenCanvas(size, size);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
  $("map-stats").textContent =
    `${label}\nrows top to bottom, drivers on the left\nmax  ${(100 * max).toFixed(3)} %\nmean ${(100 * sum / values.length).toFixed(3)} %`;
}

function tileArgs() {
  return [num("size"), num("ron"), num("roff"), num("rrow"), num("rcol"), num("seed")];
}

function run(fn) {
  try {
    const t0 = performance.now();
    fn();
    status(`done in ${(performance.now() - t0).toFixed(0)} ms`);
  } catch (e) {
    status(`error: ${e}`);
  }
}

function drawCurve(points) {
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ccc";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
  ctx.strokeStyle = "#b22";
  ctx.beginPath();
  points.forEach((y, i) => {
    const px = (i / (points.length - 1)) * (w - 10) + 5;
    const py = h - 5 - y * (h - 10);
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
}

await init();
$("distortion").onclick = () => run(() => drawMap(distortionMap(...tileArgs()), num("size"), "1 - G_nonideal / G (FCM)"));
$("error").onclick = () => run(() => drawMap(aamErrorMap(...tileArgs()), num("size"), "|G_AAM - G_FCM| / G_FCM"));
$("curve").onclick = () => run(() => drawCurve(updateCurve(num("v"), num("gamma"), num("pulses"), num("step"), num("seed"))));
$("distortion").click();
