// Built glue from `wasm-bindgen --target web` is expected in ./pkg/.
import init, { synthetic, corrupt, FieldMap, Trainer } from "./pkg/n2k_wasm_demo.js";

const SIZE = 64;
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

let clean = null;
let noisy = null;
let trainer = null;
let running = false;

function drawRgb(canvas, side, color) {
  canvas.width = side;
  canvas.height = side;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(side, side);
  for (let i = 0; i < side * side; i++) {
    img.data.set([...color(i), 255], 4 * i);
  }
  ctx.putImageData(img, 0, 0);
}

function draw(canvas, pixels, side) {
  drawRgb(canvas, side, (i) => [pixels[i], pixels[i], pixels[i]]);
}

function doCorrupt() {
  const seed = BigInt(num("img-seed"));
  clean = synthetic(SIZE, seed);
  noisy = corrupt(clean, SIZE, $("kind").value, num("sigma-g"), num("sigma-s"), num("density"), seed + 1n);
  draw($("clean"), clean, SIZE);
  draw($("noisy"), noisy, SIZE);
  trainer = null;
}

function doAnalyze() {
  let map;
  try {
    map = new FieldMap(num("k"), num("d"), num("depth"));
  } catch (e) {
    $("verdict").textContent = String(e);
    return;
  }
  const side = 2 * map.radius() + 1;
  const cells = map.cells();
  const mid = map.radius() * side + map.radius();
  // Dark cells are read by the output pixel; the center is red if read, green if blind.
  drawRgb($("field"), side, (i) => {
    if (i === mid) return cells[i] ? [220, 30, 30] : [30, 170, 60];
    return cells[i] ? [40, 40, 40] : [235, 235, 235];
  });
  $("verdict").className = map.invariant() ? "ok" : "bad";
  $("verdict").textContent = map.invariant()
    ? "Output never reads its own input pixel."
    : "Output depends on its own input pixel; see the witness below.";
  $("report").textContent = map.report();
  map.free();
}

function loop() {
  if (!running || !trainer) return;
  const loss = trainer.step(1);
  draw($("pred"), trainer.prediction(), SIZE);
  $("progress").textContent =
    `step ${trainer.steps_done()}  loss ${loss.toFixed(5)}  ` +
    `PSNR noisy ${trainer.psnr_noisy().toFixed(2)} dB, prediction ${trainer.psnr_prediction().toFixed(2)} dB`;
  requestAnimationFrame(loop);
}

await init();
$("corrupt").onclick = doCorrupt;
$("analyze").onclick = doAnalyze;
$("train").onclick = () => {
  if (!trainer) trainer = new Trainer(clean, noisy, SIZE, num("lambda"), 0n);
  running = true;
  loop();
};
$("stop").onclick = () => { running = false; };
doCorrupt();
doAnalyze();
