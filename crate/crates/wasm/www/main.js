import init, { barycenterDemo, bgbEquivalence, score } from "./pkg/ckbg_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (form, name) => Number(form.elements[name].value);

function fail(el, err) {
  el.className = "error";
  el.textContent = String(err.message ?? err);
}

function plot(canvas, d) {
  const g = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  g.clearRect(0, 0, w, h);
  const top = Math.max(...d.barycenter, ...d.euclidean, ...d.inputs.flat()) * 1.05;
  const line = (ys, color, width) => {
    g.strokeStyle = color;
    g.lineWidth = width;
    g.beginPath();
    ys.forEach((y, i) => {
      const px = (d.grid[i] * (w - 20)) + 10;
      const py = h - 10 - (y / top) * (h - 20);
      i ? g.lineTo(px, py) : g.moveTo(px, py);
    });
    g.stroke();
  };
  d.inputs.forEach((m) => line(m, "#bbb", 1));
  line(d.euclidean, "#d62", 2);
  line(d.barycenter, "#26c", 2);
}

function runBary(e) {
  e?.preventDefault();
  const f = $("bary-form");
  const out = $("bary-out");
  try {
    const t0 = performance.now();
    const d = JSON.parse(barycenterDemo(num(f, "inputs"), num(f, "sd"), num(f, "spread"), num(f, "points")));
    plot($("bary-plot"), d);
    out.className = "";
    out.innerHTML = `<span style="color:#d62">Euclidean mean</span>: ${d.euclidean_modes} mode(s); ` +
      `<span style="color:#26c">barycenter</span>: ${d.barycenter_modes} mode(s) ` +
      `(${(performance.now() - t0).toFixed(0)} ms)`;
  } catch (err) {
    fail(out, err);
  }
}

function runBgb(e) {
  e?.preventDefault();
  const f = $("bgb-form");
  const out = $("bgb-out");
  try {
    const r = JSON.parse(bgbEquivalence(num(f, "channels"), num(f, "grafts"), num(f, "inner"), num(f, "seed")));
    const rows = [
      ["parameters (train form)", r.train_params],
      ["parameters (deployed)", r.deploy_params],
      ["MACs / pixel (train form)", r.train_macs_per_pixel],
      ["MACs / pixel (deployed)", r.deploy_macs_per_pixel],
      ["max |difference|, f64", r.max_diff_f64.toExponential(2)],
      ["max |difference|, f32", r.max_diff_f32.toExponential(2)],
    ];
    out.className = "";
    out.innerHTML = rows.map(([k, v]) => `<tr><td>${k}</td><td>${v}</td></tr>`).join("");
  } catch (err) {
    fail(out, err);
  }
}

function runScore(e) {
  e?.preventDefault();
  const f = $("score-form");
  const out = $("score-out");
  try {
    const s = score(num(f, "psnr"), num(f, "run"), num(f, "future"), num(f, "fps"));
    out.className = "";
    out.textContent = `score = ${s.toPrecision(6)}`;
  } catch (err) {
    fail(out, err);
  }
}

await init();
$("status").textContent = "Ready.";
$("bary-form").addEventListener("submit", runBary);
$("bgb-form").addEventListener("submit", runBgb);
$("score-form").addEventListener("submit", runScore);
runBary();
runBgb();
runScore();
