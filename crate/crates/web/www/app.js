import init, { patient_timeline, attention_maps, temporal_encoding } from "./pkg/clinrisk_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(f, ...args) {
  try {
    $("status").textContent = "";
    return JSON.parse(f(...args));
  } catch (e) {
    $("status").textContent = String(e.message ?? e);
    return null;
  }
}

function drawTimeline() {
  const rho = num("tl-rho");
  $("tl-rho-v").textContent = rho.toFixed(2);
  const tl = call(patient_timeline, BigInt(num("tl-seed")), num("tl-index"), rho);
  if (!tl) return;
  $("tl-info").textContent =
    `${tl.patient_id}  label ${tl.label}  true risk ${tl.true_probability.toFixed(3)}  events ${tl.events.length}`;
  const c = $("tl"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const tMax = tl.events[tl.events.length - 1].t || 1;
  const x = (t) => 20 + (t / tMax) * (c.width - 40);
  const mid = c.height / 2;
  g.strokeStyle = "#999";
  g.beginPath(); g.moveTo(20, mid); g.lineTo(c.width - 20, mid); g.stroke();
  for (const e of tl.events) {
    const v = e.values[0];
    const h = Math.max(-mid + 10, Math.min(mid - 10, v * 20));
    g.strokeStyle = e.contaminated ? "#d33" : "#38c";
    g.lineWidth = 3;
    g.beginPath(); g.moveTo(x(e.t), mid); g.lineTo(x(e.t), mid - h); g.stroke();
    if (e.risk_code) {
      g.fillStyle = "#000";
      g.beginPath(); g.arc(x(e.t), mid, 5, 0, 2 * Math.PI); g.fill();
    }
  }
  g.fillStyle = "#666";
  g.fillText("bar: first continuous value (red = contaminated), dot: risk code", 20, c.height - 6);
}

function heat(canvas, m, t) {
  const g = canvas.getContext("2d"), s = canvas.width / t;
  const max = Math.max(...m);
  for (let i = 0; i < t; i++) {
    for (let j = 0; j < t; j++) {
      const v = m[i * t + j] / max;
      g.fillStyle = `rgb(${255 - v * 200}, ${255 - v * 140}, 255)`;
      g.fillRect(j * s, i * s, s, s);
    }
  }
}

function drawAttention() {
  const ex = call(attention_maps, BigInt(num("at-seed")), num("at-index"), num("at-dm"), num("at-heads"));
  if (!ex) return;
  $("at-info").textContent = `${ex.patient_id}  T = ${ex.t}  predicted risk ${ex.yhat.toFixed(3)}`;
  const c = $("pool"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const w = (c.width - 40) / ex.t, max = Math.max(...ex.pooling);
  ex.pooling.forEach((a, i) => {
    const h = (a / max) * (c.height - 30);
    g.fillStyle = "#5a5";
    g.fillRect(20 + i * w, c.height - 20 - h, w - 2, h);
  });
  g.fillStyle = "#666";
  g.fillText("pooling weight per event", 20, c.height - 6);
  const maps = $("maps");
  maps.innerHTML = "";
  ex.attention.forEach((layer, l) => layer.forEach((m, h) => {
    const fig = document.createElement("figure");
    const cv = document.createElement("canvas");
    cv.width = cv.height = 180;
    heat(cv, m, ex.t);
    const cap = document.createElement("figcaption");
    cap.textContent = `layer ${l} head ${h}`;
    fig.append(cv, cap);
    maps.append(fig);
  }));
}

function drawEncoding() {
  const bias = num("te-bias");
  $("te-bias-v").textContent = bias.toFixed(1);
  const te = call(temporal_encoding, BigInt(num("te-seed")), 16, 40, 81, bias, $("te-log").checked);
  if (!te) return;
  const c = $("te"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const yMax = Math.max(1e-9, ...te.curves.flat());
  const x = (d) => 30 + (d / te.dt[te.dt.length - 1]) * (c.width - 50);
  const y = (v) => c.height - 20 - (v / yMax) * (c.height - 40);
  te.curves.forEach((curve, k) => {
    g.strokeStyle = `hsl(${(k * 360) / te.curves.length}, 60%, 45%)`;
    g.beginPath();
    curve.forEach((v, i) => (i ? g.lineTo(x(te.dt[i]), y(v)) : g.moveTo(x(te.dt[i]), y(v))));
    g.stroke();
  });
  g.fillStyle = "#666";
  g.fillText("Δt (hours) →  one line per model dimension", 30, c.height - 4);
}

await init();
for (const id of ["tl-seed", "tl-index", "tl-rho"]) $(id).addEventListener("input", drawTimeline);
for (const id of ["at-seed", "at-index", "at-dm", "at-heads"]) $(id).addEventListener("input", drawAttention);
for (const id of ["te-seed", "te-bias", "te-log"]) $(id).addEventListener("input", drawEncoding);
drawTimeline();
drawAttention();
drawEncoding();
