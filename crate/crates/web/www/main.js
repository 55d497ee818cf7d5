import init, { paramCounts, wkvLagWeights, selectorTrace } from "./pkg/rwkv_perspectives_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];
const NEW_TOKENS = 24;

function showError(el, e) {
  el.textContent = String(e.message ?? e);
  el.className = "out err";
}

function updateCounts() {
  const out = $("pc-out");
  try {
    const [base, extended, pct] = paramCounts(+$("pc-layers").value, +$("pc-width").value, +$("pc-n").value, $("pc-agg").value);
    out.className = "out";
    out.textContent =
      `base      ${base.toLocaleString()}\n` +
      `extended  ${extended.toLocaleString()}\n` +
      `increase  ${(extended - base).toLocaleString()} (${pct.toFixed(4)}%)`;
  } catch (e) {
    showError(out, e);
  }
}

function updateWkv() {
  const w = +$("wkv-w").value;
  const u = +$("wkv-u").value;
  $("wkv-label").textContent = `w=${w.toFixed(2)} u=${u.toFixed(2)}`;
  const weights = wkvLagWeights(w, u, 31);
  const c = $("wkv-plot");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const bar = c.width / weights.length;
  const top = Math.max(...weights);
  weights.forEach((x, lag) => {
    const h = (x / top) * (c.height - 20);
    ctx.fillStyle = lag === 0 ? "#d95f02" : "#1b9e77";
    ctx.fillRect(lag * bar + 1, c.height - 14 - h, bar - 2, h);
  });
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText("lag 0 (current token)", 2, c.height - 2);
  ctx.fillText(`lag ${weights.length - 1}`, c.width - 40, c.height - 2);
}

function updateTrace() {
  const out = $("tr-out");
  const prompt = $("tr-prompt").value;
  try {
    const flat = selectorTrace(prompt, +$("tr-seed").value, +$("tr-spread").value, NEW_TOKENS);
    const n = COLORS.length;
    const rows = flat.length / n;
    const c = $("tr-plot");
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    const col = c.width / rows;
    for (let t = 0; t < rows; t++) {
      let y = 0;
      for (let i = 0; i < n; i++) {
        const h = flat[t * n + i] * c.height;
        ctx.fillStyle = COLORS[i];
        ctx.fillRect(t * col, y, Math.max(col - 1, 1), h);
        y += h;
      }
    }
    ctx.fillStyle = "#000";
    ctx.fillRect(prompt.length * col - 1, 0, 2, c.height);
    out.className = "out";
    out.textContent = `${prompt.length} prompt positions, then ${rows - prompt.length} generated; colors are perspectives 1 to ${n}`;
  } catch (e) {
    showError(out, e);
  }
}

await init();
for (const id of ["pc-layers", "pc-width", "pc-n", "pc-agg"]) $(id).addEventListener("input", updateCounts);
for (const id of ["wkv-w", "wkv-u"]) $(id).addEventListener("input", updateWkv);
for (const id of ["tr-prompt", "tr-seed", "tr-spread"]) $(id).addEventListener("input", updateTrace);
updateCounts();
updateWkv();
updateTrace();
